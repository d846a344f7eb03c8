import numpy as np
import pytest

from mixedsn.dataset_io import SyntheticSceneSpec, synth_scene
from mixedsn.network import tiny_network

# Indian Pines class sizes and the published per-class train/test counts.
IP_SIZES = [46, 1428, 830, 237, 483, 730, 28, 478, 20, 972, 2455, 593, 205, 1265, 386, 93]
IP_SPLIT_10 = [(5, 41), (143, 1285), (83, 747), (24, 213), (48, 435), (73, 657), (3, 25),
               (48, 430), (2, 18), (97, 875), (245, 2210), (59, 534), (20, 185), (126, 1139),
               (39, 347), (9, 84)]
IP_SPLIT_30 = [(14, 32), (428, 1000), (249, 581), (71, 166), (145, 338), (219, 511), (8, 20),
               (143, 335), (6, 14), (292, 680), (736, 1719), (178, 415), (62, 143), (379, 886),
               (116, 270), (28, 65)]


@pytest.fixture(scope="session")
def scene():
    return synth_scene(SyntheticSceneSpec(), seed=0)


@pytest.fixture(scope="session")
def small_scene():
    spec = SyntheticSceneSpec(height=12, width=12, bands=8, n_classes=3, blobs_per_class=1)
    return synth_scene(spec, seed=1)


@pytest.fixture
def tiny64():
    return tiny_network(3, dtype=np.float64, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""
    lines = request.config.stash.setdefault(VERDICTS, [])

    def record(number: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
