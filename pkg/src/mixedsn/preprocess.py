"""PCA band reduction, patch extraction, standardization and splitting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .tensor import make_rng

# bands kept after PCA for each dataset preset
PCA_BANDS = {"ip": 30, "pu": 15, "sa": 15, "bw": 13}


@dataclass
class HsiCube:
    """Spectral cube stored as (rows P, cols Q, bands B)."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"cube must be a non-empty (P, Q, B) array, got {self.values.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]


@dataclass
class LabelMap:
    """Per-pixel class ids (0 = unlabeled, 1..L) and the class names."""

    ids: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        if self.ids.ndim != 2:
            raise ValueError(f"label map must be 2-D, got {self.ids.shape}")
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() > len(self.class_names)):
            raise ValueError(
                f"label ids must lie in 0..{len(self.class_names)}, found "
                f"{int(self.ids.min())}..{int(self.ids.max())}"
            )

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def labeled_count(self) -> int:
        return int((self.ids > 0).sum())

    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.ids.ravel(), minlength=self.n_classes + 1)[1:]


@dataclass
class ReducedCube:
    values: np.ndarray          # (P, Q, T)
    components: np.ndarray      # (B, T), orthonormal columns
    means: np.ndarray           # (B,)
    eigenvalues: np.ndarray     # all B eigenvalues, descending
    retained_variance: float

    @property
    def bands(self) -> int:
        return self.values.shape[2]

    def transform(self, cube: HsiCube) -> np.ndarray:
        P, Q, B = cube.shape
        flat = cube.values.reshape(-1, B).astype(np.float64) - self.means
        return (flat @ self.components).reshape(P, Q, -1)


def pca_reduce(cube: HsiCube, n_components: int) -> ReducedCube:
    """Project every pixel spectrum on the top principal components.

    Bands are mean-centred but not rescaled.  Each component is signed so
    that its largest-magnitude entry (lowest index on ties) is positive.
    """
    P, Q, B = cube.shape
    if not 1 <= n_components <= B:
        raise ValueError(f"cannot keep {n_components} components from {B} bands")
    if P * Q < 2:
        raise ValueError("PCA needs at least two pixels")
    flat = cube.values.reshape(-1, B).astype(np.float64)
    means = flat.mean(axis=0)
    centred = flat - means
    cov = centred.T @ centred / (flat.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    pivots = np.abs(evecs).argmax(axis=0)
    signs = np.sign(evecs[pivots, np.arange(B)])
    signs[signs == 0] = 1.0
    evecs = evecs * signs
    comps = np.ascontiguousarray(evecs[:, :n_components])
    total = evals.sum()
    retained = float(evals[:n_components].sum() / total) if total > 0 else 1.0
    values = (centred @ comps).reshape(P, Q, n_components)
    return ReducedCube(values, comps, means, evals, retained)


# ---------------------------------------------------------------- patches

PAD_MODES = ("border", "interior")


@dataclass
class PatchSet:
    """Neighbourhood patches around labeled centre pixels.

    Patches are cut lazily from a zero-padded copy of the reduced cube;
    ``batch(idx)`` returns ``(len(idx), 1, T, S, S)`` float32 arrays.
    """

    source: np.ndarray          # (T, P + S - 1, Q + S - 1), zero padded
    centers: np.ndarray         # (n, 2) row, col in the original grid
    labels: np.ndarray          # (n,) class ids 1..L
    window: int
    mode: str
    n_classes: int
    band_mean: np.ndarray = field(default=None)
    band_std: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def bands(self) -> int:
        return self.source.shape[0]

    def batch(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        S = self.window
        out = np.empty((idx.size, 1, self.bands, S, S), dtype=np.float32)
        for k, i in enumerate(idx):
            r, c = self.centers[i]
            out[k, 0] = self.source[:, r : r + S, c : c + S]
        return out

    @property
    def patches(self) -> np.ndarray:
        return self.batch(np.arange(len(self)))


def extract_patches(values: np.ndarray | ReducedCube, labels: LabelMap, window: int,
                    mode: str = "border", include_unlabeled: bool = False) -> PatchSet:
    """Cut S x S x T windows centred on labeled pixels, in row-major order.

    ``border`` zero-pads the cube so every labeled pixel gets a patch.
    ``interior`` only uses centres whose window fits inside the image,
    giving (P - S + 1)(Q - S + 1) patches on a fully labeled map.
    ``include_unlabeled`` keeps label-0 centres (for full-scene maps).
    """
    if isinstance(values, ReducedCube):
        values = values.values
    P, Q, T = values.shape
    if labels.ids.shape != (P, Q):
        raise ValueError(f"label map {labels.ids.shape} does not match cube {(P, Q)}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd number, got {window}")
    if mode not in PAD_MODES:
        raise ValueError(f"mode must be one of {PAD_MODES}, got {mode!r}")
    if mode == "interior" and window > min(P, Q):
        raise ValueError(f"window {window} exceeds image extents {(P, Q)}")
    half = (window - 1) // 2
    wanted = np.ones((P, Q), bool) if include_unlabeled else labels.ids > 0
    if mode == "interior":
        inside = np.zeros((P, Q), bool)
        inside[half : P - half, half : Q - half] = True
        wanted &= inside
    rows, cols = np.nonzero(wanted)
    source = np.pad(np.moveaxis(values, 2, 0).astype(np.float32),
                    ((0, 0), (half, half), (half, half)))
    centers = np.stack([rows, cols], axis=1).astype(np.int64)
    return PatchSet(np.ascontiguousarray(source), centers, labels.ids[rows, cols].astype(np.int64),
                    window, mode, labels.n_classes)


def standardize(patches: PatchSet, train_idx) -> PatchSet:
    """Zero-mean / unit-variance per band, with statistics from training patches.

    The affine map is applied to the padded source, which is the same as
    applying it to every voxel of every patch.  Bands with zero variance are
    only centred.
    """
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("standardize needs a non-empty training subset")
    T = patches.bands
    total = np.zeros(T)
    total_sq = np.zeros(T)
    count = 0
    for start in range(0, train_idx.size, 256):
        chunk = patches.batch(train_idx[start : start + 256]).astype(np.float64)
        total += chunk.sum(axis=(0, 1, 3, 4))
        count += chunk.shape[0] * chunk.shape[3] * chunk.shape[4]
    mean = total / count
    for start in range(0, train_idx.size, 256):
        chunk = patches.batch(train_idx[start : start + 256]).astype(np.float64)
        total_sq += ((chunk - mean[None, None, :, None, None]) ** 2).sum(axis=(0, 1, 3, 4))
    std = np.sqrt(total_sq / count)
    scale = np.where(std > 1e-12, std, 1.0)
    source = ((patches.source - mean[:, None, None]) / scale[:, None, None]).astype(np.float32)
    return replace(patches, source=source, band_mean=mean, band_std=std)


# ---------------------------------------------------------------- split


@dataclass
class SplitPlan:
    fraction: float
    seed: int
    train: dict[int, np.ndarray]   # class id -> indices into the labeled set
    test: dict[int, np.ndarray]
    rounding: str

    @property
    def train_indices(self) -> np.ndarray:
        return np.sort(np.concatenate([v for v in self.train.values()] or [np.empty(0, np.int64)]))

    @property
    def test_indices(self) -> np.ndarray:
        return np.sort(np.concatenate([v for v in self.test.values()] or [np.empty(0, np.int64)]))

    def counts(self) -> dict[int, tuple[int, int]]:
        return {c: (len(self.train[c]), len(self.test[c])) for c in sorted(self.train)}


def _half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def train_counts(sizes, fraction: float, rounding: str = "largest-remainder") -> list[int]:
    """Per-class training counts for a stratified split.

    ``largest-remainder`` fixes the total test count at
    ceil((1 - fraction) * n), gives every class the floor of its
    proportional share of the remaining training budget, and hands the
    leftover samples to the classes with the largest fractional parts
    (lowest class first on ties).  ``half-up`` rounds fraction * size per
    class independently.  Both keep at least one training and, where the
    class allows it, one test sample.
    """
    sizes = [int(s) for s in sizes]
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"train fraction must lie in (0, 1), got {fraction}")
    if any(s <= 0 for s in sizes):
        raise ValueError("every class needs at least one labeled sample")
    if rounding == "half-up":
        counts = [_half_up(fraction * s) for s in sizes]
    elif rounding == "largest-remainder":
        n = sum(sizes)
        # round() strips binary noise such as 0.7 * 10 = 7.000000000000001
        n_train = n - math.ceil(round((1.0 - fraction) * n, 9))
        shares = [s * n_train / n for s in sizes]
        counts = [math.floor(x) for x in shares]
        leftover = n_train - sum(counts)
        order = sorted(range(len(sizes)), key=lambda i: (-(shares[i] - counts[i]), i))
        for i in order[:leftover]:
            counts[i] += 1
    else:
        raise ValueError(f"unknown rounding rule {rounding!r}")
    return [min(max(c, 1), s - 1) if s > 1 else 1 for c, s in zip(counts, sizes)]


def stratified_split(labels, fraction: float, seed: int = 0,
                     rounding: str = "largest-remainder", n_classes: int | None = None) -> SplitPlan:
    """Random per-class split of labeled samples into train and test.

    ``labels`` holds the class id (1..L) of each labeled sample; returned
    indices point into that array.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) if labels.size else 0
    classes = list(range(1, n_classes + 1))
    members = {c: np.flatnonzero(labels == c) for c in classes}
    empty = [c for c in classes if members[c].size == 0]
    if empty:
        raise ValueError(f"classes without samples: {empty}")
    counts = train_counts([members[c].size for c in classes], fraction, rounding)
    rng = make_rng(seed)
    train, test = {}, {}
    for c, k in zip(classes, counts):
        perm = rng.permutation(members[c])
        train[c] = np.sort(perm[:k])
        test[c] = np.sort(perm[k:])
    return SplitPlan(fraction, seed, train, test, rounding)
