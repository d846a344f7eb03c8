import math
from dataclasses import replace

import numpy as np
import pytest

from mixedsn import ops
from mixedsn.network import (PUBLISHED_IP_PARAMETERS, PROFILES, NetworkSpec, NumericError,
                             ParamStore, ShapeTraceError, Widths, build_mixedsn, count_parameters, forward,
                             forward_graph, init_params, predict_proba, shape_trace, tiny_network,
                             with_dropout, zero_params)
from mixedsn.tensor import ShapeError


def brute_force_count(net):
    """Shape products over the layer list, independent of the parameter store."""
    total = 0
    for layer in net.layers:
        if layer.kind in ("conv3d", "conv2d"):
            total += math.prod(layer.spec.weight_shape) + layer.spec.out_channels
        elif layer.kind == "block":
            for conv in layer.spec.path_convs():
                total += layer.spec.cardinality * (math.prod(conv.weight_shape) + conv.out_channels)
        elif layer.kind == "dense":
            n_in, n_out = layer.spec
            total += n_in * n_out + n_out
    return total


@pytest.fixture(scope="module")
def ip():
    return build_mixedsn("ip")


class TestBuild:
    def test_ip_count_within_band(self, ip):
        net, params = ip
        total, _ = count_parameters(params)
        assert total == 321_488
        assert abs(total - PUBLISHED_IP_PARAMETERS) / PUBLISHED_IP_PARAMETERS <= 0.05

    def test_count_matches_brute_force(self, ip):
        net, params = ip
        assert params.total == brute_force_count(net)

    @pytest.mark.parametrize("profile", ["pu", "sa", "bw"])
    def test_other_profiles(self, profile):
        net, params = build_mixedsn(profile, init=False)
        assert net.bands == PROFILES[profile][0]
        assert net.n_classes == PROFILES[profile][1]

    def test_bw_dropout(self):
        net, _ = build_mixedsn("bw", init=False)
        assert net.dropout == 0.45
        assert [l.dropout for l in net.layers if l.dropout] == [0.45, 0.45]

    def test_smallest_custom(self):
        net, params = build_mixedsn("custom", n_classes=2, bands=8, window=9)
        assert params["fc3.weight"].shape[0] == 2

    def test_layer_counts(self, ip):
        _, params = ip
        assert params["stem.weight"].size + params["stem.bias"].size == 512
        assert params["fc3.weight"].shape == (16, 128)
        assert params["fc3.weight"].size + params["fc3.bias"].size == 2064

    def test_empty_store(self):
        assert count_parameters(ParamStore())[0] == 0

    def test_widths_monotone(self):
        half = build_mixedsn("custom", n_classes=16, bands=30, width_scale=0.5, init=False)[0]
        full = build_mixedsn("ip", init=False)[0]
        assert brute_force_count(half) < brute_force_count(full)

    def test_widths_scaled_floor(self):
        w = Widths().scaled(0.1)
        assert min(vars(w).values()) >= 1

    @pytest.mark.parametrize("kwargs", [dict(window=24), dict(bands=6), dict(n_classes=1),
                                        dict(dropout=1.0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            build_mixedsn("ip", **kwargs)

    def test_custom_needs_sizes(self):
        with pytest.raises(ValueError):
            build_mixedsn("custom", n_classes=4)

    def test_unknown_profile(self):
        with pytest.raises(ValueError):
            build_mixedsn("xx")

    def test_param_names_unique_and_ordered(self, ip):
        _, params = ip
        names = params.names()
        assert len(set(names)) == len(names)
        assert names[0] == "stem.weight" and names[-1] == "fc3.bias"
        assert names.index("block1.path0.reduce.weight") < names.index("block1.path0.expand.weight")

    def test_init_seeded(self):
        net, a = tiny_network(3, seed=4)
        b = init_params(net, seed=4)
        assert all(a[n].tobytes() == b[n].tobytes() for n in a)

    def test_spec_round_trip(self, ip):
        net, _ = ip
        assert NetworkSpec.from_dict(net.to_dict()) == net


class TestShapeTrace:
    def test_ip_extents(self, ip):
        rows = shape_trace(ip[0])
        assert all(min(r["shape"]) >= 1 for r in rows)
        shapes = {r["layer"]: r["shape"] for r in rows}
        assert shapes["stem"] == (8, 30, 25, 25)
        assert shapes["fold"][1:] == (22, 22)
        assert shapes["fc3"] == (16,)

    def test_convs_preserve_extents(self, ip):
        rows = shape_trace(ip[0])
        for prev, row in zip(rows, rows[1:]):
            if row["kind"] in ("conv3d", "conv2d", "block"):
                assert row["shape"][1:] == prev["shape"][1:]

    def test_small_window_fails_late(self):
        with pytest.raises(ShapeTraceError, match="pool5"):
            build_mixedsn("ip", window=5)

    def test_shape_trace_error_is_shape_error(self):
        assert issubclass(ShapeTraceError, ShapeError)


class TestForward:
    def test_ip_logits(self, ip):
        net, params = ip
        x = np.random.default_rng(0).standard_normal((2, 1, 30, 25, 25)).astype(np.float32)
        logits = forward(net, params, x)
        assert logits.shape == (2, 16)
        np.testing.assert_allclose(ops.softmax(logits).sum(axis=1), 1.0, atol=1e-5)

    def test_zero_weights_uniform(self):
        net, _ = tiny_network(5)
        probs = predict_proba(net, zero_params(net), np.zeros((3, 1, 8, 9, 9), np.float32))
        np.testing.assert_allclose(probs, 0.2, atol=1e-7)

    def test_eval_repeatable(self, rng):
        net, params = tiny_network(3)
        x = rng.standard_normal((4, 1, 8, 9, 9)).astype(np.float32)
        assert forward(net, params, x).tobytes() == forward(net, params, x).tobytes()

    def test_batch_permutation(self, rng):
        net, params = tiny_network(3, dtype=np.float64)
        x = rng.standard_normal((5, 1, 8, 9, 9))
        perm = rng.permutation(5)
        np.testing.assert_allclose(forward(net, params, x)[perm], forward(net, params, x[perm]),
                                   atol=1e-12)

    def test_train_mode_dropout_changes_output(self, rng):
        net, params = tiny_network(3)
        x = rng.standard_normal((4, 1, 8, 9, 9)).astype(np.float32)
        a = forward(net, params, x, "train", np.random.default_rng(0))
        b = forward(net, params, x, "eval")
        assert not np.array_equal(a, b)

    def test_block_identity_with_zero_paths(self, rng):
        net, params = tiny_network(3, dtype=np.float64)
        x = rng.standard_normal((2, 1, 8, 9, 9))
        p = params.copy()
        for name in p:
            if name.startswith("block1."):
                p[name] = np.zeros_like(p[name])
        # zero paths make the block the identity, so dropping it changes nothing
        short = replace(net, layers=[l for l in net.layers if l.name != "block1"])
        np.testing.assert_array_equal(forward(short, p, x), forward(net, p, x))

    def test_expand_scaling_is_linear(self, rng):
        # expand biases start at zero, so doubling expand weights doubles each branch
        net, params = tiny_network(3, dtype=np.float64)
        cut = [l.name for l in net.layers].index("block1") + 1
        head = replace(net, layers=net.layers[:cut])
        x = rng.standard_normal((2, 1, 8, 9, 9))
        zero, doubled = params.copy(), params.copy()
        for name in params:
            if name.startswith("block1."):
                zero[name] = np.zeros_like(params[name])
                if name.endswith("expand.weight"):
                    doubled[name] = 2 * params[name]
        y0, y1, y2 = (forward(head, p, x) for p in (zero, params, doubled))
        assert not np.allclose(y1, y0)
        np.testing.assert_allclose(y2 - y0, 2 * (y1 - y0), atol=1e-12)

    def test_bad_batch_shape(self):
        net, params = tiny_network(3)
        with pytest.raises(ShapeError):
            forward(net, params, np.zeros((1, 1, 8, 7, 7), np.float32))

    def test_non_finite_detected(self):
        net, params = tiny_network(3)
        p = params.copy()
        p["stem.bias"] = np.full_like(p["stem.bias"], np.inf)
        with pytest.raises(NumericError, match="stem"):
            forward(net, p, np.zeros((1, 1, 8, 9, 9), np.float32))

    def test_with_dropout(self):
        net, _ = tiny_network(3)
        assert [l.dropout for l in with_dropout(net, 0.0).layers if l.name.startswith("fc")] == [0.0, 0.0, 0.0]
        assert [l.dropout for l in with_dropout(net, 0.2).layers if l.name in ("fc1", "fc2")] == [0.2, 0.2]
