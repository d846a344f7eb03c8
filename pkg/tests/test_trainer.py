import numpy as np
import pytest

from mixedsn.network import NumericError, ParamStore, tiny_network, zero_params
from mixedsn.pipeline import RunOptions, prepare
from mixedsn.preprocess import LabelMap, extract_patches
from mixedsn.tensor import ShapeError, make_rng
from mixedsn.trainer import (AdamState, TrainConfig, adam_step, compute_gradients, evaluate,
                             predict, train, write_history_csv)


@pytest.fixture(scope="module")
def prepared(scene):
    cube, labels = scene
    opts = RunOptions(profile="custom", bands=8, window=9, widths="quartered")
    return prepare(cube, labels, opts)


def balanced_batch(prep, per_class=2):
    tr = prep.split.train_indices
    labels = prep.patches.labels[tr]
    return np.concatenate([tr[labels == c][:per_class] for c in range(1, 5)])


class TestAdam:
    def test_single_step_closed_form(self):
        p = ParamStore([("w", np.zeros(1))])
        state = AdamState.for_params(p, weight_decay=0.0)
        adam_step(p, {"w": np.ones(1)}, state)
        assert abs(p["w"][0] - (-0.001 / (1 + 1e-8))) < 1e-15
        assert state.t == 1

    def test_zero_gradient_no_decay(self):
        p = ParamStore([("w", np.array([1.5, -2.0]))])
        adam_step(p, {"w": np.zeros(2)}, AdamState.for_params(p, weight_decay=0.0))
        assert p["w"].tolist() == [1.5, -2.0]

    def test_decay_shrinks(self):
        p = ParamStore([("w", np.array([2.0]))])
        adam_step(p, {"w": np.zeros(1)}, AdamState.for_params(p, weight_decay=1e-2))
        assert p["w"][0] < 2.0

    def test_bias_correction_second_step(self):
        # constant gradient g: m_hat = v_hat / g = g, so every step moves by lr * g / (|g| + eps)
        p = ParamStore([("w", np.zeros(1))])
        state = AdamState.for_params(p, weight_decay=0.0)
        for _ in range(3):
            adam_step(p, {"w": np.full(1, 0.5)}, state)
        assert abs(p["w"][0] + 3 * 0.001 * 0.5 / (0.5 + 1e-8)) < 1e-12

    def test_non_finite_gradient(self):
        p = ParamStore([("w", np.zeros(1))])
        with pytest.raises(NumericError):
            adam_step(p, {"w": np.array([np.nan])}, AdamState.for_params(p))
        assert p["w"][0] == 0.0

    def test_missing_gradient(self):
        p = ParamStore([("w", np.zeros(1))])
        with pytest.raises(ShapeError):
            adam_step(p, {}, AdamState.for_params(p))


class TestTrain:
    def test_lr_zero_keeps_params(self, prepared):
        net, params = tiny_network(4)
        before = params.copy()
        train(net, params, prepared.patches, prepared.split.train_indices[:32],
              TrainConfig(epochs=2, batch_size=16, lr=0.0))
        assert all(before[n].tobytes() == params[n].tobytes() for n in params)

    def test_deterministic_history(self, prepared):
        runs = []
        for _ in range(2):
            net, params = tiny_network(4)
            _, hist = train(net, params, prepared.patches, prepared.split.train_indices[:48],
                            TrainConfig(epochs=2, batch_size=16, seed=3))
            runs.append((hist, b"".join(v.tobytes() for _, v in params.items())))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]

    def test_single_batch_overfit(self, prepared):
        net, params = tiny_network(4, dropout=0.0)
        idx = balanced_batch(prepared)
        x, y = prepared.patches.batch(idx), prepared.patches.labels[idx]
        state = AdamState.for_params(params)
        losses = []
        for step in range(200):
            loss, _, grads = compute_gradients(net, params, x, y, "train", make_rng(0, step))
            losses.append(loss)
            if loss < 0.01:
                break
            adam_step(params, grads, state)
        assert len(idx) == 8 and len(set(y.tolist())) == 4
        assert min(losses) < 0.01

    def test_small_lr_decreases_loss(self, prepared):
        net, params = tiny_network(4, dropout=0.0, dtype=np.float64)
        idx = balanced_batch(prepared, 4)
        x, y = prepared.patches.batch(idx).astype(np.float64), prepared.patches.labels[idx]
        state = AdamState.for_params(params, lr=1e-4)
        losses = []
        for _ in range(10):
            loss, _, grads = compute_gradients(net, params, x, y, "eval")
            losses.append(loss)
            adam_step(params, grads, state)
        assert all(b <= a for a, b in zip(losses, losses[1:]))

    def test_history_rows(self, prepared, tmp_path):
        net, params = tiny_network(4)
        _, hist = train(net, params, prepared.patches, prepared.split.train_indices[:20],
                        TrainConfig(epochs=3, batch_size=8),
                        test_idx=prepared.split.test_indices[:10])
        assert [r["epoch"] for r in hist] == [1, 2, 3]
        assert all(0 <= r["test_acc"] <= 1 for r in hist)
        write_history_csv(hist, tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,train_acc,test_acc" and len(lines) == 4

    def test_on_epoch_callback(self, prepared):
        seen = []
        net, params = tiny_network(4)
        train(net, params, prepared.patches, prepared.split.train_indices[:8],
              TrainConfig(epochs=2, batch_size=8), on_epoch=seen.append)
        assert len(seen) == 2

    def test_empty_split(self, prepared):
        net, params = tiny_network(4)
        with pytest.raises(ValueError):
            train(net, params, prepared.patches, [], TrainConfig(epochs=1))

    @pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(batch_size=0)])
    def test_bad_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_numeric_blowup(self, prepared):
        net, params = tiny_network(4)
        params["fc3.bias"] = np.full_like(params["fc3.bias"], np.nan)
        with pytest.raises(NumericError, match="epoch 1"):
            train(net, params, prepared.patches, prepared.split.train_indices[:8],
                  TrainConfig(epochs=1, batch_size=8))


class TestPredict:
    def test_zero_net_predicts_lowest_class(self):
        net, _ = tiny_network(3)
        ids = np.ones((4, 4), dtype=np.int64)
        ids[0, :2] = 3
        patches = extract_patches(np.zeros((4, 4, 8)), LabelMap(ids, ["a", "b", "c"]), 9)
        pred, cm = evaluate(net, zero_params(net), patches, np.arange(len(patches)))
        assert (pred == 1).all()
        assert len(pred) == len(patches)
        assert cm.sum() == len(patches)

    def test_evaluate_has_no_side_effects(self, prepared):
        net, params = tiny_network(4)
        before = params.copy()
        idx = prepared.split.test_indices[:30]
        a, _ = evaluate(net, params, prepared.patches, idx, batch_size=7)
        b = predict(net, params, prepared.patches, idx)
        assert a.tolist() == b.tolist()
        assert all(before[n].tobytes() == params[n].tobytes() for n in params)
