"""Adam training loop and evaluation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ops
from .autodiff import backward
from .metrics import confusion
from .network import NetworkSpec, NumericError, ParamStore, forward, forward_graph, with_dropout
from .preprocess import PatchSet
from .tensor import ShapeError, deterministic_mode, make_rng

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, value in params.items():
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        return state


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState):
    """One Adam update with L2 weight decay folded into the gradient.

    Parameters are updated in place; ``(params, state)`` is returned.
    """
    for name, value in params.items():
        g = grads.get(name)
        if g is None or g.shape != value.shape:
            raise ShapeError(f"gradient for {name!r} missing or mis-shaped")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, value in params.items():
        g = grads[name]
        if state.weight_decay:
            g = g + value.dtype.type(state.weight_decay) * value
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        value -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(value.dtype)
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-6
    dropout: float | None = None  # None keeps the network's rate
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


def compute_gradients(net: NetworkSpec, params: ParamStore, x: np.ndarray, labels: np.ndarray,
                      mode: str = "train", rng: np.random.Generator | None = None):
    """Loss, class probabilities and parameter gradients for one minibatch.

    ``labels`` are class ids 1..L.
    """
    logits, nodes = forward_graph(net, params, x, mode, rng, requires_grad=True)
    truth = ops.one_hot(labels - 1, net.n_classes, dtype=logits.value.dtype)
    loss, probs = ops.softmax_xent(logits, truth)
    if not np.isfinite(loss.value):
        raise NumericError("non-finite loss")
    backward(loss)
    return float(loss.value), probs, {name: n.grad for name, n in nodes.items()}


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return make_rng(seed, epoch, 0).permutation(n)


def train(
    net: NetworkSpec,
    params: ParamStore,
    patches: PatchSet,
    train_idx: Sequence[int],
    config: TrainConfig,
    test_idx: Sequence[int] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ParamStore, list[dict]]:
    """Minibatch Adam on softmax cross-entropy.

    Returns the (in-place updated) parameters and one history row per epoch
    with the mean minibatch loss, train accuracy seen during the epoch, and
    test accuracy when ``test_idx`` is given.
    """
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("training split is empty")
    if config.dropout is not None:
        net = with_dropout(net, config.dropout)
    state = AdamState.for_params(params, lr=config.lr, weight_decay=config.weight_decay)
    history = []
    with deterministic_mode(config.deterministic):
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            order = train_idx[epoch_permutation(config.seed, epoch, train_idx.size)]
            drop_rng = make_rng(config.seed, epoch, 1)
            losses, correct = [], 0
            for b, lo in enumerate(range(0, order.size, config.batch_size)):
                idx = order[lo : lo + config.batch_size]
                x = patches.batch(idx).astype(next(iter(params.items()))[1].dtype, copy=False)
                y = patches.labels[idx]
                try:
                    loss, probs, grads = compute_gradients(net, params, x, y, "train", drop_rng)
                    adam_step(params, grads, state)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
                losses.append(loss)
                correct += int((probs.argmax(axis=1) + 1 == y).sum())
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                   "train_acc": correct / order.size}
            if test_idx is not None and len(test_idx):
                pred, _ = evaluate(net, params, patches, test_idx, config.batch_size)
                row["test_acc"] = float((pred == patches.labels[np.asarray(test_idx)]).mean())
            history.append(row)
            log.info("epoch %d loss %.4f acc %.4f (%.1fs)", epoch, row["train_loss"],
                     row["train_acc"], time.perf_counter() - start)
            if on_epoch:
                on_epoch(row)
    return params, history


def predict(net: NetworkSpec, params: ParamStore, patches: PatchSet, indices,
            batch_size: int = 256) -> np.ndarray:
    """Predicted class ids (1..L); ties go to the lowest id."""
    indices = np.asarray(indices, dtype=np.int64)
    dtype = next(iter(params.items()))[1].dtype
    out = np.empty(indices.size, dtype=np.int64)
    for lo in range(0, indices.size, batch_size):
        idx = indices[lo : lo + batch_size]
        logits = forward(net, params, patches.batch(idx).astype(dtype, copy=False), "eval")
        out[lo : lo + idx.size] = logits.argmax(axis=1) + 1
    return out


def evaluate(net: NetworkSpec, params: ParamStore, patches: PatchSet, indices,
             batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode predictions and the confusion matrix against centre labels."""
    pred = predict(net, params, patches, indices, batch_size)
    truth = patches.labels[np.asarray(indices, dtype=np.int64)]
    return pred, confusion(truth, pred, net.n_classes)


def write_history_csv(history: list[dict], path: str | Path) -> None:
    with_test = bool(history) and "test_acc" in history[0]
    cols = ["epoch", "train_loss", "train_acc"] + (["test_acc"] if with_test else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in history:
            writer.writerow([row["epoch"]] + [f"{row[c]:.6f}" for c in cols[1:]])
