"""Central-difference gradient checks for the differentiable ops."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .autodiff import Node, backward, leaf
from .tensor import make_rng

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4
# Gradients smaller than this are compared in absolute terms.
REL_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)
    tol: float = DEFAULT_TOL
    n_coords: int = 0
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<14} max_rel_err={self.max_rel_error:.3e} "
                f"coords={self.n_coords:<6d} tol={self.tol:.0e} {status}")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = DEFAULT_H,
                     coords: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def grad_check(
    fn: Callable[..., Node],
    inputs: Sequence[np.ndarray],
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
    name: str = "op",
    coords: Sequence[Sequence[int] | None] | None = None,
) -> GradCheckReport:
    """Compare analytic and central-difference gradients of a scalar graph.

    ``fn`` receives one leaf node per input array and returns a scalar node.
    Inputs must be float64; they are perturbed in place and restored.
    """
    start = time.perf_counter()
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    nodes = [leaf(a, requires_grad=True) for a in arrays]
    out = fn(*nodes)
    if out.value.size != 1:
        raise ValueError(f"grad_check needs a scalar output, got shape {out.shape}")
    backward(out)
    analytic = [n.grad for n in nodes]

    def evaluate() -> float:
        return float(fn(*[leaf(a) for a in arrays]).value)

    per_input, n_coords = [], 0
    for k, a in enumerate(arrays):
        sel = None if coords is None else coords[k]
        num = numeric_gradient(evaluate, a, h, sel)
        if sel is None:
            err = relative_error(analytic[k], num)
            n_coords += a.size
        else:
            sel = np.asarray(sel, dtype=np.int64)
            err = relative_error(analytic[k].reshape(-1)[sel], num.reshape(-1)[sel])
            n_coords += sel.size
        per_input.append(float(err.max()) if err.size else 0.0)
    return GradCheckReport(name, max(per_input, default=0.0), per_input, tol, n_coords,
                           time.perf_counter() - start)


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 1e-3) -> np.ndarray:
    v = rng.standard_normal(shape)
    return np.where(np.abs(v) < 0.05, np.sign(v + 1e-12) * (0.05 + margin), v)


def _distinct_values(rng: np.random.Generator, shape) -> np.ndarray:
    # Well-separated values so no window has a near-tie within +-h.
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 - n * 0.005).reshape(shape).astype(np.float64)


def _projected(node: Node, proj: np.ndarray) -> Node:
    return ops.weighted_sum(node, proj)


def op_suite(seed: int = 0, h: float = DEFAULT_H, tol: float = DEFAULT_TOL) -> list[GradCheckReport]:
    """Run the gradient check on every differentiable op."""
    rng = make_rng(seed)
    reports = []

    x = rng.standard_normal((1, 2, 3, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3)) * 0.3
    b = rng.standard_normal(3)
    proj = rng.standard_normal((1, 3, 3, 4, 4))
    reports.append(grad_check(lambda x, w, b: _projected(ops.conv3d(x, w, b), proj),
                              [x, w, b], h, tol, "conv3d"))

    x = rng.standard_normal((2, 3, 5, 4))
    w = rng.standard_normal((2, 3, 3, 3)) * 0.3
    b = rng.standard_normal(2)
    proj = rng.standard_normal((2, 2, 5, 4))
    reports.append(grad_check(lambda x, w, b: _projected(ops.conv2d(x, w, b), proj),
                              [x, w, b], h, tol, "conv2d"))

    spec3 = ops.PoolSpec("max3d", (2, 2, 2), (2, 1, 1))
    x = _distinct_values(rng, (1, 2, 5, 4, 4))
    proj = rng.standard_normal((1, 2, *spec3.output_extents((5, 4, 4))))
    reports.append(grad_check(lambda x: _projected(ops.maxpool3d(x, spec3), proj),
                              [x], h, tol, "maxpool3d"))

    spec2 = ops.PoolSpec("max2d", (2, 2), (2, 2))
    x = _distinct_values(rng, (2, 2, 5, 6))
    proj = rng.standard_normal((2, 2, *spec2.output_extents((5, 6))))
    reports.append(grad_check(lambda x: _projected(ops.maxpool2d(x, spec2), proj),
                              [x], h, tol, "maxpool2d"))

    x = _away_from_zero(rng, (3, 7))
    proj = rng.standard_normal((3, 7))
    reports.append(grad_check(lambda x: _projected(ops.relu(x), proj), [x], h, tol, "relu"))

    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((4, 5))
    b = rng.standard_normal(4)
    proj = rng.standard_normal((3, 4))
    reports.append(grad_check(lambda x, w, b: _projected(ops.linear(x, w, b), proj),
                              [x, w, b], h, tol, "linear"))

    xs = [rng.standard_normal((2, 3, 4)) for _ in range(5)]
    proj = rng.standard_normal((2, 3, 4))
    reports.append(grad_check(lambda x, *br: _projected(ops.residual_add(x, list(br)), proj),
                              xs, h, tol, "residual_add"))

    x = rng.standard_normal((2, 2, 3, 2, 2))
    proj = rng.standard_normal((2, 6, 2, 2))
    reports.append(grad_check(lambda x: _projected(ops.depth_fold(x), proj),
                              [x], h, tol, "depth_fold"))

    logits = rng.standard_normal((4, 6)) * 2
    truth = ops.one_hot(rng.integers(0, 6, size=4), 6, dtype=np.float64)
    reports.append(grad_check(lambda z: ops.softmax_xent(z, truth)[0],
                              [logits], h, tol, "softmax_xent"))
    return reports


OP_NAMES = ("conv3d", "conv2d", "maxpool3d", "maxpool2d", "relu", "linear",
            "residual_add", "depth_fold", "softmax_xent")


def network_check(net, params, x: np.ndarray, labels: np.ndarray, h: float = DEFAULT_H,
                  tol: float = 1e-3, per_tensor: int | None = None,
                  seed: int = 0) -> GradCheckReport:
    """Check d(loss)/d(parameter) of a whole network in float64, eval mode.

    ``per_tensor`` limits the check to that many random coordinates of each
    parameter tensor; ``None`` checks every coordinate.  Zero biases put
    dead ReLU regions exactly on the kink, so callers should pass a point
    with non-zero biases (see ``jitter_biases``).
    """
    from .network import forward_graph

    start = time.perf_counter()
    params = params.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    truth = ops.one_hot(np.asarray(labels) - 1, net.n_classes, dtype=np.float64)

    def loss_of(store) -> Node:
        logits, nodes = forward_graph(net, store, x, "eval", requires_grad=True)
        return ops.softmax_xent(logits, truth)[0], nodes

    loss, nodes = loss_of(params)
    backward(loss)
    rng = make_rng(seed)
    per_input, n_coords = [], 0
    for name, value in params.items():
        sel = None
        if per_tensor is not None and per_tensor < value.size:
            sel = rng.choice(value.size, size=per_tensor, replace=False)
        num = numeric_gradient(lambda: float(loss_of(params)[0].value), value, h, sel)
        analytic = nodes[name].grad
        if sel is None:
            err = relative_error(analytic, num)
        else:
            err = relative_error(analytic.reshape(-1)[sel], num.reshape(-1)[sel])
        n_coords += err.size
        per_input.append(float(err.max()))
    return GradCheckReport("network", max(per_input), per_input, tol, n_coords,
                           time.perf_counter() - start)


def jitter_biases(params, scale: float = 0.1, seed: int = 0):
    """Copy of ``params`` with every bias drawn uniformly from +-[scale/2, scale]."""
    rng = make_rng(seed, 1)
    out = params.copy()
    for name, value in out.items():
        if name.endswith(".bias"):
            mag = rng.uniform(scale / 2, scale, size=value.shape)
            sign = rng.choice([-1.0, 1.0], size=value.shape)
            out[name] = (mag * sign).astype(value.dtype)
    return out
