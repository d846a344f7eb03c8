"""Differentiable layers: convolution, pooling, activations, losses.

Convolutions are lowered to a matrix multiply by gathering every kernel
window into a column matrix.  The gather is done in batch chunks so the
column matrix stays bounded; the backward pass re-gathers instead of keeping
the columns alive.  ``conv3d_reference`` / ``conv2d_reference`` are direct
loop kernels kept as oracles.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Node
from .tensor import ShapeError

# Upper bound on elements in one gathered column matrix.
COLUMN_BUDGET = 1 << 23

Padding = tuple[tuple[int, int], ...]


def same_padding(kernel: Sequence[int]) -> Padding:
    """Low/high zero padding keeping stride-1 extents unchanged."""
    return tuple(((k - 1) // 2, k // 2) for k in kernel)


@dataclass(frozen=True)
class Conv3dSpec:
    """3D convolution layer description.

    ``kernel`` is written the way the architecture is described:
    (height, width, spectral depth).  Tensors use (depth, height, width)
    axis order, so ``weight_shape`` is (out, in, depth, height, width).
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]
    padding: str = "same"

    @property
    def tensor_kernel(self) -> tuple[int, int, int]:
        kh, kw, kd = self.kernel
        return (kd, kh, kw)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, *self.tensor_kernel)

    @property
    def pad(self) -> Padding:
        return _resolve_padding(self.padding, self.tensor_kernel)

    @property
    def n_params(self) -> int:
        return math.prod(self.weight_shape) + self.out_channels


@dataclass(frozen=True)
class Conv2dSpec:
    """2D convolution layer description; kernel is (height, width)."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    padding: str = "same"

    @property
    def tensor_kernel(self) -> tuple[int, int]:
        return tuple(self.kernel)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, *self.tensor_kernel)

    @property
    def pad(self) -> Padding:
        return _resolve_padding(self.padding, self.tensor_kernel)

    @property
    def n_params(self) -> int:
        return math.prod(self.weight_shape) + self.out_channels


@dataclass(frozen=True)
class PoolSpec:
    """Max pooling window.

    ``kernel`` and ``stride`` follow tensor axis order: (depth, height,
    width) for ``max3d`` and (height, width) for ``max2d``.  No padding.
    """

    kind: str
    kernel: tuple[int, ...]
    stride: tuple[int, ...]

    def __post_init__(self):
        nd = {"max3d": 3, "max2d": 2}.get(self.kind)
        if nd is None:
            raise ValueError(f"unknown pool kind {self.kind!r}")
        if len(self.kernel) != nd or len(self.stride) != nd:
            raise ValueError(f"{self.kind} needs {nd} kernel and stride entries")
        if min(self.stride) < 1 or min(self.kernel) < 1:
            raise ValueError("pool kernel and stride must be positive")

    def output_extents(self, extents: Sequence[int]) -> tuple[int, ...]:
        return tuple(
            (n - k) // s + 1 if n >= k else 0
            for n, k, s in zip(extents, self.kernel, self.stride)
        )


def _resolve_padding(padding, kernel) -> Padding:
    if padding == "same":
        return same_padding(kernel)
    if padding == "valid":
        return tuple((0, 0) for _ in kernel)
    pad = tuple((int(lo), int(hi)) for lo, hi in padding)
    if len(pad) != len(kernel):
        raise ValueError("padding needs one (low, high) pair per kernel axis")
    return pad


# ---------------------------------------------------------------- convolution


def _gather_columns(xp: np.ndarray, kernel: Sequence[int]) -> tuple[np.ndarray, tuple[int, ...]]:
    nd = len(kernel)
    spatial_axes = tuple(range(2, 2 + nd))
    win = sliding_window_view(xp, tuple(kernel), axis=spatial_axes)
    out_ext = win.shape[2 : 2 + nd]
    perm = (0, *range(2, 2 + nd), 1, *range(2 + nd, 2 + 2 * nd))
    cols = win.transpose(perm).reshape(-1, xp.shape[1] * math.prod(kernel))
    return cols, out_ext


def _pad(x: np.ndarray, pad: Padding) -> np.ndarray:
    if not any(lo or hi for lo, hi in pad):
        return x
    shape = x.shape[:2] + tuple(n + lo + hi for n, (lo, hi) in zip(x.shape[2:], pad))
    out = np.zeros(shape, dtype=x.dtype)
    out[(slice(None), slice(None)) + tuple(slice(lo, lo + n) for n, (lo, _) in
                                           zip(x.shape[2:], pad))] = x
    return out


def _is_pointwise(kernel, pad) -> bool:
    return all(k == 1 for k in kernel) and not any(lo or hi for lo, hi in pad)


def _batch_chunks(batch: int, per_sample: int) -> list[slice]:
    step = max(1, COLUMN_BUDGET // max(per_sample, 1))
    return [slice(i, min(i + step, batch)) for i in range(0, batch, step)]


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: Padding) -> np.ndarray:
    nd = w.ndim - 2
    kernel = w.shape[2:]
    if _is_pointwise(kernel, pad):
        out = np.moveaxis(x, 1, -1) @ w.reshape(w.shape[0], -1).T + b
        return np.ascontiguousarray(np.moveaxis(out, -1, 1))
    xp = _pad(x, pad)
    out_ext = tuple(xp.shape[2 + i] - kernel[i] + 1 for i in range(nd))
    out_ch = w.shape[0]
    wm = w.reshape(out_ch, -1)
    per_sample = math.prod(out_ext) * wm.shape[1]
    out = np.empty((x.shape[0], *out_ext, out_ch), dtype=np.result_type(x, w))
    for sl in _batch_chunks(x.shape[0], per_sample):
        cols, _ = _gather_columns(xp[sl], kernel)
        out[sl] = (cols @ wm.T + b).reshape(-1, *out_ext, out_ch)
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def _conv_backward(
    g: np.ndarray, x: np.ndarray, w: np.ndarray, pad: Padding, need_x: bool, need_w: bool
):
    nd = w.ndim - 2
    kernel = w.shape[2:]
    out_ch = w.shape[0]
    db = g.sum(axis=(0, *range(2, 2 + nd)))
    if _is_pointwise(kernel, pad):
        wm = w.reshape(out_ch, -1)
        gm = np.moveaxis(g, 1, -1).reshape(-1, out_ch)
        dw = (gm.T @ np.moveaxis(x, 1, -1).reshape(-1, wm.shape[1])).reshape(w.shape) if need_w else None
        dx = np.ascontiguousarray(np.moveaxis(np.moveaxis(g, 1, -1) @ wm, -1, 1)) if need_x else None
        return dx, dw, db
    xp = _pad(x, pad)
    out_ext = g.shape[2:]
    wm = w.reshape(out_ch, -1)
    gm_all = np.moveaxis(g, 1, -1)
    dw = np.zeros_like(wm) if need_w else None
    dxp = np.zeros_like(xp) if need_x else None
    per_sample = math.prod(out_ext) * wm.shape[1]
    for sl in _batch_chunks(x.shape[0], per_sample):
        gm = gm_all[sl].reshape(-1, out_ch)
        if need_w:
            cols, _ = _gather_columns(xp[sl], kernel)
            dw += gm.T @ cols
        if need_x:
            dcols = (gm @ wm).reshape(-1, *out_ext, x.shape[1], *kernel)
            # move channel axis to 1: (B, C, *out, *k)
            dcols = np.moveaxis(dcols, 1 + nd, 1)
            target = dxp[sl]
            for offset in itertools.product(*(range(k) for k in kernel)):
                region = (slice(None), slice(None)) + tuple(
                    slice(o, o + n) for o, n in zip(offset, out_ext)
                )
                target[region] += dcols[(Ellipsis, *offset)]
    dx = None
    if need_x:
        crop = (slice(None), slice(None)) + tuple(
            slice(lo, lo + n) for (lo, _), n in zip(pad, x.shape[2:])
        )
        dx = np.ascontiguousarray(dxp[crop])
    return dx, (dw.reshape(w.shape) if need_w else None), db


def _conv(x: Node, weight: Node, bias: Node, pad: Padding, nd: int, name: str) -> Node:
    xv, wv, bv = x.value, weight.value, bias.value
    if xv.ndim != nd + 2:
        raise ShapeError(f"{name}: expected {nd + 2}-axis input, got {xv.shape}")
    if wv.ndim != nd + 2:
        raise ShapeError(f"{name}: expected {nd + 2}-axis weight, got {wv.shape}")
    if xv.shape[1] != wv.shape[1]:
        raise ShapeError(
            f"{name}: input has {xv.shape[1]} channels, weight expects {wv.shape[1]}"
        )
    if bv.shape != (wv.shape[0],):
        raise ShapeError(f"{name}: bias shape {bv.shape} != ({wv.shape[0]},)")
    for n, k, (lo, hi) in zip(xv.shape[2:], wv.shape[2:], pad):
        if n + lo + hi < k:
            raise ShapeError(f"{name}: kernel {wv.shape[2:]} larger than padded input {xv.shape[2:]}")
    out = _conv_forward(xv, wv, bv, pad)

    def rule(g):
        return _conv_backward(g, xv, wv, pad, x.requires_grad, weight.requires_grad)

    return Node(out, (x, weight, bias), rule)


def conv3d(x: Node, weight: Node, bias: Node, spec: Conv3dSpec | None = None, padding="same") -> Node:
    """Pre-activation 3D convolution, stride 1.

    ``x`` is (batch, channels, depth, height, width); ``weight`` is
    (out, in, depth, height, width).  ``padding`` is ``"same"``, ``"valid"``
    or explicit per-axis (low, high) pairs; a ``spec`` overrides it.
    """
    if spec is not None:
        if weight.shape != spec.weight_shape:
            raise ShapeError(f"conv3d: weight {weight.shape} != spec {spec.weight_shape}")
        pad = spec.pad
    else:
        pad = _resolve_padding(padding, weight.shape[2:])
    return _conv(x, weight, bias, pad, 3, "conv3d")


def conv2d(x: Node, weight: Node, bias: Node, spec: Conv2dSpec | None = None, padding="same") -> Node:
    """Pre-activation 2D convolution, stride 1; see ``conv3d``."""
    if spec is not None:
        if weight.shape != spec.weight_shape:
            raise ShapeError(f"conv2d: weight {weight.shape} != spec {spec.weight_shape}")
        pad = spec.pad
    else:
        pad = _resolve_padding(padding, weight.shape[2:])
    return _conv(x, weight, bias, pad, 2, "conv2d")


def conv3d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray, padding="same") -> np.ndarray:
    """Direct loop evaluation of the 3D convolution sum (slow; for tests)."""
    pad = _resolve_padding(padding, w.shape[2:])
    xp = np.pad(x, ((0, 0), (0, 0), *pad))
    B, M = x.shape[:2]
    O, _, R, P, Q = w.shape
    D, H, W = (xp.shape[2] - R + 1, xp.shape[3] - P + 1, xp.shape[4] - Q + 1)
    out = np.zeros((B, O, D, H, W), dtype=np.result_type(x, w))
    for n in range(B):
        for j in range(O):
            for z in range(D):
                for y in range(H):
                    for xx in range(W):
                        acc = b[j]
                        for m in range(M):
                            for r in range(R):
                                for p in range(P):
                                    for q in range(Q):
                                        acc += w[j, m, r, p, q] * xp[n, m, z + r, y + p, xx + q]
                        out[n, j, z, y, xx] = acc
    return out


def conv2d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray, padding="same") -> np.ndarray:
    """Direct loop evaluation of the 2D convolution sum (slow; for tests)."""
    pad = _resolve_padding(padding, w.shape[2:])
    xp = np.pad(x, ((0, 0), (0, 0), *pad))
    B, M = x.shape[:2]
    O, _, P, Q = w.shape
    H, W = xp.shape[2] - P + 1, xp.shape[3] - Q + 1
    out = np.zeros((B, O, H, W), dtype=np.result_type(x, w))
    for n in range(B):
        for j in range(O):
            for y in range(H):
                for xx in range(W):
                    acc = b[j]
                    for m in range(M):
                        for p in range(P):
                            for q in range(Q):
                                acc += w[j, m, p, q] * xp[n, m, y + p, xx + q]
                    out[n, j, y, xx] = acc
    return out


# ---------------------------------------------------------------- pooling


def _maxpool(x: Node, spec: PoolSpec, nd: int) -> Node:
    xv = x.value
    if xv.ndim != nd + 2:
        raise ShapeError(f"{spec.kind}: expected {nd + 2}-axis input, got {xv.shape}")
    out_ext = spec.output_extents(xv.shape[2:])
    if min(out_ext) < 1:
        raise ShapeError(f"{spec.kind}: kernel {spec.kernel} exceeds input extents {xv.shape[2:]}")
    win = sliding_window_view(xv, spec.kernel, axis=tuple(range(2, 2 + nd)))
    win = win[(slice(None), slice(None), *(slice(None, None, s) for s in spec.stride))]
    flat = win.reshape(*xv.shape[:2], *out_ext, -1)
    arg = flat.argmax(axis=-1)  # first maximum = lowest linear index in the window
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        offsets = np.unravel_index(arg, spec.kernel)
        grids = np.indices(arg.shape, sparse=True)
        coords = [grids[0], grids[1]]
        for axis in range(nd):
            coords.append(grids[2 + axis] * spec.stride[axis] + offsets[axis])
        flat_idx = np.ravel_multi_index(coords, xv.shape)
        gx = np.bincount(flat_idx.ravel(), weights=g.ravel(), minlength=xv.size)
        return (gx.reshape(xv.shape).astype(xv.dtype, copy=False),)

    return Node(np.ascontiguousarray(out), (x,), rule)


def maxpool3d(x: Node, spec: PoolSpec) -> Node:
    if spec.kind != "max3d":
        raise ValueError(f"maxpool3d got a {spec.kind} spec")
    return _maxpool(x, spec, 3)


def maxpool2d(x: Node, spec: PoolSpec) -> Node:
    if spec.kind != "max2d":
        raise ValueError(f"maxpool2d got a {spec.kind} spec")
    return _maxpool(x, spec, 2)


# ---------------------------------------------------------------- elementwise & dense


def relu(x: Node) -> Node:
    xv = x.value
    mask = xv > 0
    out = np.where(mask, xv, xv.dtype.type(0))

    def rule(g):
        return (g * mask,)

    return Node(out, (x,), rule)


def linear(x: Node, weight: Node, bias: Node) -> Node:
    """x @ weight.T + bias for x (batch, features), weight (out, features)."""
    xv, wv, bv = x.value, weight.value, bias.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"linear: input {xv.shape} incompatible with weight {wv.shape}")
    if bv.shape != (wv.shape[0],):
        raise ShapeError(f"linear: bias shape {bv.shape} != ({wv.shape[0]},)")
    out = xv @ wv.T + bv

    def rule(g):
        return g @ wv, g.T @ xv, g.sum(axis=0)

    return Node(out, (x, weight, bias), rule)


def dropout(x: Node, rate: float, mode: str, rng: np.random.Generator | None) -> Node:
    """Inverted dropout: survivors are scaled by 1/(1-rate); eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    factor = x.value.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(x.value.dtype) * factor
    out = x.value * mask

    def rule(g):
        return (g * mask,)

    return Node(out, (x,), rule)


def residual_add(x: Node, branches: Sequence[Node]) -> Node:
    """y = x + sum of branches."""
    out = x.value.copy()
    for br in branches:
        if br.shape != x.shape:
            raise ShapeError(f"residual_add: branch {br.shape} != input {x.shape}")
        out += br.value

    def rule(g):
        return (g,) * (1 + len(branches))

    return Node(out, (x, *branches), rule)


def add(a: Node, b: Node) -> Node:
    return residual_add(a, [b])


def depth_fold(x: Node) -> Node:
    """(B, C, D, H, W) -> (B, C*D, H, W), channel-major then depth."""
    if x.value.ndim != 5:
        raise ShapeError(f"depth_fold expects a 5-axis input, got {x.shape}")
    B, C, D, H, W = x.shape
    out = x.value.reshape(B, C * D, H, W)
    return Node(out, (x,), lambda g: (g.reshape(B, C, D, H, W),))


def flatten(x: Node) -> Node:
    shape = x.shape
    return Node(x.value.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


def scale_node(x: Node, c: float) -> Node:
    c = x.value.dtype.type(c)
    return Node(x.value * c, (x,), lambda g: (g * c,))


def sum_all(x: Node) -> Node:
    shape, dtype = x.shape, x.value.dtype
    return Node(np.asarray(x.value.sum(), dtype=dtype), (x,),
                lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def weighted_sum(x: Node, weights: np.ndarray) -> Node:
    """Scalar sum(x * weights) with constant weights."""
    if weights.shape != x.shape:
        raise ShapeError(f"weighted_sum: {weights.shape} != {x.shape}")
    w = weights.astype(x.value.dtype)
    return Node(np.asarray((x.value * w).sum(), dtype=x.value.dtype), (x,), lambda g: (g * w,))


# ---------------------------------------------------------------- loss


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def check_one_hot(truth: np.ndarray) -> None:
    ok = np.isin(truth, (0, 1)).all(axis=1) & (truth.sum(axis=1) == 1)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise ValueError(f"truth row {bad} is not one-hot: {truth[bad].tolist()}")


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float32) -> np.ndarray:
    """One-hot rows for 0-based class indices."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def softmax_xent(logits: Node, truth: np.ndarray) -> tuple[Node, np.ndarray]:
    """Mean softmax cross-entropy over the minibatch.

    Returns the scalar loss node and the class probabilities.
    """
    zv = logits.value
    if zv.ndim != 2 or truth.shape != zv.shape:
        raise ShapeError(f"softmax_xent: logits {zv.shape} vs truth {truth.shape}")
    check_one_hot(truth)
    batch = zv.shape[0]
    z = zv - zv.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_q = z - log_norm
    probs = np.exp(log_q)
    r = truth.astype(zv.dtype)
    loss = np.asarray(-(r * log_q).sum() / batch, dtype=zv.dtype)

    def rule(g):
        return (g * (probs - r) / zv.dtype.type(batch),)

    return Node(loss, (logits,), rule), probs
