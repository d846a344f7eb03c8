"""MixedSN: 3D ResNeXt stages feeding 2D ResNeXt stages and a dense head.

Layer order (IP profile, full widths)::

    stem     conv3d 3x3x7, 1 -> 8, ReLU
    pool1    max3d 2x2x2, stride 1
    up1      conv3d 1x1x1, 8 -> 16, ReLU
    block1   3D ResNeXt, width 16, 4 paths of (1x1x1 -> 4, 3x3x5 -> 16)
    pool2    max3d 2x2x2, stride (depth 2, height 1, width 1)
    up2      conv3d 1x1x1, 16 -> 32, ReLU
    block2   3D ResNeXt, width 32, 4 paths of (1x1x1 -> 8, 3x3x3 -> 32)
    pool3    max3d 2x2x2, stride (2, 1, 1)
    fold     (C, D, H, W) -> (C*D, H, W)
    down1    conv2d 1x1, C*D -> 64, ReLU
    block3   2D ResNeXt, width 64, 4 paths of (1x1 -> 16, 3x3 -> 64)
    pool4    max2d 2x2, stride 2
    block4   same as block3
    pool5    max2d 2x2, stride 2
    down2    conv2d 1x1, 64 -> 32, ReLU
    flatten
    fc1      dense -> 192, ReLU, dropout
    fc2      dense -> 128, ReLU, dropout
    fc3      dense -> L (logits)

Every convolution is followed by ReLU, including the last conv of each
ResNeXt path; the residual sum itself is not rectified.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import ops
from .autodiff import Node, leaf
from .ops import Conv2dSpec, Conv3dSpec, PoolSpec
from .tensor import ShapeError, make_rng


class NumericError(ArithmeticError):
    """Raised when an activation or loss becomes non-finite."""


class ShapeTraceError(ShapeError):
    """Raised when a layer would produce an extent below 1."""


PUBLISHED_IP_PARAMETERS = 332_864

# profile -> (bands after PCA, classes, dropout)
PROFILES = {
    "ip": (30, 16, 0.40),
    "pu": (15, 9, 0.40),
    "sa": (15, 16, 0.40),
    "bw": (13, 14, 0.45),
}

WIDTH_SCALES = {"full": 1.0, "halved": 0.5, "quartered": 0.25}

STEM_KERNEL = (3, 3, 7)


@dataclass(frozen=True)
class Widths:
    stem: int = 8
    up1: int = 16
    bottleneck1: int = 4
    up2: int = 32
    bottleneck2: int = 8
    down1: int = 64
    bottleneck2d: int = 16
    down2: int = 32
    fc1: int = 192
    fc2: int = 128

    def scaled(self, factor: float) -> "Widths":
        return Widths(**{k: max(1, int(round(v * factor))) for k, v in asdict(self).items()})


@dataclass(frozen=True)
class ResNeXtBlockSpec:
    dims: int  # 3 or 2
    cardinality: int
    width: int
    bottleneck: int
    kernel: tuple[int, ...]  # (h, w, depth) for 3D, (h, w) for 2D

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError("block dims must be 2 or 3")
        if self.cardinality < 1:
            raise ValueError("cardinality must be at least 1")
        if len(self.kernel) != self.dims:
            raise ValueError(f"{self.dims}D block needs a {self.dims}-entry kernel")

    def path_convs(self) -> tuple:
        """(reduce, expand) conv specs of a single path."""
        if self.dims == 3:
            return (Conv3dSpec(self.width, self.bottleneck, (1, 1, 1)),
                    Conv3dSpec(self.bottleneck, self.width, tuple(self.kernel)))
        return (Conv2dSpec(self.width, self.bottleneck, (1, 1)),
                Conv2dSpec(self.bottleneck, self.width, tuple(self.kernel)))

    @property
    def n_params(self) -> int:
        return self.cardinality * sum(c.n_params for c in self.path_convs())


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # conv3d, conv2d, pool, block, fold, flatten, dense
    spec: object = None
    relu: bool = False
    dropout: float = 0.0


@dataclass
class NetworkSpec:
    profile: str
    n_classes: int
    bands: int
    window: int
    widths: Widths
    cardinality: int
    dropout: float
    layers: list[Layer] = field(default_factory=list)

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        return (1, self.bands, self.window, self.window)

    @property
    def pools(self) -> list[PoolSpec]:
        return [l.spec for l in self.layers if l.kind == "pool"]

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "n_classes": self.n_classes,
            "bands": self.bands,
            "window": self.window,
            "widths": asdict(self.widths),
            "cardinality": self.cardinality,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        net, _ = build_mixedsn(
            d["profile"], n_classes=d["n_classes"], bands=d["bands"], window=d["window"],
            widths=Widths(**d["widths"]), cardinality=d["cardinality"], dropout=d["dropout"],
            init=False,
        )
        return net


class ParamStore:
    """Ordered, uniquely named parameter tensors.

    Iteration follows layer order; within a layer, each path's reduce conv
    precedes its expand conv, and weight precedes bias.
    """

    def __init__(self, items=()):
        self._data: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, value in items:
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._data:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._data[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._data:
            raise KeyError(name)
        if value.shape != self._data[name].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self._data[name].shape}")
        self._data[name] = value

    def __contains__(self, name) -> bool:
        return name in self._data

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def items(self):
        return self._data.items()

    def names(self) -> list[str]:
        return list(self._data)

    def copy(self) -> "ParamStore":
        return ParamStore((k, v.copy()) for k, v in self._data.items())

    def astype(self, dtype) -> "ParamStore":
        return ParamStore((k, v.astype(dtype)) for k, v in self._data.items())

    @property
    def total(self) -> int:
        return sum(v.size for v in self._data.values())


def _layer_params(layer: Layer) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) of every parameter a layer owns."""
    out = []
    if layer.kind in ("conv3d", "conv2d"):
        s = layer.spec
        fan_in = math.prod(s.weight_shape[1:])
        out += [(f"{layer.name}.weight", s.weight_shape, fan_in),
                (f"{layer.name}.bias", (s.out_channels,), fan_in)]
    elif layer.kind == "block":
        s: ResNeXtBlockSpec = layer.spec
        for i in range(s.cardinality):
            for part, conv in zip(("reduce", "expand"), s.path_convs()):
                fan_in = math.prod(conv.weight_shape[1:])
                prefix = f"{layer.name}.path{i}.{part}"
                out += [(f"{prefix}.weight", conv.weight_shape, fan_in),
                        (f"{prefix}.bias", (conv.out_channels,), fan_in)]
    elif layer.kind == "dense":
        n_in, n_out = layer.spec
        out += [(f"{layer.name}.weight", (n_out, n_in), n_in),
                (f"{layer.name}.bias", (n_out,), n_in)]
    return out


def init_params(net: NetworkSpec, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Zero-mean normal weights with std sqrt(1 / fan_in), zero biases.

    The last conv of every ResNeXt path is drawn 1/cardinality smaller so
    the summed branches start at roughly the scale of one path.  With the
    ReLU gain of sqrt(2) the un-normalized residual stack (rectified
    branches plus max pooling) inflates activations layer after layer and
    the narrow 1x1 layers die within the first epoch.
    """
    rng = make_rng(seed)
    store = ParamStore()
    for layer in net.layers:
        for name, shape, fan_in in _layer_params(layer):
            if name.endswith(".bias"):
                store.add(name, np.zeros(shape, dtype=dtype))
            else:
                std = math.sqrt(1.0 / fan_in)
                if name.endswith(".expand.weight"):
                    std /= net.cardinality
                store.add(name, (rng.standard_normal(shape) * std).astype(dtype))
    return store


def zero_params(net: NetworkSpec, dtype=np.float32) -> ParamStore:
    store = ParamStore()
    for layer in net.layers:
        for name, shape, _ in _layer_params(layer):
            store.add(name, np.zeros(shape, dtype=dtype))
    return store


def _layer_out_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    if layer.kind in ("conv3d", "conv2d"):
        s = layer.spec
        nd = 3 if layer.kind == "conv3d" else 2
        if len(shape) != nd + 1 or shape[0] != s.in_channels:
            raise ShapeTraceError(f"{layer.name}: input {shape} does not fit {s}")
        ext = tuple(n + lo + hi - k + 1 for n, k, (lo, hi) in zip(shape[1:], s.tensor_kernel, s.pad))
        return (s.out_channels, *ext)
    if layer.kind == "pool":
        return (shape[0], *layer.spec.output_extents(shape[1:]))
    if layer.kind == "block":
        s = layer.spec
        if shape[0] != s.width or len(shape) != s.dims + 1:
            raise ShapeTraceError(f"{layer.name}: input {shape} does not fit width {s.width}")
        return shape
    if layer.kind == "fold":
        c, d, h, w = shape
        return (c * d, h, w)
    if layer.kind == "flatten":
        return (math.prod(shape),)
    if layer.kind == "dense":
        n_in, n_out = layer.spec
        if shape != (n_in,):
            raise ShapeTraceError(f"{layer.name}: input {shape} != ({n_in},)")
        return (n_out,)
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def shape_trace(net: NetworkSpec, input_shape: tuple[int, ...] | None = None) -> list[dict]:
    """Per-layer output shapes (without batch axis).

    Raises ``ShapeTraceError`` naming the first layer whose output has an
    extent below 1.
    """
    shape = tuple(input_shape or net.input_shape)
    rows = [{"layer": "input", "kind": "input", "shape": shape, "reduces": False}]
    for layer in net.layers:
        new = _layer_out_shape(layer, shape)
        if min(new) < 1:
            raise ShapeTraceError(
                f"layer {layer.name!r} ({layer.kind}) maps {shape} to {new}: "
                f"window too small for the pooling schedule"
            )
        rows.append({"layer": layer.name, "kind": layer.kind, "shape": new,
                     "reduces": layer.kind == "pool" and new != shape})
        shape = new
    return rows


def _assemble(widths: Widths, bands: int, window: int, n_classes: int,
              cardinality: int, dropout: float) -> list[Layer]:
    w = widths
    pool_s1 = PoolSpec("max3d", (2, 2, 2), (1, 1, 1))
    # spectral depth halves, spatial extents kept
    pool_spec = PoolSpec("max3d", (2, 2, 2), (2, 1, 1))
    pool_2d = PoolSpec("max2d", (2, 2), (2, 2))
    head = [
        Layer("stem", "conv3d", Conv3dSpec(1, w.stem, STEM_KERNEL), relu=True),
        Layer("pool1", "pool", pool_s1),
        Layer("up1", "conv3d", Conv3dSpec(w.stem, w.up1, (1, 1, 1)), relu=True),
        Layer("block1", "block", ResNeXtBlockSpec(3, cardinality, w.up1, w.bottleneck1, (3, 3, 5))),
        Layer("pool2", "pool", pool_spec),
        Layer("up2", "conv3d", Conv3dSpec(w.up1, w.up2, (1, 1, 1)), relu=True),
        Layer("block2", "block", ResNeXtBlockSpec(3, cardinality, w.up2, w.bottleneck2, (3, 3, 3))),
        Layer("pool3", "pool", pool_spec),
        Layer("fold", "fold"),
    ]
    # The fold's channel count depends on the depth left after pool3.
    shape = (1, bands, window, window)
    for layer in head:
        shape = _layer_out_shape(layer, shape)
    folded = shape[0]
    block2d = ResNeXtBlockSpec(2, cardinality, w.down1, w.bottleneck2d, (3, 3))
    tail = [
        Layer("down1", "conv2d", Conv2dSpec(folded, w.down1, (1, 1)), relu=True),
        Layer("block3", "block", block2d),
        Layer("pool4", "pool", pool_2d),
        Layer("block4", "block", block2d),
        Layer("pool5", "pool", pool_2d),
        Layer("down2", "conv2d", Conv2dSpec(w.down1, w.down2, (1, 1)), relu=True),
        Layer("flatten", "flatten"),
    ]
    for layer in tail:
        shape = _layer_out_shape(layer, shape)
    flat = shape[0]
    dense = [
        Layer("fc1", "dense", (flat, w.fc1), relu=True, dropout=dropout),
        Layer("fc2", "dense", (w.fc1, w.fc2), relu=True, dropout=dropout),
        Layer("fc3", "dense", (w.fc2, n_classes)),
    ]
    return head + tail + dense


def build_mixedsn(
    profile: str = "ip",
    n_classes: int | None = None,
    bands: int | None = None,
    window: int = 25,
    widths: Widths | None = None,
    width_scale: float = 1.0,
    cardinality: int = 4,
    dropout: float | None = None,
    seed: int = 0,
    dtype=np.float32,
    init: bool = True,
) -> tuple[NetworkSpec, ParamStore | None]:
    """Build a MixedSN network and (optionally) its initial parameters.

    Presets ``ip``, ``pu``, ``sa`` and ``bw`` fix the band count, class
    count and dropout; any of them can be overridden.  ``custom`` requires
    ``n_classes`` and ``bands``.
    """
    profile = profile.lower()
    if profile in PROFILES:
        p_bands, p_classes, p_drop = PROFILES[profile]
        bands = p_bands if bands is None else bands
        n_classes = p_classes if n_classes is None else n_classes
        dropout = p_drop if dropout is None else dropout
    elif profile == "custom":
        if n_classes is None or bands is None:
            raise ValueError("custom profile needs n_classes and bands")
        dropout = 0.40 if dropout is None else dropout
    else:
        raise ValueError(f"unknown profile {profile!r}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd number, got {window}")
    if bands < STEM_KERNEL[2]:
        raise ValueError(f"need at least {STEM_KERNEL[2]} bands for the 3x3x7 stem, got {bands}")
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if not 0.0 <= dropout < 1.0:
        raise ValueError(f"dropout must lie in [0, 1), got {dropout}")
    widths = (widths or Widths()).scaled(width_scale) if width_scale != 1.0 else (widths or Widths())

    layers = _assemble(widths, bands, window, n_classes, cardinality, dropout)
    net = NetworkSpec(profile, n_classes, bands, window, widths, cardinality, dropout, layers)
    shape_trace(net)
    params = init_params(net, seed, dtype) if init else None
    return net, params


def tiny_network(n_classes: int, bands: int = 8, window: int = 9, dropout: float = 0.4,
                 seed: int = 0, dtype=np.float32, width_scale: float = 0.25):
    """Small custom profile (T=8, S=9) for gradient checks and fast tests.

    Quarter widths are the default; desk-scale training uses ``width_scale=0.5``
    because the quarter-width head is narrow enough to lose a class outright.
    """
    return build_mixedsn("custom", n_classes=n_classes, bands=bands, window=window,
                         width_scale=width_scale, dropout=dropout, seed=seed, dtype=dtype)


def count_parameters(params: ParamStore, net: NetworkSpec | None = None) -> tuple[int, list[dict]]:
    """Total parameter count and a per-layer table (layer, tensors, count)."""
    rows: OrderedDict[str, dict] = OrderedDict()
    for name, value in params.items():
        layer = name.split(".", 1)[0]
        row = rows.setdefault(layer, {"layer": layer, "tensors": 0, "count": 0})
        row["tensors"] += 1
        row["count"] += int(value.size)
    table = list(rows.values())
    if net is not None:
        shapes = {r["layer"]: r["shape"] for r in shape_trace(net)}
        for row in table:
            row["output"] = shapes.get(row["layer"])
    return sum(r["count"] for r in table), table


# ---------------------------------------------------------------- execution


def _check_finite(node: Node, where: str) -> Node:
    if not np.isfinite(node.value).all():
        raise NumericError(f"non-finite activation after {where}")
    return node


def _block_forward(x: Node, layer: Layer, nodes: dict) -> Node:
    s: ResNeXtBlockSpec = layer.spec
    conv = ops.conv3d if s.dims == 3 else ops.conv2d
    reduce_spec, expand_spec = s.path_convs()
    branches = []
    for i in range(s.cardinality):
        p = f"{layer.name}.path{i}"
        h = ops.relu(conv(x, nodes[f"{p}.reduce.weight"], nodes[f"{p}.reduce.bias"], reduce_spec))
        h = ops.relu(conv(h, nodes[f"{p}.expand.weight"], nodes[f"{p}.expand.bias"], expand_spec))
        branches.append(h)
    return ops.residual_add(x, branches)


def forward_graph(
    net: NetworkSpec,
    params: ParamStore,
    batch: np.ndarray | Node,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    requires_grad: bool = False,
) -> tuple[Node, dict[str, Node]]:
    """Run the network, returning the logits node and the parameter leaves."""
    x = batch if isinstance(batch, Node) else leaf(batch)
    expected = net.input_shape
    if x.value.ndim != 5 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"batch shape {x.shape} does not match (B, {', '.join(map(str, expected))})")
    nodes = {name: leaf(v, requires_grad=requires_grad, name=name) for name, v in params.items()}
    for layer in net.layers:
        if layer.kind == "conv3d":
            x = ops.conv3d(x, nodes[f"{layer.name}.weight"], nodes[f"{layer.name}.bias"], layer.spec)
        elif layer.kind == "conv2d":
            x = ops.conv2d(x, nodes[f"{layer.name}.weight"], nodes[f"{layer.name}.bias"], layer.spec)
        elif layer.kind == "pool":
            pool = ops.maxpool3d if layer.spec.kind == "max3d" else ops.maxpool2d
            x = pool(x, layer.spec)
        elif layer.kind == "block":
            x = _block_forward(x, layer, nodes)
        elif layer.kind == "fold":
            x = ops.depth_fold(x)
        elif layer.kind == "flatten":
            x = ops.flatten(x)
        elif layer.kind == "dense":
            x = ops.linear(x, nodes[f"{layer.name}.weight"], nodes[f"{layer.name}.bias"])
        if layer.relu:
            x = ops.relu(x)
        if layer.dropout:
            x = ops.dropout(x, layer.dropout, mode, rng)
        _check_finite(x, layer.name)
    return x, nodes


def forward(net: NetworkSpec, params: ParamStore, batch: np.ndarray, mode: str = "eval",
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Logits (B, L) for a batch of (B, 1, T, S, S) patches."""
    logits, _ = forward_graph(net, params, batch, mode, rng)
    return logits.value


def predict_proba(net: NetworkSpec, params: ParamStore, batch: np.ndarray) -> np.ndarray:
    return ops.softmax(forward(net, params, batch))


def with_dropout(net: NetworkSpec, rate: float) -> NetworkSpec:
    """Copy of ``net`` with both hidden dense layers using ``rate``."""
    layers = [replace(l, dropout=rate) if l.dropout or l.name in ("fc1", "fc2") else l
              for l in net.layers]
    return replace(net, dropout=rate, layers=layers)
