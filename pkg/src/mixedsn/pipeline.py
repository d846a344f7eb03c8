"""End-to-end glue: cube -> PCA -> patches -> split -> train -> evaluate."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .metrics import MetricsReport
from .network import NetworkSpec, ParamStore, WIDTH_SCALES, build_mixedsn
from .preprocess import (HsiCube, LabelMap, PatchSet, ReducedCube, SplitPlan, extract_patches,
                         pca_reduce, standardize, stratified_split)
from .trainer import TrainConfig, evaluate, train


@dataclass
class RunOptions:
    profile: str = "ip"
    bands: int | None = None
    window: int = 25
    widths: str = "full"
    train_frac: float = 0.30
    seed: int = 0
    epochs: int = 100
    batch: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-6
    dropout: float | None = None
    pad_mode: str = "border"
    rounding: str = "largest-remainder"
    deterministic: bool = True

    def width_scale(self) -> float:
        if self.widths in WIDTH_SCALES:
            return WIDTH_SCALES[self.widths]
        return float(self.widths)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Prepared:
    reduced: ReducedCube
    patches: PatchSet
    split: SplitPlan
    class_names: list[str]


def resolve_bands(opts: RunOptions, cube: HsiCube) -> int:
    from .network import PROFILES

    if opts.bands is not None:
        bands = opts.bands
    elif opts.profile in PROFILES:
        bands = PROFILES[opts.profile][0]
    else:
        bands = cube.bands
    if bands > cube.bands:
        raise ValueError(f"cannot keep {bands} PCA bands from a {cube.bands}-band cube")
    return bands


def prepare(cube: HsiCube, labels: LabelMap, opts: RunOptions) -> Prepared:
    bands = resolve_bands(opts, cube)
    reduced = pca_reduce(cube, bands)
    patches = extract_patches(reduced, labels, opts.window, opts.pad_mode)
    if len(patches) == 0:
        raise ValueError("no labeled patch centres in the scene")
    split = stratified_split(patches.labels, opts.train_frac, opts.seed, opts.rounding,
                             n_classes=labels.n_classes)
    patches = standardize(patches, split.train_indices)
    return Prepared(reduced, patches, split, list(labels.class_names))


def build_network(opts: RunOptions, n_classes: int, bands: int) -> tuple[NetworkSpec, ParamStore]:
    return build_mixedsn(opts.profile, n_classes=n_classes, bands=bands, window=opts.window,
                         width_scale=opts.width_scale(), dropout=opts.dropout, seed=opts.seed)


def train_config(opts: RunOptions) -> TrainConfig:
    return TrainConfig(epochs=opts.epochs, batch_size=opts.batch, seed=opts.seed, lr=opts.lr,
                       weight_decay=opts.weight_decay, deterministic=opts.deterministic)


def run(cube: HsiCube, labels: LabelMap, opts: RunOptions, with_test_curve: bool = False):
    """Train once and evaluate on the held-out split.

    Returns (prepared data, network, params, history, test report, test confusion).
    """
    prep = prepare(cube, labels, opts)
    net, params = build_network(opts, labels.n_classes, prep.reduced.bands)
    test_idx = prep.split.test_indices if with_test_curve else None
    params, history = train(net, params, prep.patches, prep.split.train_indices,
                            train_config(opts), test_idx=test_idx)
    _, cm = evaluate(net, params, prep.patches, prep.split.test_indices)
    return prep, net, params, history, MetricsReport.from_confusion(cm), cm


def preprocessing_record(prep: Prepared, opts: RunOptions) -> dict:
    """JSON-safe record needed to rebuild patches and the split later."""
    p = prep.patches
    return {
        "options": opts.to_dict(),
        "class_names": prep.class_names,
        "pca_components": prep.reduced.components.tolist(),
        "pca_means": prep.reduced.means.tolist(),
        "retained_variance": prep.reduced.retained_variance,
        "band_mean": p.band_mean.tolist(),
        "band_std": p.band_std.tolist(),
    }


def patches_from_record(cube: HsiCube, labels: LabelMap, record: dict,
                        include_unlabeled: bool = False) -> PatchSet:
    """Re-cut standardized patches using stored PCA and band statistics."""
    opts = RunOptions(**record["options"])
    comps = np.asarray(record["pca_components"], dtype=np.float64)
    means = np.asarray(record["pca_means"], dtype=np.float64)
    if comps.shape[0] != cube.bands:
        raise ValueError(f"checkpoint expects {comps.shape[0]} input bands, cube has {cube.bands}")
    P, Q, B = cube.shape
    values = ((cube.values.reshape(-1, B).astype(np.float64) - means) @ comps).reshape(P, Q, -1)
    patches = extract_patches(values, labels, opts.window, opts.pad_mode, include_unlabeled)
    mean = np.asarray(record["band_mean"])
    std = np.asarray(record["band_std"])
    scale = np.where(std > 1e-12, std, 1.0)
    source = ((patches.source - mean[:, None, None]) / scale[:, None, None]).astype(np.float32)
    patches.source = source
    patches.band_mean, patches.band_std = mean, std
    return patches
