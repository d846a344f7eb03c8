"""HSC dataset container, synthetic scenes and PPM class maps.

An HSC dataset is three files:

* ``<stem>.json`` manifest::

      {"magic": "HSC1", "width": Q, "height": P, "bands": B,
       "dtype": "f32le", "layout": "BSQ", "classes": [...], "nodata_label": 0,
       "cube_file": "<stem>.bsq", "label_file": "<stem>.lbl"}

* ``<stem>.bsq`` little-endian float32, band-sequential: all of band 0 in
  row-major order, then band 1, and so on (4 * P * Q * B bytes).
* ``<stem>.lbl`` little-endian uint16 labels, row-major, 0 = unlabeled
  (2 * P * Q bytes).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .preprocess import HsiCube, LabelMap
from .tensor import make_rng

MAGIC = "HSC1"


class HscError(ValueError):
    pass


class MagicMismatch(HscError):
    pass


class LengthMismatch(HscError):
    pass


class UnknownFormat(HscError):
    pass


class LabelRangeError(HscError):
    pass


@dataclass(frozen=True)
class HscPaths:
    manifest: Path
    cube: Path
    labels: Path

    @classmethod
    def for_stem(cls, stem: str | Path) -> "HscPaths":
        stem = Path(stem)
        return cls(stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bsq"),
                   stem.with_name(stem.name + ".lbl"))

    @classmethod
    def from_manifest(cls, manifest: str | Path) -> "HscPaths":
        manifest = Path(manifest)
        meta = json.loads(manifest.read_text())
        base = manifest.parent
        stem = manifest.name[:-5] if manifest.name.endswith(".json") else manifest.name
        return cls(manifest, base / meta.get("cube_file", stem + ".bsq"),
                   base / meta.get("label_file", stem + ".lbl"))

    @classmethod
    def from_cube(cls, cube: str | Path, labels: str | Path | None = None,
                  manifest: str | Path | None = None) -> "HscPaths":
        cube = Path(cube)
        manifest = Path(manifest) if manifest else cube.with_suffix(".json")
        labels = Path(labels) if labels else cube.with_suffix(".lbl")
        return cls(manifest, cube, labels)


def write_hsc(cube: HsiCube, labels: LabelMap, paths: HscPaths | str | Path) -> HscPaths:
    if not isinstance(paths, HscPaths):
        paths = HscPaths.for_stem(paths)
    P, Q, B = cube.shape
    if labels.ids.shape != (P, Q):
        raise HscError(f"label map {labels.ids.shape} does not match cube {(P, Q)}")
    if labels.ids.max(initial=0) > len(labels.class_names) or labels.ids.max(initial=0) > 65535:
        raise LabelRangeError("label id exceeds declared class count")
    manifest = {
        "magic": MAGIC, "width": Q, "height": P, "bands": B, "dtype": "f32le", "layout": "BSQ",
        "classes": list(labels.class_names), "nodata_label": 0,
        "cube_file": paths.cube.name, "label_file": paths.labels.name,
    }
    paths.manifest.write_text(json.dumps(manifest, indent=2) + "\n")
    bsq = np.ascontiguousarray(np.moveaxis(cube.values, 2, 0), dtype="<f4")
    paths.cube.write_bytes(bsq.tobytes())
    paths.labels.write_bytes(np.ascontiguousarray(labels.ids, dtype="<u2").tobytes())
    return paths


def read_manifest(path: str | Path) -> dict:
    meta = json.loads(Path(path).read_text())
    if meta.get("magic") != MAGIC:
        raise MagicMismatch(f"{path}: magic {meta.get('magic')!r} != {MAGIC!r}")
    if meta.get("dtype") != "f32le":
        raise UnknownFormat(f"{path}: unsupported dtype {meta.get('dtype')!r}")
    if meta.get("layout") != "BSQ":
        raise UnknownFormat(f"{path}: unsupported layout {meta.get('layout')!r}")
    for key in ("width", "height", "bands"):
        if not isinstance(meta.get(key), int) or meta[key] < 1:
            raise HscError(f"{path}: {key} must be a positive integer")
    return meta


def read_hsc(paths: HscPaths | str | Path) -> tuple[HsiCube, LabelMap]:
    if not isinstance(paths, HscPaths):
        paths = HscPaths.from_manifest(paths)
    meta = read_manifest(paths.manifest)
    P, Q, B = meta["height"], meta["width"], meta["bands"]
    raw = paths.cube.read_bytes()
    if len(raw) != 4 * P * Q * B:
        raise LengthMismatch(f"{paths.cube}: expected {4 * P * Q * B} bytes, found {len(raw)}")
    lab = paths.labels.read_bytes()
    if len(lab) != 2 * P * Q:
        raise LengthMismatch(f"{paths.labels}: expected {2 * P * Q} bytes, found {len(lab)}")
    values = np.frombuffer(raw, dtype="<f4").reshape(B, P, Q)
    ids = np.frombuffer(lab, dtype="<u2").reshape(P, Q)
    classes = list(meta.get("classes", []))
    if ids.max(initial=0) > len(classes):
        raise LabelRangeError(
            f"{paths.labels}: label id {int(ids.max())} exceeds class count {len(classes)}")
    cube = HsiCube(np.ascontiguousarray(np.moveaxis(values, 0, 2), dtype=np.float32))
    return cube, LabelMap(ids.astype(np.int64), classes)


# ---------------------------------------------------------------- synthetic scenes


@dataclass(frozen=True)
class SyntheticSceneSpec:
    height: int = 32
    width: int = 32
    bands: int = 8
    n_classes: int = 4
    blobs_per_class: int = 2
    noise_std: float = 0.05
    mixing: float = 0.15         # spectral mix weight for pixels on blob borders
    unlabeled_fraction: float = 0.2
    min_separation: float = 0.5  # floor on pairwise L2 distance of class spectra

    def validate(self) -> None:
        if min(self.height, self.width, self.bands) < 1 or self.n_classes < 1:
            raise ValueError("extents, bands and class count must be positive")
        if self.n_classes * self.blobs_per_class * 4 > self.height * self.width:
            raise ValueError(
                f"infeasible layout: {self.n_classes} classes x {self.blobs_per_class} blobs "
                f"do not fit a {self.height}x{self.width} grid")
        if not 0.0 <= self.unlabeled_fraction <= 0.5:
            raise ValueError("unlabeled fraction must lie in [0, 0.5]")


def class_spectra(spec: SyntheticSceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Smooth random reflectance curves, one row per class."""
    t = np.linspace(0.0, 1.0, spec.bands)
    for _ in range(1000):
        curves = np.full((spec.n_classes, spec.bands), 0.5)
        for _k in range(3):
            amp = rng.uniform(0.1, 0.4, size=(spec.n_classes, 1))
            centre = rng.uniform(0.0, 1.0, size=(spec.n_classes, 1))
            width = rng.uniform(0.15, 0.4, size=(spec.n_classes, 1))
            sign = rng.choice([-1.0, 1.0], size=(spec.n_classes, 1))
            curves += sign * amp * np.exp(-0.5 * ((t - centre) / width) ** 2)
        d = np.linalg.norm(curves[:, None] - curves[None], axis=-1)
        if spec.n_classes < 2 or d[np.triu_indices(spec.n_classes, 1)].min() >= spec.min_separation:
            return curves
    raise ValueError("could not draw class spectra above the separation floor")


def synth_scene(spec: SyntheticSceneSpec, seed: int = 0) -> tuple[HsiCube, LabelMap]:
    """Voronoi blob scene with per-class spectra, border mixing and noise.

    Each class owns ``blobs_per_class`` blobs.  Pixels farthest from any
    blob centre (``unlabeled_fraction`` of the image) are left unlabeled and
    carry a flat background spectrum.
    """
    spec.validate()
    rng = make_rng(seed)
    spectra = class_spectra(spec, rng)
    P, Q = spec.height, spec.width
    n_blobs = spec.n_classes * spec.blobs_per_class
    flat_centres = rng.choice(P * Q, size=n_blobs, replace=False)
    centres = np.stack(np.unravel_index(flat_centres, (P, Q)), axis=1).astype(np.float64)
    blob_class = np.concatenate([np.arange(1, spec.n_classes + 1)] * spec.blobs_per_class)
    rr, cc = np.mgrid[0:P, 0:Q]
    grid = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    dist = np.linalg.norm(grid[:, None, :] - centres[None], axis=-1)
    order = np.argsort(dist, axis=1, kind="stable")
    nearest = order[:, 0]
    d1 = dist[np.arange(grid.shape[0]), nearest]
    labels = blob_class[nearest]
    values = spectra[labels - 1].copy()
    if n_blobs > 1:
        second = order[:, 1]
        d2 = dist[np.arange(grid.shape[0]), second]
        other = blob_class[second]
        border = (d2 - d1 < 1.0) & (other != labels)
        values[border] = (1 - spec.mixing) * values[border] + spec.mixing * spectra[other[border] - 1]
    n_unlabeled = int(math.floor(spec.unlabeled_fraction * P * Q))
    if n_unlabeled:
        far = np.argsort(-d1, kind="stable")[:n_unlabeled]
        far = far[d1[far] > 0]
        labels[far] = 0
        values[far] = 0.5
    values = values + rng.standard_normal(values.shape) * spec.noise_std
    cube = HsiCube(values.reshape(P, Q, spec.bands).astype(np.float32))
    names = [f"class_{k}" for k in range(1, spec.n_classes + 1)]
    return cube, LabelMap(labels.reshape(P, Q).astype(np.int64), names)


# ---------------------------------------------------------------- class maps


def palette_color(k: int, n_classes: int) -> tuple[int, int, int]:
    """Class 0 is black; class k gets hue 360 (k - 1) / L at full s and v."""
    if k == 0:
        return (0, 0, 0)
    h = 360.0 * (k - 1) / n_classes
    hp = h / 60.0
    x = 1.0 - abs(hp % 2.0 - 1.0)
    sector = int(hp) % 6
    r, g, b = [(1, x, 0), (x, 1, 0), (0, 1, x), (0, x, 1), (x, 0, 1), (1, 0, x)][sector]
    return tuple(int(math.floor(c * 255 + 0.5)) for c in (r, g, b))


def write_class_map(pred: np.ndarray, n_classes: int, path: str | Path) -> int:
    """Write a binary PPM (P6) of class ids; returns the byte count."""
    pred = np.asarray(pred)
    if pred.ndim != 2:
        raise ValueError(f"prediction grid must be 2-D, got {pred.shape}")
    if pred.size and (pred.min() < 0 or pred.max() > n_classes):
        raise ValueError(f"prediction ids must lie in 0..{n_classes}")
    lut = np.array([palette_color(k, n_classes) for k in range(n_classes + 1)], dtype=np.uint8)
    P, Q = pred.shape
    header = f"P6\n{Q} {P}\n255\n".encode("ascii")
    data = header + lut[pred.astype(np.int64)].tobytes()
    Path(path).write_bytes(data)
    return len(data)


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
