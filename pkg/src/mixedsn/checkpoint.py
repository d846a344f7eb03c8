"""Checkpoint container: JSON manifest followed by raw parameter bytes.

Layout::

    b"MXSNCKPT"                 8-byte magic
    uint64 little-endian        manifest length in bytes
    manifest                    UTF-8 JSON
    payload                     parameters in manifest order, little-endian,
                                row-major, no padding

The manifest holds ``format_version``, ``network`` (the NetworkSpec
build arguments), ``params`` (name, shape, dtype per entry), ``seed`` and an
optional free-form ``extra`` dict.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .network import NetworkSpec, ParamStore, zero_params

MAGIC = b"MXSNCKPT"
FORMAT_VERSION = 1
_DTYPES = {"f32le": "<f4", "f64le": "<f8"}
_NAMES = {np.dtype("<f4"): "f32le", np.dtype("<f8"): "f64le"}


class CheckpointError(ValueError):
    pass


def encode(net: NetworkSpec, params: ParamStore, seed: int, extra: dict | None = None) -> bytes:
    entries, chunks = [], []
    for name, value in params.items():
        dt = np.dtype(value.dtype).newbyteorder("<")
        if dt not in _NAMES:
            raise CheckpointError(f"{name}: unsupported dtype {value.dtype}")
        entries.append({"name": name, "shape": list(value.shape), "dtype": _NAMES[dt]})
        chunks.append(np.ascontiguousarray(value, dtype=dt).tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "network": net.to_dict(),
        "params": entries,
        "seed": int(seed),
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def decode(data: bytes) -> tuple[NetworkSpec, ParamStore, dict]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a MixedSN checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16 : 16 + n].decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    offset = 16 + n
    params = ParamStore()
    for entry in manifest["params"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + size > len(data):
            raise CheckpointError(f"checkpoint truncated inside {entry['name']!r}")
        arr = np.frombuffer(data, dtype=dt, count=size // dt.itemsize, offset=offset)
        params.add(entry["name"], arr.reshape(shape).astype(dt.newbyteorder("="), copy=True))
        offset += size
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after parameters")
    net = NetworkSpec.from_dict(manifest["network"])
    expected = _expected_shapes(net)
    got = {name: v.shape for name, v in params.items()}
    if expected != got:
        raise CheckpointError("checkpoint parameters do not match the network layout")
    return net, params, manifest


def _expected_shapes(net: NetworkSpec) -> dict:
    return {name: v.shape for name, v in zero_params(net).items()}


def save(path: str | Path, net: NetworkSpec, params: ParamStore, seed: int,
         extra: dict | None = None) -> None:
    Path(path).write_bytes(encode(net, params, seed, extra))


def load(path: str | Path) -> tuple[NetworkSpec, ParamStore, dict]:
    return decode(Path(path).read_bytes())
