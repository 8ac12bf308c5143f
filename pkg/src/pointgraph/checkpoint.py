"""Binary checkpoints: magic, version, architecture header, then every MLP's dims and float64 weights."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import Architecture, ModelParams
from .nn import MlpParams

MAGIC = b"PGMODEL\0"
VERSION = 1


def _write_mlp(fh, mlp: MlpParams) -> None:
    dims = mlp.dims
    fh.write(struct.pack("<I", len(dims)))
    fh.write(struct.pack(f"<{len(dims)}I", *dims))
    for w, b in zip(mlp.weights, mlp.biases):
        fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def _read_mlp(buf: memoryview, off: int, dtype) -> tuple[MlpParams, int]:
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    dims = struct.unpack_from(f"<{n}I", buf, off)
    off += 4 * n
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(buf, "<f8", d_out * d_in, off).reshape(d_out, d_in)
        off += 8 * d_out * d_in
        b = np.frombuffer(buf, "<f8", d_out, off)
        off += 8 * d_out
        weights.append(w.astype(dtype))
        biases.append(b.astype(dtype))
    return MlpParams(weights, biases), off


def save_checkpoint(model: ModelParams, path: str | os.PathLike, config=None) -> None:
    """Write ``path``; with ``config`` also write ``<path>.json`` holding the ExperimentConfig."""
    header = json.dumps(asdict(model.arch), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        mlps = model.mlps()
        fh.write(struct.pack("<I", len(mlps)))
        for m in mlps:
            _write_mlp(fh, m)
    if config is not None:
        config.save(str(path) + ".json")


def load_checkpoint(path: str | os.PathLike, dtype=np.float64) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a pointgraph checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    arch = Architecture(**json.loads(raw[16:16 + hlen]))
    buf = memoryview(raw)
    off = 16 + hlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    mlps = []
    for _ in range(count):
        m, off = _read_mlp(buf, off, dtype)
        mlps.append(m)
    T = arch.T
    F, H, E, G, P = mlps[0], mlps[1:1 + T], mlps[1 + T:1 + 2 * T], mlps[1 + 2 * T], mlps[2 + 2 * T]
    skip = mlps[3 + 2 * T] if len(mlps) > 3 + 2 * T else None
    return ModelParams(arch, F, list(H), list(E), G, P, skip)


def load_checkpoint_config(path: str | os.PathLike):
    from .config import ExperimentConfig

    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing config sidecar {sidecar}")
    return ExperimentConfig.load(sidecar)
