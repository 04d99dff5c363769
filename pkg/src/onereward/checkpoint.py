"""Binary checkpoints for generator and reward-model parameters.

Layout: magic ``ORWD``, a little-endian u32 format version, a u32 length and
that many bytes of UTF-8 JSON metadata, then the parameters as little-endian
float64. The metadata carries the layer shapes, so a file can be validated
without knowing what wrote it.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .numcore import ParamVector, param_count
from .rewardmodel import NetSpec, RewardNet

MAGIC = b"ORWD"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _atomic_write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(blob)
        f.flush()
        os.fsync(f.fileno())
    tmp.replace(path)


def encode(params: ParamVector, meta: dict) -> bytes:
    meta = dict(meta, shape_spec=[list(s) for s in params.shape_spec])
    head = json.dumps(meta, sort_keys=True).encode()
    payload = np.ascontiguousarray(params.values, dtype="<f8").tobytes()
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + payload


def decode(blob: bytes, source: str = "<bytes>") -> tuple[ParamVector, dict]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    if len(blob) < 12:
        raise CheckpointError(f"{source}: truncated header")
    version, n_head = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: format version {version}, expected {FORMAT_VERSION}")
    try:
        meta = json.loads(blob[12:12 + n_head].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{source}: unreadable metadata") from None
    shape_spec = [tuple(s) for s in meta["shape_spec"]]
    payload = blob[12 + n_head:]
    expected = 8 * param_count(shape_spec)
    if len(payload) != expected:
        raise CheckpointError(f"{source}: payload has {len(payload)} bytes, shapes need {expected}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ParamVector(values, shape_spec), meta


def save_generator(path, theta: ParamVector, activation: str = "tanh", **extra) -> str:
    """Write ``theta``; returns the sha256 of the file contents."""
    blob = encode(theta, {"kind": "generator", "activation": activation, **extra})
    _atomic_write(Path(path), blob)
    return hashlib.sha256(blob).hexdigest()


def save_reward_model(path, net: RewardNet, **extra) -> str:
    meta = {"kind": f"reward-{net.kind}", "n_signals": net.n_signals, "net": asdict(net.spec), **extra}
    blob = encode(net.params, meta)
    _atomic_write(Path(path), blob)
    return hashlib.sha256(blob).hexdigest()


def _read(path) -> tuple[ParamVector, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return decode(path.read_bytes(), str(path))


def load_generator(path) -> tuple[ParamVector, dict]:
    params, meta = _read(path)
    if meta.get("kind") != "generator":
        raise CheckpointError(f"{path}: holds a {meta.get('kind')!r}, not a generator")
    return params, meta


def load_reward_model(path) -> RewardNet:
    params, meta = _read(path)
    if not str(meta.get("kind", "")).startswith("reward-"):
        raise CheckpointError(f"{path}: holds a {meta.get('kind')!r}, not a reward model")
    net = dict(meta["net"])
    spec = NetSpec(**{**net, "encoder": tuple(net["encoder"]), "head": tuple(net["head"])})
    return RewardNet(params, int(meta["n_signals"]), spec)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
