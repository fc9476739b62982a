"""Versioned binary checkpoints: model config header, named float32 arrays,
optimizer state, step counter, and the RNG key.

Layout (all integers little-endian):
  magic "KMCK" | u32 version | u32 header_len | header JSON (sorted keys)
  u32 n_arrays | per array: u16 name_len, name, u8 ndim, u32 dims..., f32 payload

save -> load -> save is byte-identical: the header JSON is canonicalized and
array payloads are raw little-endian float32.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .encoder import Encoder, ModelConfig, init_params
from .errors import (
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    DataError,
)
from .tensor import Adam, Tensor

MAGIC = b"KMCK"
VERSION = 1


@dataclass
class TrainState:
    """Everything needed to resume: model, optimizer, step, and the seed that
    keys every RNG substream."""

    model: Encoder
    optimizer: Adam
    step: int
    seed: int


def _write_array(buf: io.BufferedIOBase, name: str, arr: np.ndarray) -> None:
    name_b = name.encode("utf-8")
    buf.write(struct.pack("<H", len(name_b)))
    buf.write(name_b)
    buf.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, state: TrainState) -> None:
    opt = state.optimizer
    header = {
        "model": state.model.cfg.to_dict(),
        "step": state.step,
        "seed": state.seed,
        "optimizer": {
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "t": opt.t,
        },
        # All randomness is keyed by (seed, stream name, step), so this pair
        # fully determines the remaining training trajectory.
        "rng": {"seed": state.seed, "next_step": state.step},
    }
    header_b = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    names = sorted(state.model.params)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(header_b)))
        f.write(header_b)
        f.write(struct.pack("<I", 3 * len(names)))
        for name in names:
            _write_array(f, name, state.model.params[name].data)
            _write_array(f, "m:" + name, opt.m[name])
            _write_array(f, "v:" + name, opt.v[name])


def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointTruncatedError(f"truncated file: expected {n} bytes for {what}, got {len(b)}")
    return b


def _read_array(f) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2, "array name length"))
    name = _read_exact(f, name_len, "array name").decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(f, 1, f"ndim of {name}"))
    shape = tuple(
        struct.unpack("<I", _read_exact(f, 4, f"dim of {name}"))[0] for _ in range(ndim)
    )
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exact(f, 4 * count, f"payload of {name}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return name, arr


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> TrainState:
    """Read a checkpoint. With expect_config, a differing stored config is
    rejected with both configs in the message."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise DataError(f"{path}: not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise CheckpointVersionError(f"{path}: format version {version}, this build reads {VERSION}")
        (header_len,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        header = json.loads(_read_exact(f, header_len, "header").decode("utf-8"))
        cfg = ModelConfig.from_dict(header["model"])
        if expect_config is not None and cfg.to_dict() != expect_config.to_dict():
            raise ConfigError(
                "checkpoint config mismatch:\n"
                f"  stored:   {cfg.to_dict()}\n"
                f"  expected: {expect_config.to_dict()}"
            )
        (n_arrays,) = struct.unpack("<I", _read_exact(f, 4, "array count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(n_arrays):
            name, arr = _read_array(f)
            arrays[name] = arr
        trailing = f.read()
        if trailing:
            raise DataError(f"{path}: {len(trailing)} trailing bytes after declared arrays")

    reference = init_params(cfg, np.random.default_rng(0))
    if set(reference) != {n for n in arrays if not n.startswith(("m:", "v:"))}:
        missing = set(reference) - set(arrays)
        extra = {n for n in arrays if not n.startswith(("m:", "v:"))} - set(reference)
        raise CheckpointShapeError(f"{path}: parameter names disagree (missing {sorted(missing)}, extra {sorted(extra)})")

    params: dict[str, Tensor] = {}
    for name, ref in reference.items():
        arr = arrays[name]
        if arr.shape != ref.shape:
            raise CheckpointShapeError(f"{path}: {name} has shape {arr.shape}, config implies {ref.shape}")
        params[name] = Tensor(arr, requires_grad=True)

    model = Encoder(cfg, params=params)
    opt_h = header["optimizer"]
    optimizer = Adam(params, lr=opt_h["lr"], beta1=opt_h["beta1"], beta2=opt_h["beta2"], eps=opt_h["eps"])
    optimizer.t = opt_h["t"]
    for name in params:
        m, v = arrays.get("m:" + name), arrays.get("v:" + name)
        if m is None or v is None:
            raise CheckpointShapeError(f"{path}: missing optimizer state for {name}")
        if m.shape != params[name].shape or v.shape != params[name].shape:
            raise CheckpointShapeError(f"{path}: optimizer state shape mismatch for {name}")
        optimizer.m[name] = m
        optimizer.v[name] = v
    return TrainState(model=model, optimizer=optimizer, step=header["step"], seed=header["seed"])
