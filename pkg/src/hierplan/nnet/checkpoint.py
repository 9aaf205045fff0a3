"""Versioned binary checkpoint container.

Layout: 8 magic bytes, a little-endian u64 header length, a UTF-8 JSON
header, the float64 arrays listed in the header (little-endian, in header
order), and a SHA-256 digest of everything before it.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .optim import OptimizerState

MAGIC = b"HPLNCKPT"
FORMAT_VERSION = 1
_DIGEST = 32


class CheckpointError(ValueError):
    """Base class for unreadable or incompatible checkpoints."""


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ArchitectureMismatch(CheckpointError):
    pass


@dataclass
class TrainState:
    """Everything beyond the parameters needed to continue a run."""

    optimizer: OptimizerState | None = None
    rng_state: dict | None = None
    step: int = 0
    extra: dict = field(default_factory=dict)


@dataclass
class Checkpoint:
    architecture: list
    config: dict
    params: np.ndarray
    state: TrainState = field(default_factory=TrainState)


def _le(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def encode(ck: Checkpoint) -> bytes:
    arrays = [("params", ck.params)]
    opt = ck.state.optimizer
    opt_meta = None
    if opt is not None:
        opt_meta = {"kind": opt.kind, "lr": opt.lr, "step_count": opt.step_count, "grad_clip": opt.grad_clip}
        if opt.m is not None:
            arrays += [("adam_m", opt.m), ("adam_v", opt.v)]
    header = {
        "version": FORMAT_VERSION,
        "architecture": ck.architecture,
        "config": ck.config,
        "optimizer": opt_meta,
        "rng_state": ck.state.rng_state,
        "step": int(ck.state.step),
        "extra": ck.state.extra,
        "arrays": [[name, int(np.asarray(a).size)] for name, a in arrays],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<Q", len(head)) + head + b"".join(_le(a) for _, a in arrays)
    return body + hashlib.sha256(body).digest()


def decode(data: bytes, expect_architecture: list | None = None) -> Checkpoint:
    if len(data) < len(MAGIC) + 8 + _DIGEST or not data.startswith(MAGIC):
        raise CorruptCheckpoint("not a checkpoint file (bad magic or too short)")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint("checksum mismatch: file is truncated or corrupted")
    (n_head,) = struct.unpack_from("<Q", body, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(body[start : start + n_head].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from None
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format version {header.get('version')!r}, expected {FORMAT_VERSION}")
    if expect_architecture is not None:
        check_architecture(header["architecture"], expect_architecture)
    offset = start + n_head
    arrays = {}
    for name, size in header["arrays"]:
        end = offset + 8 * size
        if end > len(body):
            raise CorruptCheckpoint(f"array {name!r} runs past the end of the file")
        arrays[name] = np.frombuffer(body[offset:end], dtype="<f8").astype(np.float64)
        offset = end
    if offset != len(body):
        raise CorruptCheckpoint(f"{len(body) - offset} unexpected trailing bytes")
    opt = None
    meta = header["optimizer"]
    if meta is not None:
        opt = OptimizerState(meta["kind"], meta["lr"], step_count=meta["step_count"], grad_clip=meta["grad_clip"])
        opt.m, opt.v = arrays.get("adam_m"), arrays.get("adam_v")
    state = TrainState(opt, header["rng_state"], header["step"], header["extra"])
    return Checkpoint(header["architecture"], header["config"], arrays["params"], state)


def check_architecture(found: list, expected: list) -> None:
    if found == expected:
        return
    names_f = [g[0] for g in found]
    names_e = [g[0] for g in expected]
    for g in expected:
        if g[0] not in names_f:
            raise ArchitectureMismatch(f"checkpoint lacks parameter group {g[0]!r}")
    for g in found:
        if g[0] not in names_e:
            raise ArchitectureMismatch(f"checkpoint has unexpected parameter group {g[0]!r}")
    by_name = {g[0]: g for g in found}
    for g in expected:
        if by_name[g[0]] != g:
            raise ArchitectureMismatch(f"group {g[0]!r}: checkpoint has {by_name[g[0]][1:]}, model expects {g[1:]}")
    raise ArchitectureMismatch("parameter groups are in a different order")


def write(path, ck: Checkpoint) -> None:
    """Write atomically: a failed save never leaves a half-written file at ``path``."""
    data = encode(ck)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read(path, expect_architecture: list | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read(), expect_architecture)
