"""Binary ``MSAC`` checkpoints of the regularizer weights.

Layout (little-endian): ``b"MSAC"``, u32 version, u32 layers, u32 channels,
then per weight tensor u32 rank, rank x u32 extents and the float64 payload.
A trailer follows: u32 solver iteration, u32 digest length, digest bytes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .regnet import RegularizerParams

VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Checkpoint:
    theta: RegularizerParams
    iteration: int = 0
    digest: bytes = b""

    @property
    def layers(self) -> int:
        return self.theta.n_layers

    @property
    def channels(self) -> int:
        return self.theta.n_channels


def encode(ckpt: Checkpoint) -> bytes:
    theta = ckpt.theta
    parts = [struct.pack("<4sIII", b"MSAC", VERSION, theta.n_layers, theta.n_channels)]
    for w in theta.weights:
        parts.append(struct.pack(f"<I{w.ndim}I", w.ndim, *w.shape))
        parts.append(w.astype("<f8").tobytes())
    parts.append(struct.pack("<II", ckpt.iteration, len(ckpt.digest)))
    parts.append(ckpt.digest)
    return b"".join(parts)


def decode(data: bytes) -> Checkpoint:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    magic, version, layers, channels = struct.unpack("<4sIII", take(16))
    if magic != b"MSAC":
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    ws = []
    for _ in range(layers):
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape))
        ws.append(np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape))
    iteration, dlen = struct.unpack("<II", take(8))
    digest = take(dlen)
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after checkpoint")
    try:
        theta = RegularizerParams(tuple(ws))
    except ValueError as err:
        raise CheckpointError(str(err)) from err
    if theta.n_channels != channels:
        raise CheckpointError(f"header says {channels} channels, weights have {theta.n_channels}")
    return Checkpoint(theta, iteration, digest)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path, layers: int = None, channels: int = None) -> Checkpoint:
    ckpt = decode(Path(path).read_bytes())
    if layers is not None and ckpt.layers != layers:
        raise CheckpointError(f"checkpoint has {ckpt.layers} layers, config expects {layers}")
    if channels is not None and ckpt.channels != channels:
        raise CheckpointError(f"checkpoint has {ckpt.channels} channels, config expects {channels}")
    return ckpt
