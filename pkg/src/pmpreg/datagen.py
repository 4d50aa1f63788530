"""Synthetic phantoms, simulated measurements and image file I/O.

Random numbers come from SplitMix64 (Steele, Lea & Flood 2014): state
advances by ``0x9E3779B97F4A7C15``; each output is the state mixed with
multipliers ``0xBF58476D1CE4E5B9`` and ``0x94D049BB133111EB`` (shifts
30/27/31).  Uniforms take the top 53 bits; normals use Box-Muller on pairs
``(u1, u2)`` as ``sqrt(-2 ln(1 - u1)) * (cos, sin)(2 pi u2)``.  The stream is
simple enough to reproduce bit-exactly in any language.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np

from .dynamics import MeasurementOp, ProblemInstance

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class Stream:
    """Sequential SplitMix64 stream."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        ks = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + ks * _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * _M1
            z = (z ^ (z >> np.uint64(27))) * _M2
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * int(_GOLDEN)) & _MASK64
        return z

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1, u2 = u[0::2], u[1::2]
        rad = np.sqrt(-2.0 * np.log1p(-u1))
        out = np.empty(2 * m)
        out[0::2] = rad * np.cos(2.0 * np.pi * u2)
        out[1::2] = rad * np.sin(2.0 * np.pi * u2)
        return out[:n]


@dataclass(frozen=True)
class Phantom:
    image: np.ndarray
    descriptor: dict


def make_phantom(H: int, W: int, n_shapes: int, seed: int) -> Phantom:
    """Sum of random rectangles and ellipses with constant intensities, clipped to [0, 1]."""
    if H < 8 or W < 8:
        raise ValueError(f"phantom must be at least 8x8, got {H}x{W}")
    stream = Stream(seed)
    img = np.zeros((H, W))
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    for _ in range(n_shapes):
        kind, cy, cx, ry, rx, val = stream.uniform(6)
        cy, cx = cy * H, cx * W
        ry = (0.1 + 0.3 * ry) * H
        rx = (0.1 + 0.3 * rx) * W
        val = 0.2 + 0.6 * val
        if kind < 0.5:
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[inside] += val
    img = np.clip(img, 0.0, 1.0)
    return Phantom(img[None], {"H": H, "W": W, "n_shapes": n_shapes, "seed": seed})


def simulate_measurement(
    phantom, op: MeasurementOp, sigma: float, seed: int, lam: float = 0.05, rho: float = 0.0
) -> ProblemInstance:
    """``b = A x_gt + sigma * eps`` with ``eps`` drawn from ``Stream(seed)``."""
    x = phantom.image if isinstance(phantom, Phantom) else np.asarray(phantom, dtype=np.float64)
    clean = op.apply(x)
    noise = Stream(seed).normal(clean.size).reshape(clean.shape)
    b = clean + sigma * noise
    return ProblemInstance(op=op, b=b, x_gt=x, lam=lam, rho=rho)


def default_blur_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    r = size // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(t[:, None] ** 2 + t[None, :] ** 2) / (2.0 * sigma**2))
    return (g / g.sum())[None, None]


def default_mask(H: int, W: int, keep: float = 0.4, seed: int = 0) -> np.ndarray:
    return (Stream(seed).uniform(H * W).reshape(1, H, W) < keep).astype(np.float64)


def make_operator(kind: str, H: int, W: int, seed: int = 0, blur_size: int = 5,
                  blur_sigma: float = 1.0, mask_keep: float = 0.4) -> MeasurementOp:
    if kind == "identity":
        return MeasurementOp.identity()
    if kind == "blur":
        return MeasurementOp.blur(default_blur_kernel(blur_size, blur_sigma))
    if kind == "mask":
        return MeasurementOp.mask(default_mask(H, W, mask_keep, seed))
    raise ValueError(f"unknown operator {kind!r}")


@dataclass
class Dataset:
    train: List[ProblemInstance]
    test: List[ProblemInstance]
    sigma: float
    seed: int
    descriptors: dict = field(default_factory=dict)


def make_dataset(
    n_train: int,
    n_test: int,
    H: int,
    W: int,
    op: MeasurementOp,
    sigma: float,
    seed: int,
    n_shapes: int = 4,
    lam: float = 0.05,
    rho: float = 0.0,
) -> Dataset:
    """Deterministic train/test split; sample ``i`` uses phantom seed ``seed * 1000003 + i``."""
    insts, descs = [], []
    for i in range(n_train + n_test):
        s = seed * 1000003 + i
        ph = make_phantom(H, W, n_shapes, s)
        insts.append(simulate_measurement(ph, op, sigma, s ^ 0x5DEECE66D, lam=lam, rho=rho))
        descs.append(ph.descriptor)
    return Dataset(insts[:n_train], insts[n_train:], sigma, seed,
                   {"train": descs[:n_train], "test": descs[n_train:]})


class ImageFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


_MSAF_HEADER = struct.Struct("<4sIII")


def _as_image2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 2:
        raise ValueError(f"expected a (1, H, W) or (H, W) image, got shape {x.shape}")
    return x


def encode_msaf(x) -> bytes:
    img = _as_image2d(x)
    H, W = img.shape
    return _MSAF_HEADER.pack(b"MSAF", H, W, 0) + img.astype("<f8").tobytes()


def decode_msaf(data: bytes) -> np.ndarray:
    if len(data) < _MSAF_HEADER.size:
        raise ImageFormatError("truncated MSAF header", len(data))
    magic, H, W, _ = _MSAF_HEADER.unpack_from(data)
    if magic != b"MSAF":
        raise ImageFormatError(f"bad magic {magic!r}", 0)
    need = _MSAF_HEADER.size + 8 * H * W
    if len(data) < need:
        raise ImageFormatError(f"truncated payload: need {need} bytes", len(data))
    arr = np.frombuffer(data, dtype="<f8", count=H * W, offset=_MSAF_HEADER.size)
    return arr.astype(np.float64).reshape(1, H, W)


def encode_pgm(x) -> bytes:
    img = _as_image2d(x)
    H, W = img.shape
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P5\n{W} {H}\n255\n".encode("ascii") + q.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    if data[:2] != b"P5":
        raise ImageFormatError("missing P5 magic", 0)
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed P5 header field", start)
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageFormatError("expected whitespace after maxval", pos)
    pos += 1
    W, H, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}", pos - 1)
    if len(data) - pos < H * W:
        raise ImageFormatError(f"truncated payload: need {H * W} bytes", len(data))
    arr = np.frombuffer(data, dtype=np.uint8, count=H * W, offset=pos)
    return (arr.astype(np.float64) / 255.0).reshape(1, H, W)


def write_image(path, x) -> None:
    path = Path(path)
    data = encode_pgm(x) if path.suffix.lower() in (".pgm", ".pnm") else encode_msaf(x)
    path.write_bytes(data)


def read_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] == b"MSAF":
        return decode_msaf(data)
    return decode_pgm(data)
