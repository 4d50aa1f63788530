"""Dense tensor helpers, "same"-size 2-D convolution and forward-mode duals.

Tensors are plain ``numpy.float64`` arrays.  Convolutions act on arrays of
shape ``(..., C, H, W)``; leading axes are treated as a batch and share the
weights.  Convolution is cross-correlation with zero padding and stride 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

Tensor = np.ndarray


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(x, dtype=np.float64)


def _check_conv(x: Tensor, weights: Tensor) -> int:
    if weights.ndim != 4:
        raise ShapeError(f"weights must have rank 4, got rank {weights.ndim}")
    c_out, c_in, kh, kw = weights.shape
    if kh != kw:
        raise ShapeError(f"kernel axis 3 has {kw} entries, axis 2 has {kh}")
    if kh % 2 == 0:
        raise ShapeError(f"kernel size (axis 2) must be odd, got {kh}")
    if x.ndim < 3:
        raise ShapeError(f"input must have rank >= 3 (C, H, W), got rank {x.ndim}")
    if x.shape[-3] != c_in:
        raise ShapeError(
            f"channel axis {x.ndim - 3} of input has {x.shape[-3]} entries, "
            f"weights axis 1 expects {c_in}"
        )
    return kh // 2


def _flat_padded(x: Tensor, r: int):
    """Zero-pad every image and lay the batch end to end as ``(C, n * Lp)``.

    Rows get ``r`` zero columns on the right only (wrap-around supplies the
    left padding) and ``r + 1`` zero rows above and below, so every kernel
    tap is a contiguous shift of the long axis.
    """
    H, W = x.shape[-2:]
    C = x.shape[-3]
    Wp = W + r
    Lp = (H + 2 * r + 2) * Wp
    n = int(np.prod(x.shape[:-3], dtype=np.int64))
    xp = np.zeros((C, n, H + 2 * r + 2, Wp))
    xp[:, :, r + 1 : r + 1 + H, :W] = np.moveaxis(x.reshape((n, C, H, W)), 0, 1)
    return xp.reshape(C, n * Lp), Wp, Lp, n


def _offsets(r: int, Wp: int):
    for a in range(2 * r + 1):
        for b in range(2 * r + 1):
            # flat start of output pixel (0, 0) for kernel tap (a, b)
            yield a, b, (a + 1) * Wp + (b - r)


def conv2d(x: Tensor, weights: Tensor) -> Tensor:
    """Cross-correlate ``x`` (..., C_in, H, W) with ``weights`` (C_out, C_in, k, k)."""
    r = _check_conv(x, weights)
    H, W = x.shape[-2:]
    xf, Wp, Lp, n = _flat_padded(x, r)
    span = (n - 1) * Lp + H * Wp
    # contiguous taps keep matmul on the BLAS path
    taps = np.ascontiguousarray(weights.transpose(2, 3, 0, 1))
    out = np.zeros((weights.shape[0], n * Lp))
    acc = out[:, :span]
    tmp = np.empty_like(acc)
    for a, b, off in _offsets(r, Wp):
        np.matmul(taps[a, b], xf[:, off : off + span], out=tmp)
        acc += tmp
    out = out.reshape(weights.shape[0], n, Lp)[:, :, : H * Wp]
    out = out.reshape(weights.shape[0], n, H, Wp)[..., :W]
    out = np.moveaxis(out, 0, 1).reshape(x.shape[:-3] + (weights.shape[0], H, W))
    return np.ascontiguousarray(out)


def conv2d_adjoint_input(grad_out: Tensor, weights: Tensor) -> Tensor:
    """Transpose of :func:`conv2d` in its input argument."""
    if weights.ndim != 4:
        raise ShapeError(f"weights must have rank 4, got rank {weights.ndim}")
    if grad_out.ndim < 3 or grad_out.shape[-3] != weights.shape[0]:
        raise ShapeError(
            f"grad_out channel axis must match weights axis 0 ({weights.shape[0]}), "
            f"got shape {grad_out.shape}"
        )
    flipped = np.ascontiguousarray(weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d(grad_out, flipped)


def conv2d_adjoint_weights(x: Tensor, grad_out: Tensor, kernel_shape) -> Tensor:
    """Transpose of :func:`conv2d` in its weight argument.

    Leading batch axes of ``x`` and ``grad_out`` are summed over.
    """
    kernel_shape = tuple(int(s) for s in kernel_shape)
    if len(kernel_shape) != 4:
        raise ShapeError(f"kernel_shape must have 4 entries, got {len(kernel_shape)}")
    c_out = kernel_shape[0]
    r = _check_conv(x, np.empty(kernel_shape))
    if grad_out.shape[:-3] != x.shape[:-3] or grad_out.shape[-2:] != x.shape[-2:]:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not conform to input {x.shape}")
    if grad_out.shape[-3] != c_out:
        raise ShapeError(
            f"grad_out channel axis {grad_out.ndim - 3} has {grad_out.shape[-3]} entries, "
            f"kernel_shape axis 0 expects {c_out}"
        )
    H, W = x.shape[-2:]
    xf, Wp, Lp, n = _flat_padded(x, r)
    # padded grad_out is zero off the image, cancelling wrap-around terms
    gf = _flat_padded(grad_out, r)[0]
    span = (n - 1) * Lp + H * Wp
    base = (r + 1) * Wp
    g = gf[:, base : base + span]
    out = np.empty(kernel_shape)
    for a, b, off in _offsets(r, Wp):
        # g[:, q] sits at image pixel q; the tap reads x at q + off - base
        out[:, :, a, b] = g @ xf[:, off : off + span].T
    return out


@dataclass(frozen=True)
class ScalarMap:
    """A scalar function with its first two derivatives, applied entrywise."""

    value: Callable[[Tensor], Tensor]
    d1: Callable[[Tensor], Tensor]
    d2: Optional[Callable[[Tensor], Tensor]] = None


def elementwise_map(x: Tensor, fn: ScalarMap) -> Tensor:
    return fn.value(x)


@dataclass(frozen=True)
class DualTensor:
    """Primal value paired with a tangent (directional derivative)."""

    primal: Tensor
    tangent: Tensor

    def __post_init__(self):
        if self.primal.shape != self.tangent.shape:
            raise ShapeError(
                f"primal shape {self.primal.shape} != tangent shape {self.tangent.shape}"
            )

    @classmethod
    def constant(cls, x: Tensor) -> "DualTensor":
        return cls(x, np.zeros_like(x))

    @property
    def shape(self):
        return self.primal.shape


def dual_conv2d(x: DualTensor, weights: Tensor) -> DualTensor:
    return DualTensor(conv2d(x.primal, weights), conv2d(x.tangent, weights))


def dual_conv2d_adjoint_input(g: DualTensor, weights: Tensor) -> DualTensor:
    return DualTensor(
        conv2d_adjoint_input(g.primal, weights), conv2d_adjoint_input(g.tangent, weights)
    )


def dual_conv2d_adjoint_weights(x: DualTensor, g: DualTensor, kernel_shape) -> DualTensor:
    """Bilinear rule: d(adj_w(x, g)) = adj_w(dx, g) + adj_w(x, dg)."""
    primal = conv2d_adjoint_weights(x.primal, g.primal, kernel_shape)
    tangent = conv2d_adjoint_weights(x.tangent, g.primal, kernel_shape) + conv2d_adjoint_weights(
        x.primal, g.tangent, kernel_shape
    )
    return DualTensor(primal, tangent)


def dual_elementwise_map(x: DualTensor, fn: ScalarMap, derivative: bool = False) -> DualTensor:
    """Push a dual value through ``fn`` (or through ``fn'`` when ``derivative``).

    The derivative form needs ``fn.d2`` and is what second-order products use.
    """
    if derivative:
        if fn.d2 is None:
            raise ValueError("map has no second derivative")
        return DualTensor(fn.d1(x.primal), fn.d2(x.primal) * x.tangent)
    return DualTensor(fn.value(x.primal), fn.d1(x.primal) * x.tangent)


def dual_mul(a: DualTensor, b: DualTensor) -> DualTensor:
    return DualTensor(a.primal * b.primal, a.tangent * b.primal + a.primal * b.tangent)


def inner(a: Tensor, b: Tensor) -> float:
    return float(np.vdot(a, b))
