"""Learnable convolutional regularizer ``R(x; theta) = psi(G(x))``.

``G`` is a bias-free stack ``w_l * s(... s(w_2 * s(w_1 * x)))`` with SiLU
activations ``s`` and ``psi(z) = sum(log cosh z)``.  Besides the value, this
module exposes the exact first derivatives in ``x`` and ``theta`` and the two
second-order products needed by the costate and control equations:

* ``hvp_x_R(x, v)``   -- ``(d^2 R / dx^2) v``
* ``mixed_grad_theta(x, p)`` -- ``d/dtheta <p, dR/dx>``

Both come out of one forward-over-reverse pass: the reverse sweep is run on
dual numbers whose input tangent is ``v`` (or ``p``).  The tangent of the
input gradient is the HVP; the tangent of the weight gradient is the mixed
term, because ``<p, dR/dx>`` is the directional derivative of ``R`` along ``p``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy.special import expit

from .tensorcore import (
    DualTensor,
    ScalarMap,
    ShapeError,
    Tensor,
    conv2d,
    conv2d_adjoint_input,
    conv2d_adjoint_weights,
    dual_conv2d,
    dual_conv2d_adjoint_input,
    dual_conv2d_adjoint_weights,
    dual_elementwise_map,
    dual_mul,
)

KERNEL = 3


def _silu(z):
    return z * expit(z)


def _silu_d1(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


def _silu_d2(z):
    s = expit(z)
    return s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))


SILU = ScalarMap(_silu, _silu_d1, _silu_d2)

# psi' = tanh, psi'' = 1 - tanh^2
LOGCOSH = ScalarMap(
    lambda z: log_cosh(z),
    np.tanh,
    lambda z: 1.0 - np.tanh(z) ** 2,
)


def log_cosh(z) -> np.ndarray:
    """Overflow-safe entrywise ``log(cosh(z))``."""
    a = np.abs(np.asarray(z, dtype=np.float64))
    big = a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)
    # cosh(z) - 1 = 2 sinh(z/2)^2 avoids cancellation near zero
    small = np.log1p(2.0 * np.sinh(np.minimum(a, 1.0) / 2.0) ** 2)
    return np.where(a < 1.0, small, big)


def psi(z: Tensor) -> float:
    return float(np.sum(log_cosh(z)))


@dataclass(frozen=True)
class RegularizerParams:
    """Ordered convolution weights ``[w_1, ..., w_l]``.

    Behaves as one flat vector under ``+``, ``-``, scalar ``*``, :meth:`dot`
    and :meth:`norm`.
    """

    weights: tuple

    def __post_init__(self):
        ws = tuple(np.ascontiguousarray(w, dtype=np.float64) for w in self.weights)
        object.__setattr__(self, "weights", ws)
        validate_shapes(ws)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_channels(self) -> int:
        return self.weights[0].shape[0]

    @property
    def shapes(self):
        return [w.shape for w in self.weights]

    @classmethod
    def zeros(cls, n_layers: int = 4, n_channels: int = 8) -> "RegularizerParams":
        return cls(tuple(np.zeros(s) for s in layer_shapes(n_layers, n_channels)))

    @classmethod
    def init(cls, n_layers: int = 4, n_channels: int = 8, seed: int = 0, scale: float = 1.0):
        """I.i.d. normal entries with std ``scale / sqrt(fan_in)``.

        Deviates are drawn from the package's documented generator so that
        initialisation is reproducible across platforms.
        """
        from .datagen import Stream

        stream = Stream(seed)
        ws = []
        for s in layer_shapes(n_layers, n_channels):
            fan_in = s[1] * s[2] * s[3]
            ws.append(stream.normal(int(np.prod(s))).reshape(s) * (scale / np.sqrt(fan_in)))
        return cls(tuple(ws))

    def _zip(self, other, op):
        if self.shapes != other.shapes:
            raise ShapeError(f"parameter shapes differ: {self.shapes} vs {other.shapes}")
        return RegularizerParams(tuple(op(a, b) for a, b in zip(self.weights, other.weights)))

    def __add__(self, other):
        return self._zip(other, np.add)

    def __sub__(self, other):
        return self._zip(other, np.subtract)

    def __mul__(self, c):
        return RegularizerParams(tuple(w * float(c) for w in self.weights))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def dot(self, other) -> float:
        if self.shapes != other.shapes:
            raise ShapeError(f"parameter shapes differ: {self.shapes} vs {other.shapes}")
        return float(sum(np.vdot(a, b) for a, b in zip(self.weights, other.weights)))

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights])

    def from_flat(self, vec) -> "RegularizerParams":
        vec = np.asarray(vec, dtype=np.float64)
        out, i = [], 0
        for w in self.weights:
            out.append(vec[i : i + w.size].reshape(w.shape))
            i += w.size
        if i != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {i}")
        return RegularizerParams(tuple(out))

    def zeros_like(self) -> "RegularizerParams":
        return RegularizerParams(tuple(np.zeros_like(w) for w in self.weights))

    def allclose(self, other, rtol=0.0, atol=0.0) -> bool:
        return self.shapes == other.shapes and all(
            np.allclose(a, b, rtol=rtol, atol=atol) for a, b in zip(self.weights, other.weights)
        )

    def equal(self, other) -> bool:
        return self.shapes == other.shapes and all(
            np.array_equal(a, b) for a, b in zip(self.weights, other.weights)
        )


def layer_shapes(n_layers: int, n_channels: int) -> List[tuple]:
    if n_layers < 2:
        raise ValueError(f"need at least 2 layers, got {n_layers}")
    if n_channels < 1:
        raise ValueError(f"need at least 1 channel, got {n_channels}")
    d, k = n_channels, KERNEL
    return [(d, 1, k, k)] + [(d, d, k, k)] * (n_layers - 2) + [(1, d, k, k)]


def validate_shapes(weights: Sequence[np.ndarray]) -> None:
    if len(weights) < 2:
        raise ShapeError(f"need at least 2 weight tensors, got {len(weights)}")
    expected = layer_shapes(len(weights), weights[0].shape[0] if weights[0].ndim == 4 else 1)
    for i, (w, s) in enumerate(zip(weights, expected)):
        if w.shape != s:
            raise ShapeError(f"layer {i + 1} weight has shape {w.shape}, expected {s}")


def _check_x(x: Tensor) -> None:
    if x.ndim < 3 or x.shape[-3] != 1:
        raise ShapeError(f"x must be single-channel (..., 1, H, W), got shape {x.shape}")


def _forward(x: Tensor, theta: RegularizerParams):
    """Return pre-activations ``u_k``, activations ``a_k`` (``a_0 = x``) and ``G(x)``."""
    _check_x(x)
    acts = [x]
    pre = []
    for w in theta.weights[:-1]:
        u = conv2d(acts[-1], w)
        pre.append(u)
        acts.append(SILU.value(u))
    g = conv2d(acts[-1], theta.weights[-1])
    return pre, acts, g


def g_forward(x: Tensor, theta: RegularizerParams) -> Tensor:
    return _forward(x, theta)[2]


def regularizer_value(x: Tensor, theta: RegularizerParams) -> float:
    return psi(g_forward(x, theta))


def _reverse(x: Tensor, theta: RegularizerParams, want_theta: bool):
    pre, acts, g = _forward(x, theta)
    ws = theta.weights
    delta = np.tanh(g)
    grads = [None] * len(ws)
    if want_theta:
        grads[-1] = conv2d_adjoint_weights(acts[-1], delta, ws[-1].shape)
    e = conv2d_adjoint_input(delta, ws[-1])
    for k in range(len(ws) - 2, -1, -1):
        delta = SILU.d1(pre[k]) * e
        if want_theta:
            grads[k] = conv2d_adjoint_weights(acts[k], delta, ws[k].shape)
        e = conv2d_adjoint_input(delta, ws[k])
    return e, grads


def grad_x_R(x: Tensor, theta: RegularizerParams) -> Tensor:
    return _reverse(x, theta, want_theta=False)[0]


def grad_theta_R(x: Tensor, theta: RegularizerParams) -> RegularizerParams:
    return RegularizerParams(tuple(_reverse(x, theta, want_theta=True)[1]))


def second_order(x: Tensor, v: Tensor, theta: RegularizerParams, want_theta: bool = True):
    """Forward-over-reverse pass seeded with tangent ``v`` on ``x``.

    Returns ``(hvp, mixed)`` where ``hvp = (d^2R/dx^2) v`` and
    ``mixed = d/dtheta <v, dR/dx>`` (``None`` unless ``want_theta``).
    """
    _check_x(x)
    if v.shape != x.shape:
        raise ShapeError(f"direction shape {v.shape} != x shape {x.shape}")
    ws = theta.weights
    a = DualTensor(x, v)
    acts, pre = [a], []
    for w in ws[:-1]:
        u = dual_conv2d(acts[-1], w)
        pre.append(u)
        acts.append(dual_elementwise_map(u, SILU))
    g = dual_conv2d(acts[-1], ws[-1])

    delta = dual_elementwise_map(g, LOGCOSH, derivative=True)
    grads = [None] * len(ws)
    if want_theta:
        grads[-1] = dual_conv2d_adjoint_weights(acts[-1], delta, ws[-1].shape).tangent
    e = dual_conv2d_adjoint_input(delta, ws[-1])
    for k in range(len(ws) - 2, -1, -1):
        delta = dual_mul(dual_elementwise_map(pre[k], SILU, derivative=True), e)
        if want_theta:
            grads[k] = dual_conv2d_adjoint_weights(acts[k], delta, ws[k].shape).tangent
        e = dual_conv2d_adjoint_input(delta, ws[k])
    mixed = RegularizerParams(tuple(grads)) if want_theta else None
    return e.tangent, mixed


def hvp_x_R(x: Tensor, v: Tensor, theta: RegularizerParams) -> Tensor:
    return second_order(x, v, theta, want_theta=False)[0]


def mixed_grad_theta(x: Tensor, p: Tensor, theta: RegularizerParams) -> RegularizerParams:
    return second_order(x, p, theta, want_theta=True)[1]
