"""Variational energy, its gradient flow and the control Hamiltonian.

States may be a single image ``(1, H, W)`` or a stacked batch
``(N, 1, H, W)``.  For a batch the terminal cost is the *mean* of the
per-sample costs, so the costate carries a ``1/N`` factor and all
Hamiltonian gradients with respect to ``theta`` are batch averages.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import regnet
from .regnet import RegularizerParams
from .tensorcore import ShapeError, Tensor, conv2d, conv2d_adjoint_input


@dataclass(frozen=True)
class MeasurementOp:
    """Real-valued linear measurement ``A``: identity, blur or binary mask."""

    variant: str
    kernel: Optional[np.ndarray] = None
    mask_array: Optional[np.ndarray] = None

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def blur(cls, kernel):
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim == 2:
            kernel = kernel[None, None]
        if kernel.shape[:2] != (1, 1):
            raise ShapeError(f"blur kernel must be (1, 1, k, k), got {kernel.shape}")
        return cls("blur", kernel=kernel)

    @classmethod
    def mask(cls, m):
        m = np.asarray(m, dtype=np.float64)
        if m.ndim == 2:
            m = m[None]
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError("mask entries must be 0 or 1")
        return cls("mask", mask_array=m)

    def apply(self, x: Tensor) -> Tensor:
        if self.variant == "identity":
            return x.copy()
        if self.variant == "blur":
            return conv2d(x, self.kernel)
        if self.variant == "mask":
            if x.shape[-2:] != self.mask_array.shape[-2:]:
                raise ShapeError(f"mask shape {self.mask_array.shape} vs image {x.shape}")
            return x * self.mask_array
        raise ValueError(f"unknown measurement variant {self.variant!r}")

    def apply_adjoint(self, y: Tensor) -> Tensor:
        if self.variant == "blur":
            return conv2d_adjoint_input(y, self.kernel)
        # identity and mask are self-adjoint
        return self.apply(y)

    def normal(self, x: Tensor) -> Tensor:
        """``A^T A x``."""
        return self.apply_adjoint(self.apply(x))


@dataclass(frozen=True)
class ProblemInstance:
    op: MeasurementOp
    b: np.ndarray
    x_gt: Optional[np.ndarray]
    lam: float
    rho: float = 0.0
    x_init: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.rho < 0:
            raise ValueError(f"rho must be nonnegative, got {self.rho}")
        if self.x_gt is not None and np.shape(self.x_gt) != np.shape(self.b):
            raise ShapeError(f"b shape {np.shape(self.b)} != x_gt shape {np.shape(self.x_gt)}")

    @property
    def x0(self) -> np.ndarray:
        """Initial state: ``x_init`` when given, else ``A^T b``."""
        if self.x_init is not None:
            return np.asarray(self.x_init, dtype=np.float64)
        return self.op.apply_adjoint(self.b)


def stack(instances: Sequence[ProblemInstance]) -> ProblemInstance:
    """Merge single-image instances into one batched instance."""
    if isinstance(instances, ProblemInstance):
        return instances
    instances = list(instances)
    if not instances:
        raise ValueError("empty dataset")
    first = instances[0]
    for inst in instances[1:]:
        if inst.op.variant != first.op.variant:
            raise ValueError("all instances must share one measurement operator")
        if (inst.lam, inst.rho) != (first.lam, first.rho):
            raise ValueError("all instances must share lambda and rho")
    b = np.stack([np.asarray(i.b, dtype=np.float64) for i in instances])
    gt = None
    if all(i.x_gt is not None for i in instances):
        gt = np.stack([np.asarray(i.x_gt, dtype=np.float64) for i in instances])
    x_init = None
    if any(i.x_init is not None for i in instances):
        x_init = np.stack([i.x0 for i in instances])
    return replace(first, b=b, x_gt=gt, x_init=x_init)


def batch_size(x: Tensor) -> int:
    return x.shape[0] if x.ndim == 4 else 1


def energy(x, prob: ProblemInstance, theta: RegularizerParams) -> float:
    r = prob.op.apply(x) - prob.b
    return 0.5 * float(np.vdot(r, r)) + prob.lam * regnet.regularizer_value(x, theta)


def grad_energy(x, prob: ProblemInstance, theta: RegularizerParams) -> Tensor:
    return prob.op.apply_adjoint(prob.op.apply(x) - prob.b) + prob.lam * regnet.grad_x_R(x, theta)


def flow_field(x, prob: ProblemInstance, theta: RegularizerParams) -> Tensor:
    return -grad_energy(x, prob, theta)


def running_cost(x, theta: RegularizerParams, prob: ProblemInstance) -> float:
    return 0.5 * prob.rho * theta.dot(theta)


def terminal_cost(x_T, x_gt) -> float:
    d = x_T - x_gt
    return 0.5 * float(np.vdot(d, d)) / batch_size(x_T)


def grad_terminal_cost(x_T, x_gt) -> Tensor:
    return (x_T - x_gt) / batch_size(x_T)


def hamiltonian(x, p, theta: RegularizerParams, prob: ProblemInstance) -> float:
    return float(np.vdot(p, flow_field(x, prob, theta))) - running_cost(x, theta, prob)


def grad_p_H(x, p, theta: RegularizerParams, prob: ProblemInstance) -> Tensor:
    return flow_field(x, prob, theta)


def grad_x_H(x, p, theta: RegularizerParams, prob: ProblemInstance) -> Tensor:
    return -(prob.op.normal(p) + prob.lam * regnet.hvp_x_R(x, p, theta))


def grad_theta_H(x, p, theta: RegularizerParams, prob: ProblemInstance) -> RegularizerParams:
    g = regnet.mixed_grad_theta(x, p, theta) * (-prob.lam)
    if prob.rho:
        g = g - theta * prob.rho
    return g


def hamiltonian_grads(x, p, theta: RegularizerParams, prob: ProblemInstance):
    """``(grad_x_H, grad_theta_H)`` from a single second-order pass."""
    hvp, mixed = regnet.second_order(x, p, theta)
    gx = -(prob.op.normal(p) + prob.lam * hvp)
    gt = mixed * (-prob.lam)
    if prob.rho:
        gt = gt - theta * prob.rho
    return gx, gt
