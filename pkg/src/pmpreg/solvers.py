"""Method-of-successive-approximations trainers for the regularizer weights.

Every variant runs the same explicit-Euler forward solve of the gradient
flow and differs only in the backward sweep:

``basic``         costate sweep, then a separate quadrature of grad_theta H
                  at the frozen control (gradient ascent on the integrated
                  Hamiltonian).
``augmented``     one sweep integrating ``(p, theta_bar)`` jointly, grad H
                  still evaluated at the frozen control.
``memfree``       as ``augmented`` but only ``x_T`` is kept; states are
                  rebuilt by reverse Euler during the sweep.
``control_flow``  staggered sweep evaluating grad H at the evolving
                  ``theta_bar``.
``backprop_oracle``  plain gradient descent with the exact discrete adjoint.

The backward quadrature weight equals the forward step ``tau``.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from . import dynamics, regnet
from .dynamics import ProblemInstance, stack
from .regnet import RegularizerParams

log = logging.getLogger(__name__)

VARIANTS = ("basic", "augmented", "memfree", "control_flow", "backprop_oracle")


class DivergenceError(FloatingPointError):
    """A state or costate became non-finite."""

    def __init__(self, step: int, phase: str = "forward", iteration: Optional[int] = None):
        self.step = step
        self.phase = phase
        self.iteration = iteration
        super().__init__(self._message())

    def _message(self):
        where = f"iteration {self.iteration}, " if self.iteration is not None else ""
        return f"non-finite values in {self.phase} sweep ({where}step {self.step})"

    def at_iteration(self, k: int) -> "DivergenceError":
        self.iteration = k
        self.args = (self._message(),)
        return self


@dataclass(frozen=True)
class SolverConfig:
    T: int = 15
    tau: float = 0.5
    eta: float = 1.0
    K: int = 50
    variant: str = "control_flow"
    paper_literal_signs: bool = False
    seed: int = 0
    # step-size halvings allowed per iteration when an update diverges or
    # raises J; 0 runs the plain iteration
    backtrack: int = 0

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.eta >= 0:
            raise ValueError(f"eta must be nonnegative, got {self.eta}")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if int(self.backtrack) != self.backtrack or self.backtrack < 0:
            raise ValueError(f"backtrack must be a nonnegative integer, got {self.backtrack}")


@dataclass
class Trajectory:
    """Forward states; ``stored_count`` is the number of tensors actually retained."""

    states: List[np.ndarray]
    steps: int

    @property
    def stored_count(self) -> int:
        return len(self.states)

    @property
    def x_T(self) -> np.ndarray:
        return self.states[-1]


class SlotCounter:
    """Tracks how many tensors a backward sweep keeps alive at once."""

    def __init__(self):
        self.live = {}
        self.peak = 0

    def hold(self, name, value):
        self.live[name] = value
        self.peak = max(self.peak, len(self.live))
        return value

    def drop(self, name):
        self.live.pop(name, None)


@dataclass
class TrainReport:
    objective: List[float] = field(default_factory=list)
    hamiltonian_integral: List[float] = field(default_factory=list)
    grad_norm: List[float] = field(default_factory=list)
    peak_stored: List[int] = field(default_factory=list)
    peak_reverse: List[int] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    drift: List[float] = field(default_factory=list)
    eta: List[float] = field(default_factory=list)

    def __len__(self):
        return len(self.objective)

    def rows(self):
        """Deterministic per-iteration rows ``(k, J, grad_norm, peak_stored)``."""
        for k in range(len(self)):
            yield k + 1, self.objective[k], self.grad_norm[k], self.peak_stored[k]


def _finite(x) -> bool:
    return bool(np.isfinite(x).all())


def forward_euler(x0, theta: RegularizerParams, prob: ProblemInstance, cfg: SolverConfig,
                  *, steps: Optional[int] = None, store: bool = True) -> Trajectory:
    """Explicit Euler on ``x' = f(x, theta)``; ``store=False`` keeps only the latest state."""
    T = cfg.T if steps is None else int(steps)
    x = np.array(x0, dtype=np.float64)
    states = [x]
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            x = x + cfg.tau * dynamics.flow_field(x, prob, theta)
            if not _finite(x):
                raise DivergenceError(t + 1)
            if store:
                states.append(x)
            else:
                states[0] = x
    return Trajectory(states, T)


def adjoint_terminal(x_T, x_gt) -> np.ndarray:
    return -dynamics.grad_terminal_cost(x_T, x_gt)


def objective(theta: RegularizerParams, dataset, cfg: SolverConfig) -> float:
    """``J = Phi(x_T) + T * tau * r(theta)``."""
    prob = stack(dataset)
    traj = forward_euler(prob.x0, theta, prob, cfg, store=False)
    return _objective_from(traj.x_T, theta, prob, cfg)


def _objective_from(x_T, theta, prob, cfg) -> float:
    return dynamics.terminal_cost(x_T, prob.x_gt) + cfg.T * cfg.tau * dynamics.running_cost(
        None, theta, prob
    )


def costate_sweep(traj: Trajectory, theta: RegularizerParams, prob: ProblemInstance,
                  cfg: SolverConfig, sign: float = 1.0) -> List[np.ndarray]:
    """Backward Euler-type sweep ``p_t = p_{t+1} + tau * grad_x H(x_t, p_{t+1}, theta)``.

    Needs the full trajectory; returns ``[p_0, ..., p_T]``.
    """
    if traj.stored_count != traj.steps + 1:
        raise ValueError("costate sweep needs the full stored trajectory")
    p = adjoint_terminal(traj.x_T, prob.x_gt)
    ps = [p]
    for t in range(traj.steps - 1, -1, -1):
        p = p + sign * cfg.tau * dynamics.grad_x_H(traj.states[t], p, theta, prob)
        if not _finite(p):
            raise DivergenceError(t, "costate")
        ps.append(p)
    ps.reverse()
    return ps


def _h_integral(states, ps, theta, prob, cfg) -> float:
    # f(x_t) = (x_{t+1} - x_t) / tau along the stored Euler trajectory
    s = sum(float(np.vdot(ps[t + 1], states[t + 1] - states[t])) for t in range(len(states) - 1))
    return s - cfg.T * cfg.tau * dynamics.running_cost(None, theta, prob)


def _step_basic(theta, prob, cfg):
    traj = forward_euler(prob.x0, theta, prob, cfg)
    ps = costate_sweep(traj, theta, prob, cfg)
    total = theta.zeros_like()
    for t in range(cfg.T):
        total = total + dynamics.grad_theta_H(traj.states[t], ps[t + 1], theta, prob) * cfg.tau
    new = theta + total * cfg.eta
    info = dict(
        J=_objective_from(traj.x_T, theta, prob, cfg),
        H=_h_integral(traj.states, ps, theta, prob, cfg),
        grad_norm=total.norm(),
        peak_stored=traj.stored_count,
        peak_reverse=len(ps),
    )
    return new, info


def _step_augmented(theta, prob, cfg):
    traj = forward_euler(prob.x0, theta, prob, cfg)
    slots = SlotCounter()
    p = slots.hold("p", adjoint_terminal(traj.x_T, prob.x_gt))
    tbar = slots.hold("theta_bar", theta)
    h = 0.0
    for t in range(cfg.T - 1, -1, -1):
        x = traj.states[t]
        h += float(np.vdot(p, traj.states[t + 1] - x))
        gx, gt = dynamics.hamiltonian_grads(x, p, theta, prob)
        tbar = slots.hold("theta_bar", tbar + gt * (cfg.eta * cfg.tau))
        p = slots.hold("p", p + cfg.tau * gx)
        if not _finite(p):
            raise DivergenceError(t, "costate")
    info = dict(
        J=_objective_from(traj.x_T, theta, prob, cfg),
        H=h - cfg.T * cfg.tau * dynamics.running_cost(None, theta, prob),
        grad_norm=_update_norm(tbar, theta, cfg),
        peak_stored=traj.stored_count,
        peak_reverse=slots.peak,
    )
    return tbar, info


def _step_memfree(theta, prob, cfg, verify=False):
    traj = forward_euler(prob.x0, theta, prob, cfg, store=False)
    x_T = traj.x_T
    slots = SlotCounter()
    x = slots.hold("x", x_T)
    f = slots.hold("f", dynamics.flow_field(x, prob, theta))
    p = slots.hold("p", adjoint_terminal(x_T, prob.x_gt))
    tbar = slots.hold("theta_bar", theta)
    recon = [x_T] if verify else None
    h = 0.0
    for t in range(cfg.T - 1, -1, -1):
        x = slots.hold("x", x - cfg.tau * f)
        if not _finite(x):
            raise DivergenceError(t, "reconstruction")
        f = slots.hold("f", dynamics.flow_field(x, prob, theta))
        h += cfg.tau * float(np.vdot(p, f))
        gx, gt = dynamics.hamiltonian_grads(x, p, theta, prob)
        tbar = slots.hold("theta_bar", tbar + gt * (cfg.eta * cfg.tau))
        p = slots.hold("p", p + cfg.tau * gx)
        if not _finite(p):
            raise DivergenceError(t, "costate")
        if verify:
            recon.append(x)
    info = dict(
        J=_objective_from(x_T, theta, prob, cfg),
        H=h - cfg.T * cfg.tau * dynamics.running_cost(None, theta, prob),
        grad_norm=_update_norm(tbar, theta, cfg),
        peak_stored=traj.stored_count,
        peak_reverse=slots.peak,
        drift=math.nan,
    )
    if verify:
        t0 = time.perf_counter()
        ref = forward_euler(prob.x0, theta, prob, cfg).states
        recon.reverse()
        info["drift"] = trajectory_drift(recon, ref)
        info["verify_seconds"] = time.perf_counter() - t0
    return tbar, info


def trajectory_drift(recon, ref) -> float:
    """``max_t |recon_t - ref_t| / |ref_t|`` (absolute where ``ref_t`` is zero)."""
    worst = 0.0
    for a, b in zip(recon, ref):
        nb = float(np.linalg.norm(b))
        err = float(np.linalg.norm(a - b))
        worst = max(worst, err / nb if nb > 0 else err)
    return worst


def _step_control_flow(theta, prob, cfg):
    traj = forward_euler(prob.x0, theta, prob, cfg)
    sign = -1.0 if cfg.paper_literal_signs else 1.0
    slots = SlotCounter()
    p = slots.hold("p", adjoint_terminal(traj.x_T, prob.x_gt))
    tbar = slots.hold("theta_bar", theta)
    h = 0.0
    for t in range(cfg.T - 1, -1, -1):
        x = traj.states[t]
        h += float(np.vdot(p, traj.states[t + 1] - x))
        gt = dynamics.grad_theta_H(x, p, tbar, prob)
        tbar = slots.hold("theta_bar", tbar + gt * (cfg.eta * cfg.tau))
        gx = dynamics.grad_x_H(x, p, tbar, prob)
        p = slots.hold("p", p + sign * cfg.tau * gx)
        if not _finite(p):
            raise DivergenceError(t, "costate")
    info = dict(
        J=_objective_from(traj.x_T, theta, prob, cfg),
        H=h - cfg.T * cfg.tau * dynamics.running_cost(None, theta, prob),
        grad_norm=_update_norm(tbar, theta, cfg),
        peak_stored=traj.stored_count,
        peak_reverse=slots.peak,
    )
    return tbar, info


def _update_norm(new, old, cfg) -> float:
    # the sweep integrates eta * grad_theta H, so undo eta to report the integral
    return (new - old).norm() / cfg.eta if cfg.eta > 0 else math.nan


def backprop_oracle(theta: RegularizerParams, dataset, cfg: SolverConfig) -> RegularizerParams:
    """Exact gradient of ``J`` through the unrolled Euler recursion (discrete adjoint)."""
    return _backprop(theta, stack(dataset), cfg)[0]


def _backprop(theta, prob, cfg):
    traj = forward_euler(prob.x0, theta, prob, cfg)
    a = dynamics.grad_terminal_cost(traj.x_T, prob.x_gt)
    grad = theta.zeros_like()
    for t in range(cfg.T - 1, -1, -1):
        x = traj.states[t]
        hvp, mixed = regnet.second_order(x, a, theta)
        # (df/dtheta)^T a = -lam * mixed ;  (df/dx)^T a = -(A^T A a + lam * hvp)
        grad = grad + mixed * (-cfg.tau * prob.lam)
        a = a - cfg.tau * (prob.op.normal(a) + prob.lam * hvp)
        if not _finite(a):
            raise DivergenceError(t, "adjoint")
    if prob.rho:
        grad = grad + theta * (cfg.T * cfg.tau * prob.rho)
    return grad, traj


def _step_backprop(theta, prob, cfg):
    grad, traj = _backprop(theta, prob, cfg)
    info = dict(
        J=_objective_from(traj.x_T, theta, prob, cfg),
        H=math.nan,
        grad_norm=grad.norm(),
        peak_stored=traj.stored_count,
        peak_reverse=1,
    )
    return theta - grad * cfg.eta, info


_STEPS = {
    "basic": _step_basic,
    "augmented": _step_augmented,
    "memfree": _step_memfree,
    "control_flow": _step_control_flow,
    "backprop_oracle": _step_backprop,
}


def _guarded_step(step, theta, prob, cfg, k, **kw):
    """One outer iteration; with ``cfg.backtrack`` the step size is halved on failure."""
    eta = cfg.eta
    for attempt in range(cfg.backtrack + 1):
        last = attempt == cfg.backtrack
        trial = cfg if attempt == 0 else replace(cfg, eta=eta)
        try:
            new, info = step(theta, prob, trial, **kw)
        except DivergenceError as err:
            if last:
                raise err.at_iteration(k)
            log.info("iteration %d: %s; halving eta to %g", k, err, eta / 2)
            eta /= 2
            continue
        if cfg.backtrack == 0:
            break
        try:
            j_new = _objective_from(forward_euler(prob.x0, new, prob, cfg, store=False).x_T, new, prob, cfg)
        except DivergenceError as err:
            if last:
                raise err.at_iteration(k)
            j_new = math.inf
        if j_new <= info["J"] or last:
            break
        log.info("iteration %d: J %.6g -> %.6g; halving eta to %g", k, info["J"], j_new, eta / 2)
        eta /= 2
    info["eta"] = eta
    return new, info


def _run(step, theta0, dataset, cfg, callback=None, **kw):
    prob = stack(dataset)
    if prob.x_gt is None:
        raise ValueError("training needs ground truth")
    report = TrainReport()
    theta = theta0
    for k in range(1, cfg.K + 1):
        t0 = time.perf_counter()
        with np.errstate(over="ignore", invalid="ignore"):
            theta, info = _guarded_step(step, theta, prob, cfg, k, **kw)
        elapsed = time.perf_counter() - t0 - info.get("verify_seconds", 0.0)
        report.objective.append(info["J"])
        report.hamiltonian_integral.append(info["H"])
        report.grad_norm.append(info["grad_norm"])
        report.peak_stored.append(info["peak_stored"])
        report.peak_reverse.append(info["peak_reverse"])
        report.seconds.append(elapsed)
        report.drift.append(info.get("drift", math.nan))
        report.eta.append(info["eta"])
        log.debug("k=%d J=%.6g |g|=%.3g", k, info["J"], info["grad_norm"])
        if callback is not None:
            callback(k, theta)
    return theta, report


def msa_basic(theta0, dataset, cfg: SolverConfig, callback: Optional[Callable] = None):
    return _run(_step_basic, theta0, dataset, cfg, callback)


def msa_augmented(theta0, dataset, cfg: SolverConfig, callback: Optional[Callable] = None):
    return _run(_step_augmented, theta0, dataset, cfg, callback)


def msa_memfree(theta0, dataset, cfg: SolverConfig, callback: Optional[Callable] = None,
                verify: bool = True):
    """Returns ``(theta_K, report, drift)``; ``drift`` is the worst over iterations."""
    theta, report = _run(_step_memfree, theta0, dataset, cfg, callback, verify=verify)
    drift = max(report.drift) if verify else math.nan
    return theta, report, drift


def msa_control_flow(theta0, dataset, cfg: SolverConfig, callback: Optional[Callable] = None):
    return _run(_step_control_flow, theta0, dataset, cfg, callback)


def gradient_descent(theta0, dataset, cfg: SolverConfig, callback: Optional[Callable] = None):
    return _run(_step_backprop, theta0, dataset, cfg, callback)


def train(theta0, dataset, cfg: SolverConfig, callback: Optional[Callable] = None):
    """Dispatch on ``cfg.variant``; always returns ``(theta_K, report)``."""
    if cfg.variant == "memfree":
        theta, report, _ = msa_memfree(theta0, dataset, cfg, callback)
        return theta, report
    return _run(_STEPS[cfg.variant], theta0, dataset, cfg, callback)
