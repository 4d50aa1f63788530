"""scikit-learn style wrapper around training and reconstruction."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import datagen, dynamics, solvers
from .metrics import psnr
from .regnet import RegularizerParams


def _images(a, name):
    a = check_array(a, allow_nd=True, ensure_2d=False, dtype=np.float64, input_name=name)
    if a.ndim == 3:
        a = a[:, None]
    if a.ndim != 4 or a.shape[1] != 1:
        raise ValueError(f"{name} must be (n, H, W) or (n, 1, H, W), got {a.shape}")
    return a


class PMPReconstructor(RegressorMixin, BaseEstimator):
    """Learns the regularizer of a gradient-flow reconstruction.

    ``X`` holds measurements and ``y`` the matching ground truth images, both
    shaped ``(n, H, W)`` or ``(n, 1, H, W)``. ``predict`` runs the learned flow
    from ``A^T b``.

    Fitted attributes: ``theta_`` (:class:`RegularizerParams`) and
    ``report_`` (:class:`solvers.TrainReport`).
    """

    def __init__(self, operator="identity", lam=0.05, rho=0.0, layers=4, channels=8,
                 init_scale=1.0, variant="control_flow", T=15, tau=0.2, eta=0.2, K=50,
                 paper_literal_signs=False, backtrack=4, seed=0, blur_size=5, blur_sigma=1.0,
                 mask_keep=0.4, warm_start=False):
        self.operator = operator
        self.lam = lam
        self.rho = rho
        self.layers = layers
        self.channels = channels
        self.init_scale = init_scale
        self.variant = variant
        self.T = T
        self.tau = tau
        self.eta = eta
        self.K = K
        self.paper_literal_signs = paper_literal_signs
        self.backtrack = backtrack
        self.seed = seed
        self.blur_size = blur_size
        self.blur_sigma = blur_sigma
        self.mask_keep = mask_keep
        self.warm_start = warm_start

    def _solver(self):
        return solvers.SolverConfig(T=self.T, tau=self.tau, eta=self.eta, K=self.K,
                                    variant=self.variant, seed=self.seed,
                                    paper_literal_signs=self.paper_literal_signs,
                                    backtrack=self.backtrack)

    def _problem(self, X, y=None):
        H, W = X.shape[-2:]
        op = datagen.make_operator(self.operator, H, W, seed=self.seed, blur_size=self.blur_size,
                                   blur_sigma=self.blur_sigma, mask_keep=self.mask_keep)
        return dynamics.ProblemInstance(op, X, y, lam=self.lam, rho=self.rho)

    def fit(self, X, y):
        X = _images(X, "X")
        y = _images(y, "y")
        if X.shape != y.shape:
            raise ValueError(f"X shape {X.shape} != y shape {y.shape}")
        cfg = self._solver()
        if self.warm_start and hasattr(self, "theta_"):
            theta0 = self.theta_
        else:
            theta0 = RegularizerParams.init(self.layers, self.channels, seed=self.seed,
                                            scale=self.init_scale)
        self.theta_, self.report_ = solvers.train(theta0, self._problem(X, y), cfg)
        self.image_shape_ = X.shape[-2:]
        return self

    def predict(self, X):
        check_is_fitted(self, "theta_")
        X = _images(X, "X")
        if X.shape[-2:] != tuple(self.image_shape_) and self.operator == "mask":
            raise ValueError(f"mask operator was fitted on {self.image_shape_} images")
        prob = self._problem(X)
        with np.errstate(over="ignore", invalid="ignore"):
            traj = solvers.forward_euler(prob.x0, self.theta_, prob, self._solver(), store=False)
        return traj.x_T

    def score(self, X, y, sample_weight=None):
        """Mean PSNR of the reconstructions in dB."""
        pred = self.predict(X)
        y = _images(y, "y")
        vals = np.array([psnr(p, t) for p, t in zip(pred, y)])
        return float(np.average(vals, weights=sample_weight))
