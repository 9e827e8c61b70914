"""Weighted empirical-Bayes prediction of random effects and person-specific
trajectories."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .design import DtrIndex, SmartDesign, SubjectRecord, design_weight
from .errors import InsufficientDataError, ValidationError
from .estimator import FitResult
from .model import MeanModel, VarianceParams, build_X, build_Z

DEFAULT_GRID_POINTS = 50
_G_ZERO_TOL = 1e-12


@dataclass
class SubjectPrediction:
    """Predicted random effects and fitted curves for one subject.

    ``trajectories[dtr]`` holds X(dtr) beta + Z b on ``grid``; it exists
    exactly for the DTRs the subject is consistent with.
    ``posterior_cov[dtr]`` is G - G Z' V^-1 Z G over the observed times.
    """

    id: str
    b_hat: np.ndarray
    grid: np.ndarray
    trajectories: Dict[DtrIndex, np.ndarray]
    posterior_cov: Dict[DtrIndex, np.ndarray] = field(default_factory=dict)
    weights: Dict[DtrIndex, float] = field(default_factory=dict)
    g_at_boundary: bool = False

    def rows(self):
        """Long-format rows (id, dtr, time, fitted)."""
        for d, traj in self.trajectories.items():
            for t, v in zip(self.grid, traj):
                yield dict(id=self.id, dtr=d.label(), time=float(t), fitted=float(v))


def default_grid(subject: SubjectRecord, n_points: int = DEFAULT_GRID_POINTS) -> np.ndarray:
    """Observed times together with an even grid spanning the subject's schedule."""
    t = subject.times
    return np.union1d(t[subject.observed], np.linspace(t.min(), t.max(), n_points))


def predict_random_effects(
    fit: FitResult,
    subject: SubjectRecord,
    model: MeanModel,
    design: SmartDesign,
    grid: Optional[Sequence[float]] = None,
) -> SubjectPrediction:
    """b_hat = sum_d W_d G Z' V^-1 (y - X_d beta) / sum_d W_d over consistent DTRs,
    using observed rows only."""
    params = fit.alpha_hat
    if not isinstance(params, VarianceParams) or fit.re_spec is None:
        raise ValidationError("random-effect prediction needs a mixed-model fit")
    obs = subject.observed
    if not obs.any():
        raise InsufficientDataError(f"subject {subject.id} has no observed outcome")
    t_obs = subject.times[obs]
    y = subject.y[obs]
    G = params.G
    Z = build_Z(fit.re_spec, t_obs)
    V = Z @ G @ Z.T + params.sigma2 * np.eye(len(t_obs))
    cf = cho_factor(V, lower=True)
    VinvZ = cho_solve(cf, Z)
    GZtVinv = G @ VinvZ.T

    weights, terms, post = {}, {}, {}
    for d in design.dtrs:
        w = design_weight(subject, d, design)
        if w == 0.0:
            continue
        X = build_X(model, t_obs, d, subject.covariates)
        weights[d] = w
        terms[d] = GZtVinv @ (y - X @ fit.beta_hat)
        post[d] = G - GZtVinv @ Z @ G
    total = sum(weights.values())
    boundary = bool(np.max(np.abs(G)) <= _G_ZERO_TOL * max(params.sigma2, 1.0))
    if boundary:
        b = np.zeros(fit.re_spec.q)
    else:
        b = sum(weights[d] * terms[d] for d in weights) / total

    grid = default_grid(subject) if grid is None else np.asarray(grid, dtype=float)
    Zg = build_Z(fit.re_spec, grid)
    traj = {d: build_X(model, grid, d, subject.covariates) @ fit.beta_hat + Zg @ b for d in weights}
    return SubjectPrediction(subject.id, b, grid, traj, post, weights, boundary)


def predict_all(fit, subjects, model, design, grid=None):
    return [predict_random_effects(fit, s, model, design, grid) for s in subjects]
