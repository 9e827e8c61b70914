"""Linear contrasts, pairwise DTR comparisons, the AUC omnibus test and
standardized effect sizes."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import chi2, norm

from .design import DtrIndex, SmartDesign
from .errors import SchemaError, ValidationError
from .estimator import FitResult
from .model import MeanModel, build_X

_RANK_TOL = 1e-10


@dataclass(frozen=True)
class ContrastResult:
    """Wald summary of one linear combination (or a block of them).

    For a multi-row contrast ``estimate`` and ``se`` are NaN and the test
    is carried by ``statistic`` (chi-square) and ``dof``.
    """

    estimate: float
    se: float
    ci_low: float
    ci_high: float
    statistic: float
    dof: int
    p_value: float
    level: float = 0.95
    label: str = ""
    time: Optional[float] = None

    def to_dict(self) -> dict:
        return dict(
            label=self.label,
            time=self.time,
            estimate=self.estimate,
            se=self.se,
            ci_low=self.ci_low,
            ci_high=self.ci_high,
            statistic=self.statistic,
            dof=self.dof,
            p_value=self.p_value,
            level=self.level,
        )


def _check_level(level):
    if not 0.0 < level < 1.0:
        raise ValidationError(f"confidence level must lie in (0, 1), got {level}")


def linear_contrast(fit: FitResult, c, level: float = 0.95, label: str = "", time=None) -> ContrastResult:
    """Estimate c'beta with sandwich SE and a Wald normal interval."""
    _check_level(level)
    c = np.asarray(c, dtype=float).reshape(-1)
    if c.shape[0] != len(fit.beta_hat):
        raise SchemaError(f"contrast has length {c.shape[0]}, model has {len(fit.beta_hat)} coefficients")
    est = float(c @ fit.beta_hat)
    var = float(c @ fit.sandwich_cov @ c)
    se = float(np.sqrt(max(var, 0.0)))
    z = norm.ppf(0.5 + level / 2.0)
    if se > 0:
        stat = (est / se) ** 2
        p = float(chi2.sf(stat, 1))
    else:
        stat, p = 0.0, 1.0
    return ContrastResult(est, se, est - z * se, est + z * se, float(stat), 1, p, level, label, time)


def wald_test(fit: FitResult, M, label: str = "") -> ContrastResult:
    """Chi-square test of M beta = 0 using the sandwich covariance.

    A singular M Sigma M' is handled with a pseudo-inverse and the degrees
    of freedom are reduced to its numerical rank (with a warning).
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] != len(fit.beta_hat):
        raise SchemaError(f"contrast matrix has {M.shape[1]} columns, model has {len(fit.beta_hat)} coefficients")
    est = M @ fit.beta_hat
    S = M @ fit.sandwich_cov @ M.T
    S = 0.5 * (S + S.T)
    vals, vecs = np.linalg.eigh(S)
    keep = vals > _RANK_TOL * max(vals.max(initial=0.0), 1e-300)
    rank = int(keep.sum())
    if rank < M.shape[0]:
        warnings.warn(
            f"contrast covariance has rank {rank} < {M.shape[0]} rows; degrees of freedom reduced", RuntimeWarning
        )
    if rank == 0:
        return ContrastResult(np.nan, np.nan, np.nan, np.nan, 0.0, 0, 1.0, label=label)
    proj = vecs[:, keep].T @ est
    stat = float(np.sum(proj**2 / vals[keep]))
    return ContrastResult(np.nan, np.nan, np.nan, np.nan, stat, rank, float(chi2.sf(stat, rank)), label=label)


def _zero_covariates(model: MeanModel) -> dict:
    return {name: 0.0 for name in model.covariate_names}


def mean_row(model: MeanModel, dtr: DtrIndex, time: float) -> np.ndarray:
    """Design row of E[Y_t(dtr)] with covariates at their centered value 0."""
    return build_X(model, [float(time)], dtr, _zero_covariates(model))[0]


def auc_row(model: MeanModel, dtr: DtrIndex, t0: float, t1: float) -> np.ndarray:
    """Row vector a such that a'beta = integral of the mean over [t0, t1].

    Every column is linear between consecutive breakpoints, so the
    trapezoid rule on the breakpoints is exact.
    """
    if not t1 > t0:
        raise ValidationError(f"AUC window must satisfy t0 < t1, got [{t0}, {t1}]")
    pts = model.breakpoints(t0, t1)
    X = build_X(model, pts, dtr, _zero_covariates(model))
    dt = np.diff(pts)
    return np.sum(0.5 * dt[:, None] * (X[:-1] + X[1:]), axis=0)


def omnibus_auc_test(
    fit: FitResult, model: MeanModel, design: SmartDesign, window: Optional[Tuple[float, float]] = None
) -> ContrastResult:
    """Chi-square test that all embedded DTRs share the same area under the
    mean curve over ``window`` (rows: AUC(dtr_k) - AUC(dtr_1))."""
    if design.n_dtrs < 2:
        raise ValidationError("omnibus test needs at least two DTRs")
    if window is None:
        raise ValidationError("omnibus test needs a time window")
    t0, t1 = float(window[0]), float(window[1])
    rows = [auc_row(model, d, t0, t1) for d in design.dtrs]
    M = np.array([r - rows[0] for r in rows[1:]])
    return wald_test(fit, M, label=f"AUC[{t0:g},{t1:g}]")


def pairwise_contrasts(
    fit: FitResult, model: MeanModel, design: SmartDesign, times: Sequence[float], level: float = 0.95
) -> List[ContrastResult]:
    """E[Y_t(d_i)] - E[Y_t(d_j)] for every DTR pair i < j and every time.

    Intervals are pointwise (no multiplicity adjustment).
    """
    out = []
    for di, dj in itertools.combinations(design.dtrs, 2):
        for t in times:
            c = mean_row(model, di, t) - mean_row(model, dj, t)
            out.append(linear_contrast(fit, c, level, label=f"{di.label()} - {dj.label()}", time=float(t)))
    return out


def effect_size_d(mean_difference: float, var_1: float, var_2: float) -> float:
    """d = difference / sqrt(var_1/2 + var_2/2)."""
    if var_1 < 0 or var_2 < 0 or var_1 + var_2 <= 0:
        raise ValidationError("effect size needs positive variances")
    return float(mean_difference / np.sqrt(0.5 * var_1 + 0.5 * var_2))


def effect_size_from_fit(fit: FitResult, model: MeanModel, pair: Tuple[DtrIndex, DtrIndex], time: float) -> float:
    """d using the fitted mean difference and the model-implied variance at ``time``.

    The estimation models use one covariance for every DTR, so both arms
    share the same variance.
    """
    c = mean_row(model, pair[0], time) - mean_row(model, pair[1], time)
    v = float(fit.implied_covariance([float(time)])[0, 0])
    return effect_size_d(float(c @ fit.beta_hat), v, v)
