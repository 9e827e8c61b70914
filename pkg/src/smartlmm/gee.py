"""GEE-style comparator: OLS pre-fit, moment-estimated working covariance,
then one weighted generalized least squares solve with sandwich inference.

All moment estimators are computed separately under each embedded DTR from
the weighted pre-fit residuals, then averaged with equal weight over DTRs.
Counts N_t and N_ts are unweighted numbers of subjects observed at t (and s).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import InsufficientDataError, ValidationError
from .estimator import AugmentedData, FitResult, _loglik_direct, beta_given_covariance, ols_beta, sandwich

KINDS = ("unstructured", "exchangeable", "independence", "ar1")


@dataclass(frozen=True)
class WorkingCovariance:
    """Moment-estimated working covariance on the study's time grid.

    ``ar1`` uses the occasion index (rank on the grid) as the lag, not
    elapsed time.
    """

    kind: str
    times: np.ndarray
    per_time_variances: np.ndarray  # sigma_t^2
    pooled_variance: float  # sigma^2
    rho_ts: np.ndarray  # unstructured correlations
    rho: float  # pairwise-averaged exchangeable correlation (exposed, unused by the named kinds)
    psi: float  # pooled exchangeable correlation
    tau: float  # AR(1) lag-one correlation, pooled variance scaling
    tau_t: float  # AR(1) lag-one correlation, time-specific variance scaling

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown working covariance {self.kind!r}")

    def full_matrix(self) -> np.ndarray:
        n = len(self.times)
        if self.kind == "unstructured":
            sd = np.sqrt(self.per_time_variances)
            V = np.outer(sd, sd) * self.rho_ts
            np.fill_diagonal(V, self.per_time_variances)
            return V
        s2 = self.pooled_variance
        if self.kind == "independence":
            return s2 * np.eye(n)
        if self.kind == "exchangeable":
            return s2 * ((1.0 - self.psi) * np.eye(n) + self.psi * np.ones((n, n)))
        k = np.arange(n)
        return s2 * self.tau ** np.abs(k[:, None] - k[None, :])

    def matrix(self, times) -> np.ndarray:
        """Working covariance restricted to ``times`` (a subset of the grid)."""
        times = np.asarray(times, dtype=float)
        idx = np.searchsorted(self.times, times)
        if np.any(idx >= len(self.times)) or not np.allclose(self.times[np.minimum(idx, len(self.times) - 1)], times):
            raise ValidationError("requested times are not on the working-covariance grid")
        return self.full_matrix()[np.ix_(idx, idx)]

    def summary(self) -> dict:
        return dict(
            kind=self.kind,
            pooled_variance=self.pooled_variance,
            per_time_variances=self.per_time_variances.tolist(),
            psi=self.psi,
            rho=self.rho,
            tau=self.tau,
        )


@dataclass
class ResidualTable:
    """Pre-fit residuals on the full grid: one slice per (subject, DTR).

    ``r[i, d, :]`` and ``w[i, d]`` (0 when subject i is inconsistent with
    DTR d); ``obs[i, :]`` marks observed times.
    """

    times: np.ndarray
    r: np.ndarray
    w: np.ndarray
    obs: np.ndarray


def residual_table(data: AugmentedData, beta) -> ResidualTable:
    grid = np.unique(np.concatenate([g.times for g in data.groups]))
    N, D, n = data.n_subjects, len(data.dtrs), len(grid)
    r = np.zeros((N, D, n))
    w = np.zeros((N, D))
    obs = np.zeros((N, n), dtype=bool)
    for g in data.groups:
        cols = np.searchsorted(grid, g.times)
        res = g.Y - g.X @ beta
        r[g.subject[:, None], g.dtr[:, None], cols[None, :]] = res
        w[g.subject, g.dtr] = g.w
        obs[np.ix_(g.subject, cols)] = True
    return ResidualTable(grid, r, w, obs)


def ols_prefit(data: AugmentedData) -> np.ndarray:
    """(sum W X'X)^-1 sum W X'Y."""
    return ols_beta(data)


def _clip_corr(value, name):
    if np.any(np.abs(value) > 1.0):
        warnings.warn(f"{name} estimate outside [-1, 1]; clipped", RuntimeWarning, stacklevel=3)
    return np.clip(value, -1.0, 1.0)


def moment_estimates(table: ResidualTable) -> dict:
    """Every moment estimator, per DTR and averaged over DTRs."""
    r, w, obs = table.r, table.w, table.obs
    N, D, n = r.shape
    Nt = obs.sum(axis=0).astype(float)
    Nts = (obs[:, :, None] & obs[:, None, :]).sum(axis=0).astype(float)
    empty = np.flatnonzero(Nt == 0)
    if empty.size:
        raise InsufficientDataError(f"no observations at time {table.times[empty[0]]}")
    ro = np.where(obs[:, None, :], r, 0.0)
    # sigma_t^2(d) = sum_i W r_it^2 / N_t
    s2_t_d = np.einsum("id,idt->dt", w, ro**2) / Nt[None, :]
    s2_d = (s2_t_d * Nt[None, :]).sum(axis=1) / Nt.sum()
    if np.any(s2_t_d <= 0):
        raise InsufficientDataError("zero residual variance at some time point")
    sd_t_d = np.sqrt(s2_t_d)
    cross = np.einsum("id,ids,idt->dst", w, ro, ro)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho_ts_d = cross / (Nts[None, :, :] * sd_t_d[:, :, None] * sd_t_d[:, None, :])
    rho_ts_d = np.where(Nts[None] > 0, rho_ts_d, 0.0)

    ni = obs.sum(axis=1).astype(float)
    npairs = ni * (ni - 1) / 2
    inv_pairs = np.where(npairs > 0, 1.0 / np.maximum(npairs, 1), 0.0)
    upper = np.triu(np.ones((n, n), dtype=bool), 1)
    z = ro / np.where(sd_t_d[None] > 0, sd_t_d[None], 1.0)
    pair_std = np.einsum("ids,idt,st->id", z, z, upper)
    pair_raw = np.einsum("ids,idt,st->id", ro, ro, upper)
    rho_d = np.einsum("id,i,id->d", w, inv_pairs, pair_std) / N
    psi_d = np.einsum("id,i,id->d", w, inv_pairs, pair_raw) / N / s2_d

    # lag-one products between consecutive observations of each subject
    lag_std = np.zeros((N, D))
    lag_raw = np.zeros((N, D))
    patterns, inverse = np.unique(obs, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    for k, pat in enumerate(patterns):
        idx = np.flatnonzero(pat)
        if len(idx) < 2:
            continue
        rows = inverse == k
        a, b = idx[:-1], idx[1:]
        lag_raw[rows] = np.sum(ro[rows][:, :, a] * ro[rows][:, :, b], axis=2)
        lag_std[rows] = np.sum(z[rows][:, :, a] * z[rows][:, :, b], axis=2)
    inv_lags = np.where(ni > 1, 1.0 / np.maximum(ni - 1, 1), 0.0)
    tau_t_d = np.einsum("id,i,id->d", w, inv_lags, lag_std) / N
    tau_d = np.einsum("id,i,id->d", w, inv_lags, lag_raw) / N / s2_d

    rho_ts = rho_ts_d.mean(axis=0)
    np.fill_diagonal(rho_ts, 1.0)
    return dict(
        Nt=Nt,
        Nts=Nts,
        sigma2_t_dtr=s2_t_d,
        sigma2_dtr=s2_d,
        rho_ts_dtr=rho_ts_d,
        rho_dtr=rho_d,
        psi_dtr=psi_d,
        tau_t_dtr=tau_t_d,
        tau_dtr=tau_d,
        sigma2_t=s2_t_d.mean(axis=0),
        sigma2=float(s2_d.mean()),
        rho_ts=rho_ts,
        rho=float(rho_d.mean()),
        psi=float(psi_d.mean()),
        tau_t=float(tau_t_d.mean()),
        tau=float(tau_d.mean()),
    )


def moment_covariance(kind: str, table: ResidualTable) -> WorkingCovariance:
    m = moment_estimates(table)
    return WorkingCovariance(
        kind=kind,
        times=table.times,
        per_time_variances=m["sigma2_t"],
        pooled_variance=m["sigma2"],
        rho_ts=_clip_corr(m["rho_ts"], "rho_ts"),
        rho=float(_clip_corr(m["rho"], "rho")),
        psi=float(_clip_corr(m["psi"], "psi")) if kind == "exchangeable" else float(np.clip(m["psi"], -1, 1)),
        tau=float(_clip_corr(m["tau"], "tau")) if kind == "ar1" else float(np.clip(m["tau"], -1, 1)),
        tau_t=float(np.clip(m["tau_t"], -1, 1)),
    )


def gee_fit(kind: str, data: AugmentedData) -> FitResult:
    """One-step estimator: OLS residuals -> moment covariance -> weighted GLS."""
    beta0 = ols_prefit(data)
    work = moment_covariance(kind, residual_table(data, beta0))
    V = work.full_matrix()
    if np.min(np.linalg.eigvalsh(V)) <= 0:
        warnings.warn(f"{kind} working covariance is not positive definite; eigenvalues floored", RuntimeWarning)
        vals, vecs = np.linalg.eigh(V)
        V = (vecs * np.maximum(vals, 1e-8 * vals.max())) @ vecs.T
        work = _with_matrix(work, V)
    cov_fn = work.matrix
    beta = beta_given_covariance(data, cov_fn)
    sw, score = sandwich(data, beta, cov_fn)
    return FitResult(
        beta_hat=beta,
        alpha_hat=work,
        sandwich_cov=sw,
        loglik=_loglik_direct(beta, data, cov_fn),
        iterations=1,
        converged=True,
        score_norm=float(np.linalg.norm(score)),
        column_names=data.column_names,
        n_subjects=data.n_subjects,
        n_replicates=data.n_replicates,
        estimator=f"gee-{kind}",
        weights=data.weights(),
    )


@dataclass(frozen=True)
class _FixedWorking(WorkingCovariance):
    fixed: Optional[np.ndarray] = None

    def full_matrix(self) -> np.ndarray:
        return self.fixed


def _with_matrix(work: WorkingCovariance, V) -> WorkingCovariance:
    fields_ = {k: getattr(work, k) for k in WorkingCovariance.__dataclass_fields__}
    return _FixedWorking(**fields_, fixed=V)
