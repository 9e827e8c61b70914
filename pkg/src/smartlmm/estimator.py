"""Weighted pseudo-likelihood estimation of the mixed model.

The augmented data set holds one replicate per (subject, consistent DTR).
Replicates are grouped by their pattern of observed times, so every group
shares one marginal covariance matrix; the profiled objective is then
evaluated from per-group weighted sufficient statistics and costs nothing
that scales with the number of subjects.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.optimize import minimize

from .design import DtrIndex, SmartDesign, SubjectRecord
from .errors import IdentifiabilityError, NumericalError, ValidationError
from .model import (
    INTERCEPT_AND_SLOPE,
    MeanModel,
    RandomEffectsSpec,
    VarianceParams,
    build_X,
    build_X_batch,
    build_Z,
    marginal_covariance,
)
from .model import LOG_DIAG_FLOOR

log = logging.getLogger(__name__)

# a2 code used in integer arrays for "undefined"
A2_UNDEFINED = 0


def _dtr_sort_key(d: DtrIndex):
    return (d.a1, 0 if d.a2 is None else d.a2)


@dataclass
class PatternGroup:
    """Replicates sharing the same observed times."""

    times: np.ndarray
    X: np.ndarray  # (m, n, p)
    Y: np.ndarray  # (m, n)
    w: np.ndarray  # (m,)
    subject: np.ndarray  # (m,) index into AugmentedData.subject_ids
    dtr: np.ndarray  # (m,) index into AugmentedData.dtrs
    _stats: Optional[tuple] = field(default=None, repr=False)

    @property
    def stats(self):
        """Weighted sums Sxx[j,k,a,b] = sum W X_ja X_kb, Sxy[j,k,a] = sum W X_ja Y_k,
        Syy[j,k] = sum W Y_j Y_k and the weight total."""
        if self._stats is None:
            X, Y, w = self.X, self.Y, self.w
            m, n, p = X.shape
            wXf = (w[:, None, None] * X).reshape(m, n * p)
            Sxx = (wXf.T @ X.reshape(m, n * p)).reshape(n, p, n, p).transpose(0, 2, 1, 3)
            Sxy = (wXf.T @ Y).reshape(n, p, n).transpose(0, 2, 1)
            Syy = (w[:, None] * Y).T @ Y
            self._stats = (np.ascontiguousarray(Sxx), np.ascontiguousarray(Sxy), Syy, float(w.sum()))
        return self._stats

    @property
    def flat_stats(self):
        """``stats`` reshaped so that contractions with an n x n matrix are matrix products."""
        Sxx, Sxy, Syy, wsum = self.stats
        n, p = Sxx.shape[0], Sxx.shape[2]
        return Sxx.reshape(n * n, p * p), Sxy.reshape(n * n, p), Syy.reshape(n * n), wsum


@dataclass
class AugmentedData:
    groups: List[PatternGroup]
    subject_ids: List[str]
    dtrs: Tuple[DtrIndex, ...]
    column_names: Tuple[str, ...]

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_replicates(self) -> int:
        return int(sum(len(g.w) for g in self.groups))

    @property
    def p(self) -> int:
        return len(self.column_names)

    def weights(self) -> np.ndarray:
        return np.concatenate([g.w for g in self.groups])

    @classmethod
    def from_arrays(
        cls,
        times,
        Y,
        observed,
        a1,
        r,
        a2,
        covariates,
        design: SmartDesign,
        model: MeanModel,
        ids: Optional[Sequence[str]] = None,
    ) -> "AugmentedData":
        """Build from rectangular arrays over a common time grid.

        ``a2`` is an integer array using 0 for undefined.  Unobserved cells
        of ``Y`` are ignored.
        """
        times = np.asarray(times, dtype=float)
        Y = np.asarray(Y, dtype=float)
        observed = np.asarray(observed, dtype=bool)
        a1 = np.asarray(a1, dtype=int)
        r = np.asarray(r, dtype=int)
        a2 = np.asarray(a2, dtype=int)
        N = len(a1)
        cov = np.asarray(covariates, dtype=float).reshape(N, -1)
        if ids is None:
            ids = [str(i) for i in range(N)]
        if Y.shape != (N, len(times)) or observed.shape != Y.shape:
            raise ValidationError("Y and observed must be (N, n_times)")
        nobs = observed.sum(axis=1)
        if np.any(nobs == 0):
            bad = [ids[i] for i in np.flatnonzero(nobs == 0)[:5]]
            raise ValidationError(f"subjects with no observed outcome: {bad}")

        rerand = np.zeros(N, dtype=bool)
        for (c1, cr) in design.p_a2_given:
            rerand |= (a1 == c1) & (r == cr)
        if np.any(rerand & (a2 == A2_UNDEFINED)) or np.any(~rerand & (a2 != A2_UNDEFINED)):
            raise ValidationError("a2 must be defined exactly for subjects in re-randomized cells")

        dtrs = tuple(sorted(design.dtrs, key=_dtr_sort_key))
        # weights per (subject, dtr), vectorized version of design.design_weight
        W = np.zeros((N, len(dtrs)))
        for k, d in enumerate(dtrs):
            ind = a1 == d.a1
            ind &= ~rerand | (a2 == (d.a2 if d.a2 is not None else A2_UNDEFINED))
            p = np.full(N, design.prob_a1(d.a1))
            for (c1, cr), pa2 in design.p_a2_given.items():
                if c1 == d.a1:
                    cell = (a1 == c1) & (r == cr)
                    p = np.where(cell, p * (pa2 if d.a2 == 1 else 1.0 - pa2), p)
            W[:, k] = np.where(ind, 1.0 / p, 0.0)

        patterns, inverse = observation_patterns(observed)
        dtr_a1 = np.array([d.a1 for d in dtrs])
        dtr_a2 = np.array([A2_UNDEFINED if d.a2 is None else d.a2 for d in dtrs])
        groups = []
        for g, pat in enumerate(patterns):
            subj = np.flatnonzero(inverse == g)
            t_g = times[pat]
            sub_idx, dtr_idx = np.nonzero(W[subj] > 0)
            s_idx = subj[sub_idx]
            order = np.lexsort((dtr_idx, s_idx))
            s_idx, dtr_idx = s_idx[order], dtr_idx[order]
            d_a1, d_a2 = dtr_a1[dtr_idx], dtr_a2[dtr_idx]
            if model.kind == "custom-rowbuilder":
                X = np.stack(
                    [
                        build_X(model, t_g, dtrs[k], dict(zip(model.covariate_names, cov[i])))
                        for i, k in zip(s_idx, dtr_idx)
                    ]
                ) if len(s_idx) else np.empty((0, len(t_g), model.p))
            else:
                X = build_X_batch(model, t_g, d_a1, d_a2, cov[s_idx])
            groups.append(
                PatternGroup(
                    times=t_g,
                    X=X,
                    Y=Y[s_idx][:, pat],
                    w=W[s_idx, dtr_idx],
                    subject=s_idx,
                    dtr=dtr_idx,
                )
            )
        return cls(groups, list(ids), dtrs, model.column_names)

    @classmethod
    def from_subjects(
        cls, subjects: Sequence[SubjectRecord], design: SmartDesign, model: MeanModel
    ) -> "AugmentedData":
        if not subjects:
            raise ValidationError("no subjects")
        for s in subjects:
            design.check_subject(s)
        grid = np.unique(np.concatenate([s.times for s in subjects]))
        N, n = len(subjects), len(grid)
        Y = np.full((N, n), np.nan)
        obs = np.zeros((N, n), dtype=bool)
        for i, s in enumerate(subjects):
            cols = np.searchsorted(grid, s.times)
            Y[i, cols] = s.y
            obs[i, cols] = s.observed
        Y = np.where(obs, Y, 0.0)
        missing = [name for name in model.covariate_names if any(name not in s.covariates for s in subjects)]
        if missing:
            from .errors import SchemaError

            raise SchemaError(f"covariate(s) {missing} required by the mean model are missing")
        cov = np.array([[s.covariates[name] for name in model.covariate_names] for s in subjects]).reshape(N, -1)
        return cls.from_arrays(
            grid,
            Y,
            obs,
            [s.a1 for s in subjects],
            [s.r for s in subjects],
            [A2_UNDEFINED if s.a2 is None else s.a2 for s in subjects],
            cov,
            design,
            model,
            ids=[s.id for s in subjects],
        )


def observation_patterns(observed):
    """Distinct rows of a boolean mask and the pattern index of each row."""
    observed = np.asarray(observed, dtype=bool)
    n = observed.shape[1]
    if n <= 62:
        codes = observed.astype(np.int64) @ (np.int64(1) << np.arange(n, dtype=np.int64))
        _, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
        return observed[first], np.asarray(inverse).reshape(-1)
    patterns, inverse = np.unique(observed, axis=0, return_inverse=True)
    return patterns, np.asarray(inverse).reshape(-1)


CovarianceFn = Callable[[np.ndarray], np.ndarray]


_Z_CACHE: Dict[tuple, np.ndarray] = {}


def _cached_Z(re_spec: RandomEffectsSpec, times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    key = (re_spec, times.tobytes())
    Z = _Z_CACHE.get(key)
    if Z is None:
        if len(_Z_CACHE) > 4096:
            _Z_CACHE.clear()
        Z = _Z_CACHE[key] = build_Z(re_spec, times)
    return Z


def lmm_covariance_fn(params: VarianceParams, re_spec: RandomEffectsSpec) -> CovarianceFn:
    L, s2 = params.cholesky, params.sigma2

    def cov(times):
        ZL = _cached_Z(re_spec, times) @ L
        V = ZL @ ZL.T
        V.flat[:: len(V) + 1] += s2
        return V

    return cov


def _cho(V):
    try:
        return linalg.cho_factor(V, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericalError("marginal covariance is not positive definite") from exc


def _inverse_and_logdet(V):
    """V^-1 and log det V from one Cholesky factorization."""
    try:
        L = np.linalg.cholesky(V)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("marginal covariance is not positive definite") from exc
    Linv = linalg.solve_triangular(L, np.eye(len(V)), lower=True, check_finite=False)
    return Linv.T @ Linv, 2.0 * float(np.sum(np.log(np.diag(L))))


def _gram(data: AugmentedData, cov_fn: CovarianceFn):
    """Weighted H = sum W X'V^-1 X, c = sum W X'V^-1 Y, plus log-det and Y'V^-1Y totals."""
    p = data.p
    H = np.zeros(p * p)
    c = np.zeros(p)
    logdet = 0.0
    yay = 0.0
    for g in data.groups:
        if len(g.w) == 0:
            continue
        Sxx, Sxy, Syy, wsum = g.flat_stats
        A, ld = _inverse_and_logdet(cov_fn(g.times))
        a = A.reshape(-1)
        H += a @ Sxx
        c += a @ Sxy
        yay += float(a @ Syy)
        logdet += wsum * ld
    H = H.reshape(p, p)
    return 0.5 * (H + H.T), c, logdet, yay


def _solve_beta(H, c, names):
    try:
        L = np.linalg.cholesky(H)
        if np.min(np.diag(L)) ** 2 < 1e-12 * np.max(np.diag(H)):
            raise np.linalg.LinAlgError
        z = linalg.solve_triangular(L, c, lower=True, check_finite=False)
        return linalg.solve_triangular(L.T, z, lower=False, check_finite=False)
    except np.linalg.LinAlgError:
        raise IdentifiabilityError(_null_columns(H, names)) from None


def _null_columns(H, names):
    scale = np.sqrt(np.maximum(np.diag(H), 1e-300))
    Hs = H / np.outer(scale, scale)
    vals, vecs = np.linalg.eigh(Hs)
    bad = set(np.flatnonzero(np.diag(H) <= 1e-12 * max(np.max(np.diag(H)), 1e-300)))
    tol = 1e-10 * max(vals[-1], 1e-300)
    for k in np.flatnonzero(vals <= tol):
        v = np.abs(vecs[:, k])
        bad |= set(np.flatnonzero(v > 0.1 * v.max()))
    return [names[j] for j in sorted(bad)] or list(names)


def pseudo_loglik(beta, params: VarianceParams, data: AugmentedData, re_spec: RandomEffectsSpec = INTERCEPT_AND_SLOPE):
    """-1/2 sum W (log det V + r'V^-1 r) over replicates and observed rows."""
    return _loglik_direct(np.asarray(beta, dtype=float), data, lmm_covariance_fn(params, re_spec))


def _loglik_direct(beta, data: AugmentedData, cov_fn: CovarianceFn) -> float:
    total = 0.0
    for g in data.groups:
        if len(g.w) == 0:
            continue
        cf = _cho(cov_fn(g.times))
        ld = 2.0 * np.sum(np.log(np.diag(cf[0])))
        R = g.Y - g.X @ beta
        AR = linalg.cho_solve(cf, R.T, check_finite=False).T
        quad = np.einsum("mj,mj->m", R, AR)
        total += float(np.sum(g.w * (ld + quad)))
    return -0.5 * total


def profile_beta(params: VarianceParams, data: AugmentedData, re_spec: RandomEffectsSpec = INTERCEPT_AND_SLOPE):
    """beta(alpha) = (sum W X'V^-1 X)^-1 sum W X'V^-1 Y."""
    return beta_given_covariance(data, lmm_covariance_fn(params, re_spec))


def beta_given_covariance(data: AugmentedData, cov_fn: CovarianceFn) -> np.ndarray:
    H, c, _, _ = _gram(data, cov_fn)
    return _solve_beta(H, c, data.column_names)


def ols_beta(data: AugmentedData) -> np.ndarray:
    """Weighted least squares with V = I."""
    return beta_given_covariance(data, lambda t: np.eye(len(t)))


def profiled_loglik(params: VarianceParams, data: AugmentedData, re_spec: RandomEffectsSpec = INTERCEPT_AND_SLOPE):
    """l(beta(alpha), alpha)."""
    return -_neg_profiled(params.to_vector(), data, re_spec)


def _neg_profiled(x, data, re_spec):
    params = VarianceParams.from_vector(x)
    H, c, logdet, yay = _gram(data, lmm_covariance_fn(params, re_spec))
    beta = _solve_beta(H, c, data.column_names)
    return 0.5 * (logdet + yay - beta @ c)


def _neg_profiled_grad(x, data, re_spec):
    """Gradient of the negative profiled objective in the unconstrained parameters.

    By the envelope theorem beta(alpha) contributes nothing, so
    d/dV [1/2 sum W (log det V + r'V^-1 r)] = 1/2 (W A - A S A) per pattern group,
    with A = V^-1 and S = sum W r r'.
    """
    params = VarianceParams.from_vector(x)
    cov_fn = lmm_covariance_fn(params, re_spec)
    H, c, _, _ = _gram(data, cov_fn)
    beta = _solve_beta(H, c, data.column_names)
    q = re_spec.q
    gG = np.zeros((q, q))
    gs = 0.0
    for g in data.groups:
        if len(g.w) == 0:
            continue
        Sxx, Sxy, Syy, wsum = g.stats
        Sxb = Sxy @ beta  # (j, k): sum W X_j.beta Y_k
        S = Syy - Sxb - Sxb.T + np.einsum("jkab,a,b->jk", Sxx, beta, beta)
        A = linalg.cho_solve(_cho(cov_fn(g.times)), np.eye(len(g.times)), check_finite=False)
        gV = 0.5 * (wsum * A - A @ S @ A)
        Z = build_Z(re_spec, g.times)
        gG += Z.T @ gV @ Z
        gs += float(np.trace(gV))
    L = params.cholesky
    gL = np.tril(2.0 * gG @ L)
    raw = np.zeros((q, q))
    raw[np.tril_indices(q)] = params.g_lower
    diag = np.diag_indices(q)
    gL[diag] *= np.where(raw[diag] > LOG_DIAG_FLOOR, L[diag], 0.0)
    return np.append(gL[np.tril_indices(q)], gs * params.sigma2)


def score_contributions(data: AugmentedData, beta, cov_fn: CovarianceFn) -> np.ndarray:
    """Per-subject U_i, summed over the subject's replicates; shape (N, p)."""
    U = np.zeros((data.n_subjects, data.p))
    for g in data.groups:
        if len(g.w) == 0:
            continue
        cf = _cho(cov_fn(g.times))
        R = g.Y - g.X @ beta
        AR = linalg.cho_solve(cf, R.T, check_finite=False).T
        Ur = g.w[:, None] * np.einsum("mja,mj->ma", g.X, AR)
        np.add.at(U, g.subject, Ur)
    return U


def sandwich(data: AugmentedData, beta, cov_fn: CovarianceFn):
    """(1/N) J^-1 I J^-1 with I, J the plug-in estimates; also returns sum_i U_i."""
    H, _, _, _ = _gram(data, cov_fn)
    U = score_contributions(data, beta, cov_fn)
    Hinv = linalg.inv(H)
    meat = U.T @ U
    cov = Hinv @ meat @ Hinv
    return 0.5 * (cov + cov.T), U.sum(axis=0)


@dataclass(frozen=True)
class FitResult:
    beta_hat: np.ndarray
    alpha_hat: object  # VarianceParams for the mixed model, WorkingCovariance for GEE
    sandwich_cov: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    score_norm: float
    column_names: Tuple[str, ...]
    n_subjects: int
    n_replicates: int
    estimator: str = "lmm"
    re_spec: Optional[RandomEffectsSpec] = None
    at_boundary: bool = False
    message: str = ""
    weights: Optional[np.ndarray] = None

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sandwich_cov), 0.0, None))

    @property
    def G(self) -> Optional[np.ndarray]:
        return self.alpha_hat.G if isinstance(self.alpha_hat, VarianceParams) else None

    @property
    def sigma2(self) -> Optional[float]:
        return self.alpha_hat.sigma2 if isinstance(self.alpha_hat, VarianceParams) else None

    def covariance_fn(self) -> CovarianceFn:
        if isinstance(self.alpha_hat, VarianceParams):
            return lmm_covariance_fn(self.alpha_hat, self.re_spec)
        return self.alpha_hat.matrix

    def implied_covariance(self, times) -> np.ndarray:
        return self.covariance_fn()(np.asarray(times, dtype=float))


@dataclass(frozen=True)
class OptimizerSettings:
    rel_ftol: float = 1e-10
    xatol: float = 1e-8
    maxiter: int = 2000
    initial_step: float = 0.5
    polish: bool = True
    polish_gtol: float = 1e-11
    polish_steps: int = 6


def initial_params(data: AugmentedData, re_spec: RandomEffectsSpec) -> VarianceParams:
    """sigma2_0 from the weighted OLS residual variance; G_0 = 0.1 sigma2_0 I."""
    beta0 = ols_beta(data)
    num = sum(float(np.sum(g.w[:, None] * (g.Y - g.X @ beta0) ** 2)) for g in data.groups)
    den = sum(float(np.sum(g.w) * len(g.times)) for g in data.groups)
    s2 = max(num / den, 1e-8)
    return VarianceParams.from_covariance(0.1 * s2 * np.eye(re_spec.q), s2)


def _canonical(x, q):
    """Raise log-Cholesky diagonals below the clamp to the clamp (same G)."""
    x = np.array(x, dtype=float)
    diag_pos = [i * (i + 1) // 2 + i for i in range(q)]
    x[diag_pos] = np.maximum(x[diag_pos], LOG_DIAG_FLOOR)
    return x


def _newton_polish(x, f, data, re_spec, settings):
    """A few Newton steps on the analytic gradient.

    The simplex stops once function values stop changing, which happens
    before the parameters are pinned to full precision.  Coordinates at the
    clamp are held fixed.  A step is kept only if it does not worsen the
    objective beyond rounding.
    """
    q = re_spec.q
    diag_pos = [i * (i + 1) // 2 + i for i in range(q)]
    free = np.ones(len(x), dtype=bool)
    free[[i for i in diag_pos if x[i] <= LOG_DIAG_FLOOR + 1e-6]] = False
    idx = np.flatnonzero(free)
    h = 1e-5
    for _ in range(settings.polish_steps):
        try:
            g = _neg_profiled_grad(x, data, re_spec)[idx]
            if np.max(np.abs(g)) <= settings.polish_gtol * max(1.0, abs(f)):
                break
            Hm = np.empty((len(idx), len(idx)))
            for a, k in enumerate(idx):
                e = np.zeros(len(x))
                e[k] = h
                Hm[:, a] = (_neg_profiled_grad(x + e, data, re_spec)[idx] - _neg_profiled_grad(x - e, data, re_spec)[idx]) / (2 * h)
            Hm = 0.5 * (Hm + Hm.T)
            step = -linalg.solve(Hm, g, assume_a="pos")
        except (linalg.LinAlgError, NumericalError, IdentifiabilityError):
            break
        x_new = x.copy()
        x_new[idx] += step
        x_new = _canonical(x_new, q)
        try:
            f_new = _neg_profiled(x_new, data, re_spec)
        except (NumericalError, IdentifiabilityError):
            break
        if not np.isfinite(f_new) or f_new > f + 1e-12 * max(1.0, abs(f)):
            break
        x, f = x_new, f_new
    return x, float(f)


def fit(
    data: AugmentedData,
    re_spec: RandomEffectsSpec = INTERCEPT_AND_SLOPE,
    settings: OptimizerSettings = OptimizerSettings(),
    start: Optional[VarianceParams] = None,
) -> FitResult:
    """Maximize the profiled pseudo-likelihood over the variance parameters."""
    x0 = (start or initial_params(data, re_spec)).to_vector()
    f0 = _neg_profiled(x0, data, re_spec)
    k = len(x0)
    simplex = np.vstack([x0, x0 + settings.initial_step * np.eye(k)])
    res = minimize(
        _neg_profiled,
        x0,
        args=(data, re_spec),
        method="Nelder-Mead",
        options=dict(
            initial_simplex=simplex,
            xatol=settings.xatol,
            fatol=settings.rel_ftol * max(1.0, abs(f0)),
            maxiter=settings.maxiter,
            maxfev=20 * settings.maxiter,
        ),
    )
    x_hat, f_hat = _canonical(res.x, re_spec.q), float(res.fun)
    if settings.polish:
        x_hat, f_hat = _newton_polish(x_hat, f_hat, data, re_spec, settings)
    params = VarianceParams.from_vector(x_hat)
    cov_fn = lmm_covariance_fn(params, re_spec)
    beta = beta_given_covariance(data, cov_fn)
    sw, score = sandwich(data, beta, cov_fn)
    if not res.success:
        log.warning("variance optimizer did not converge: %s", res.message)
    return FitResult(
        beta_hat=beta,
        alpha_hat=params,
        sandwich_cov=sw,
        loglik=-f_hat,
        iterations=int(res.nit),
        converged=bool(res.success),
        score_norm=float(np.linalg.norm(score)),
        column_names=data.column_names,
        n_subjects=data.n_subjects,
        n_replicates=data.n_replicates,
        estimator=f"lmm-{re_spec.kind}",
        re_spec=re_spec,
        at_boundary=params.at_boundary,
        message=str(res.message),
        weights=data.weights(),
    )


def fit_subjects(
    subjects: Sequence[SubjectRecord],
    design: SmartDesign,
    model: MeanModel,
    re_spec: RandomEffectsSpec = INTERCEPT_AND_SLOPE,
    **kwargs,
) -> FitResult:
    return fit(AugmentedData.from_subjects(subjects, design, model), re_spec, **kwargs)
