"""Design matrices X(a1, a2), Z and the implied marginal covariance.

Mean models are lists of terms.  A term is a product of factors joined by
``:``; the factors are

=========  ==============================================
``1``      intercept
``t``      time
``t_pre``  time clipped at the knot, ``min(t, knot)``
``t_post`` time past the knot, ``max(t - knot, 0)``
``a1``     stage-1 code (+1/-1)
``a2``     stage-2 code, 0 when undefined
``a1pos``  indicator a1 == +1
``a1neg``  indicator a1 == -1
other      a baseline covariate, looked up by name
=========  ==============================================
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .design import DtrIndex
from .errors import SchemaError, ValidationError

_TIME_FACTORS = ("t", "t_pre", "t_post")
_DTR_FACTORS = ("a1", "a2", "a1pos", "a1neg")
_BUILTIN = ("1",) + _TIME_FACTORS + _DTR_FACTORS

AUTISM_TERMS = ("1", "t_pre", "t_pre:a1", "t_post", "t_post:a1", "t_post:a1pos:a2")
SYMMETRIC_TERMS = ("1", "t_pre", "t_pre:a1", "t_post", "t_post:a1", "t_post:a2", "t_post:a1:a2")

RowBuilder = Callable[[float, DtrIndex, Mapping[str, float]], Sequence[float]]


@dataclass(frozen=True)
class MeanModel:
    """Marginal mean model.

    ``kind="piecewise-linear-knot"`` uses ``terms`` followed by one additive
    column per covariate.  ``kind="custom-rowbuilder"`` calls ``row_builder``
    once per time point and needs ``column_names``.
    """

    terms: Tuple[str, ...] = SYMMETRIC_TERMS
    knot: float = 0.0
    covariate_names: Tuple[str, ...] = ()
    kind: str = "piecewise-linear-knot"
    row_builder: Optional[RowBuilder] = None
    custom_columns: Tuple[str, ...] = ()
    preset: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if self.kind == "piecewise-linear-knot":
            for term in self.terms:
                for f in term.split(":"):
                    if f not in _BUILTIN:
                        raise SchemaError(f"unknown factor {f!r} in term {term!r}; covariates go in covariate_names")
        elif self.kind == "custom-rowbuilder":
            if self.row_builder is None or not self.custom_columns:
                raise SchemaError("custom-rowbuilder needs row_builder and custom_columns")
        else:
            raise SchemaError(f"unknown mean model kind {self.kind!r}")

    @property
    def column_names(self) -> Tuple[str, ...]:
        if self.kind == "custom-rowbuilder":
            return tuple(self.custom_columns)
        return self.terms + self.covariate_names

    @property
    def p(self) -> int:
        return len(self.column_names)

    def breakpoints(self, t0: float, t1: float) -> np.ndarray:
        """Points between which every column is linear in time."""
        pts = [t0, t1]
        if t0 < self.knot < t1:
            pts.insert(1, self.knot)
        return np.array(pts, dtype=float)


def autism_mean_model(knot: float = 12.0, covariates: Sequence[str] = ("age",)) -> MeanModel:
    """Piecewise-linear mean with a knot at the end of stage one; a2 acts only when a1=+1."""
    return MeanModel(AUTISM_TERMS, knot, tuple(covariates), preset="autism-eq3.2")


def symmetric_mean_model(knot: float = 2.0, covariates: Sequence[str] = ("L",)) -> MeanModel:
    """Piecewise-linear mean with full a1 x a2 interaction after the knot."""
    return MeanModel(SYMMETRIC_TERMS, knot, tuple(covariates), preset="symmetric-eq5.2")


MEAN_PRESETS = {
    "autism-eq3.2": autism_mean_model,
    "symmetric-eq5.2": symmetric_mean_model,
    "autism": autism_mean_model,
    "symmetric": symmetric_mean_model,
}


def _factor_values(name, t, knot, a1, a2):
    # t: (n,), a1/a2: (m,) -> broadcastable to (m, n)
    if name == "1":
        return 1.0
    if name == "t":
        return t[None, :]
    if name == "t_pre":
        return np.minimum(t, knot)[None, :]
    if name == "t_post":
        return np.maximum(t - knot, 0.0)[None, :]
    if name == "a1":
        return a1[:, None]
    if name == "a2":
        return a2[:, None]
    if name == "a1pos":
        return (a1 == 1).astype(float)[:, None]
    if name == "a1neg":
        return (a1 == -1).astype(float)[:, None]
    raise SchemaError(f"unknown factor {name!r}")


def build_X_batch(model: MeanModel, times, a1, a2, covariates) -> np.ndarray:
    """Stacked design matrices, shape (m, n, p).

    ``a2`` uses 0 for undefined; ``covariates`` is (m, k) ordered as
    ``model.covariate_names``.
    """
    t = np.asarray(times, dtype=float)
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    cov = np.asarray(covariates, dtype=float).reshape(len(a1), -1)
    m, n = len(a1), len(t)
    if cov.shape[1] != len(model.covariate_names):
        raise SchemaError(f"expected {len(model.covariate_names)} covariates, got {cov.shape[1]}")
    X = np.empty((m, n, model.p))
    for j, term in enumerate(model.terms):
        col = np.ones((m, n))
        for f in term.split(":"):
            col = col * _factor_values(f, t, model.knot, a1, a2)
        X[:, :, j] = col
    k0 = len(model.terms)
    for j in range(len(model.covariate_names)):
        X[:, :, k0 + j] = cov[:, j][:, None]
    return X


def covariate_vector(model: MeanModel, covariates: Mapping[str, float]) -> np.ndarray:
    try:
        return np.array([float(covariates[name]) for name in model.covariate_names])
    except KeyError as exc:
        raise SchemaError(f"covariate {exc.args[0]!r} required by the mean model is missing") from None


def build_X(model: MeanModel, times, dtr: DtrIndex, covariates: Mapping[str, float]) -> np.ndarray:
    """Fixed-effects design matrix for one subject under ``dtr``, shape (n, p)."""
    if model.kind == "custom-rowbuilder":
        rows = [list(model.row_builder(float(t), dtr, covariates)) for t in np.asarray(times, dtype=float)]
        X = np.array(rows, dtype=float).reshape(len(rows), -1)
        if X.shape[1] != model.p:
            raise SchemaError(f"row builder returned {X.shape[1]} columns, expected {model.p}")
        return X
    cov = covariate_vector(model, covariates)
    a2 = 0.0 if dtr.a2 is None else float(dtr.a2)
    return build_X_batch(model, times, [dtr.a1], [a2], cov[None, :])[0]


@dataclass(frozen=True)
class RandomEffectsSpec:
    kind: str = "intercept-and-slope"

    def __post_init__(self):
        if self.kind not in ("intercept-only", "intercept-and-slope"):
            raise SchemaError(f"unknown random-effects kind {self.kind!r}")

    @property
    def q(self) -> int:
        return 1 if self.kind == "intercept-only" else 2


INTERCEPT_ONLY = RandomEffectsSpec("intercept-only")
INTERCEPT_AND_SLOPE = RandomEffectsSpec("intercept-and-slope")


def build_Z(spec: RandomEffectsSpec, times) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    if spec.q == 1:
        return np.ones((len(t), 1))
    return np.column_stack([np.ones_like(t), t])


# Log-Cholesky diagonal floor: a vanishing variance component stays finite
# (Cholesky diagonal ~3e-7).
LOG_DIAG_FLOOR = -15.0


@dataclass(frozen=True)
class VarianceParams:
    """Unconstrained variance parameters.

    ``g_lower`` packs the Cholesky factor of G row by row over its lower
    triangle, with diagonal entries stored on the log scale.
    """

    g_lower: np.ndarray
    log_sigma2: float

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.g_lower, dtype=float))
        object.__setattr__(self, "g_lower", g)
        object.__setattr__(self, "log_sigma2", float(self.log_sigma2))
        if _q_from_len(len(g)) is None:
            raise ValidationError(f"g_lower has invalid length {len(g)}")

    @property
    def q(self) -> int:
        return _q_from_len(len(self.g_lower))

    @property
    def cholesky(self) -> np.ndarray:
        q = self.q
        L = np.zeros((q, q))
        L[_tril(q)] = self.g_lower
        d = np.arange(q)
        L[d, d] = np.exp(np.maximum(L[d, d], LOG_DIAG_FLOOR))
        return L

    @property
    def G(self) -> np.ndarray:
        L = self.cholesky
        return L @ L.T

    @property
    def sigma2(self) -> float:
        return float(np.exp(self.log_sigma2))

    @property
    def at_boundary(self) -> bool:
        q = self.q
        L = np.zeros((q, q))
        L[_tril(q)] = self.g_lower
        return bool(np.any(np.diag(L) <= LOG_DIAG_FLOOR + 1e-6))

    def to_vector(self) -> np.ndarray:
        return np.append(self.g_lower, self.log_sigma2)

    @classmethod
    def from_vector(cls, vec) -> "VarianceParams":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:-1], vec[-1])

    @classmethod
    def from_covariance(cls, G, sigma2: float) -> "VarianceParams":
        G = np.atleast_2d(np.asarray(G, dtype=float))
        q = G.shape[0]
        L = np.linalg.cholesky(G)
        L[np.diag_indices(q)] = np.log(np.diag(L))
        return cls(L[np.tril_indices(q)], np.log(sigma2))


@lru_cache(maxsize=None)
def _tril(q):
    return np.tril_indices(q)


def _q_from_len(k):
    for q in range(1, 8):
        if q * (q + 1) // 2 == k:
            return q
    return None


def marginal_covariance(params: VarianceParams, Z) -> np.ndarray:
    """V = Z G Z' + sigma^2 I."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape[1] != params.q:
        raise SchemaError(f"Z has {Z.shape[1]} columns but G is {params.q}x{params.q}")
    ZL = Z @ params.cholesky
    return ZL @ ZL.T + params.sigma2 * np.eye(Z.shape[0])
