import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smartlmm.design import DtrIndex
from smartlmm.errors import SchemaError, ValidationError
from smartlmm.model import (
    INTERCEPT_AND_SLOPE,
    INTERCEPT_ONLY,
    MeanModel,
    VarianceParams,
    autism_mean_model,
    build_X,
    build_Z,
    marginal_covariance,
    symmetric_mean_model,
)

SIM_GRID = [0, 0.5, 1.5, 2, 2.25, 2.5, 3]


def test_autism_rows_match_piecewise_mean():
    # beta0 + min(t,12)(b1 + b2 a1) + max(t-12,0)(b3 + b4 a1 + b5 1{a1=1} a2) + b6 age
    m = autism_mean_model()
    beta = np.array([28.9, 1.5, -0.9, 0.1, 0.2, -0.1, -4.5])
    for dtr in (DtrIndex(1, 1), DtrIndex(1, -1), DtrIndex(-1, None)):
        X = build_X(m, [0, 12, 24, 36], dtr, {"age": 0.7})
        a1, a2 = dtr.a1, 0 if dtr.a2 is None else dtr.a2
        for t, row in zip([0, 12, 24, 36], X):
            expect = (
                beta[0]
                + min(t, 12) * (beta[1] + beta[2] * a1)
                + max(t - 12, 0) * (beta[3] + beta[4] * a1 + beta[5] * (a1 == 1) * a2)
                + beta[6] * 0.7
            )
            assert row @ beta == pytest.approx(expect)


def test_autism_end_of_stage_contrast_vector():
    # E[Y24(1,1)] - E[Y24(-1,.)] = 12 (2 (b2 + b4) + b5)
    m = autism_mean_model()
    z = {"age": 0.0}
    c = build_X(m, [24], DtrIndex(1, 1), z)[0] - build_X(m, [24], DtrIndex(-1, None), z)[0]
    np.testing.assert_allclose(c, [0, 0, 24, 0, 24, 12, 0])


def test_first_stage_rows_are_a2_free():
    m = symmetric_mean_model()
    X1 = build_X(m, SIM_GRID, DtrIndex(1, 1), {"L": 1})
    X2 = build_X(m, SIM_GRID, DtrIndex(1, -1), {"L": 1})
    pre = np.array(SIM_GRID) <= 2
    np.testing.assert_array_equal(X1[pre], X2[pre])
    assert not np.array_equal(X1[~pre], X2[~pre])


def test_missing_covariate_and_bad_terms():
    with pytest.raises(SchemaError):
        build_X(autism_mean_model(), [0], DtrIndex(1, 1), {})
    with pytest.raises(SchemaError):
        MeanModel(("1", "t_pre:age"), 12.0)
    with pytest.raises(SchemaError):
        MeanModel(kind="custom-rowbuilder")


def test_custom_row_builder():
    m = MeanModel(kind="custom-rowbuilder", row_builder=lambda t, d, c: [1.0, t * d.a1], custom_columns=("a", "b"))
    np.testing.assert_array_equal(build_X(m, [1, 2], DtrIndex(-1, None), {}), [[1, -1], [1, -2]])


def test_Z_shapes():
    Z = build_Z(INTERCEPT_AND_SLOPE, SIM_GRID)
    assert Z.shape == (7, 2)
    np.testing.assert_array_equal(Z[:, 1], SIM_GRID)
    assert build_Z(INTERCEPT_ONLY, SIM_GRID).shape == (7, 1)


def test_marginal_covariance_against_dense_oracle():
    # v_ts = 0.8 - 0.2 (t + s) + t s + 1{t = s}
    G = np.array([[0.8, -0.2], [-0.2, 1.0]])
    V = marginal_covariance(VarianceParams.from_covariance(G, 1.0), build_Z(INTERCEPT_AND_SLOPE, SIM_GRID))
    t = np.array(SIM_GRID, dtype=float)
    oracle = np.empty((7, 7))
    for i in range(7):
        for j in range(7):
            oracle[i, j] = 0.8 - 0.2 * (t[i] + t[j]) + t[i] * t[j] + (1.0 if i == j else 0.0)
    np.testing.assert_allclose(V, oracle, atol=1e-12)


def test_zero_G_gives_sigma2_identity():
    p = VarianceParams(np.array([-40.0, 0.0, -40.0]), np.log(2.0))
    V = marginal_covariance(p, build_Z(INTERCEPT_AND_SLOPE, [0, 1, 2]))
    np.testing.assert_allclose(V, 2.0 * np.eye(3), atol=1e-10)
    assert p.at_boundary


def test_variance_params_validation():
    with pytest.raises(ValidationError):
        VarianceParams(np.zeros(2), 0.0)
    with pytest.raises(SchemaError):
        marginal_covariance(VarianceParams(np.zeros(1), 0.0), build_Z(INTERCEPT_AND_SLOPE, [0, 1]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_log_cholesky_round_trip_and_pd(vec):
    p = VarianceParams.from_vector(np.array(vec))
    assert np.all(np.linalg.eigvalsh(p.G) > 0)
    q = VarianceParams.from_covariance(p.G, p.sigma2)
    np.testing.assert_allclose(q.to_vector(), p.to_vector(), atol=1e-9)
    V = marginal_covariance(p, build_Z(INTERCEPT_AND_SLOPE, SIM_GRID))
    assert np.all(np.linalg.eigvalsh(V) > 0)
