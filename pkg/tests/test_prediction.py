import numpy as np
import pytest

from smartlmm.design import DtrIndex, SubjectRecord, autism_design, symmetric_design
from smartlmm.errors import ValidationError
from smartlmm.estimator import FitResult, fit
from smartlmm.gee import gee_fit
from smartlmm.model import (
    INTERCEPT_AND_SLOPE,
    INTERCEPT_ONLY,
    VarianceParams,
    autism_mean_model,
    build_X,
    build_Z,
    symmetric_mean_model,
)
from smartlmm.prediction import default_grid, predict_all, predict_random_effects
from smartlmm.simulator import generate_potential_outcomes, observe, simulation1_config


def fake_fit(beta, G, sigma2, re_spec, names):
    p = len(beta)
    return FitResult(
        beta_hat=np.asarray(beta, float),
        alpha_hat=VarianceParams.from_covariance(G, sigma2),
        sandwich_cov=np.eye(p),
        loglik=0.0,
        iterations=0,
        converged=True,
        score_norm=0.0,
        column_names=tuple(names),
        n_subjects=1,
        n_replicates=1,
        re_spec=re_spec,
    )


SYM = symmetric_mean_model()
BETA_SYM = np.array([0.3, 0.6, 0.5, 0.1, 0.2, -0.3, 0.1, -0.2])
G2 = np.array([[0.8, -0.2], [-0.2, 1.0]])


def blup(fitres, subject, dtr, model):
    """Standard single-DTR BLUP G Z' V^-1 (y - X beta)."""
    t = subject.times[subject.observed]
    Z = build_Z(fitres.re_spec, t)
    V = Z @ fitres.G @ Z.T + fitres.sigma2 * np.eye(len(t))
    r = subject.y[subject.observed] - build_X(model, t, dtr, subject.covariates) @ fitres.beta_hat
    return fitres.G @ Z.T @ np.linalg.solve(V, r)


def test_single_dtr_subject_is_standard_blup():
    f = fake_fit(BETA_SYM, G2, 1.0, INTERCEPT_AND_SLOPE, SYM.column_names)
    s = SubjectRecord("x", [0, 0.5, 1.5, 2, 3], [0.1, 1.0, np.nan, 2.2, 0.4], -1, 0, 1, {"L": 0.4})
    pred = predict_random_effects(f, s, SYM, symmetric_design())
    assert list(pred.trajectories) == [DtrIndex(-1, 1)]
    np.testing.assert_allclose(pred.b_hat, blup(f, s, DtrIndex(-1, 1), SYM), atol=1e-12)


def test_zero_G_gives_zero_b_with_flag():
    f = fake_fit(BETA_SYM, np.diag([np.exp(-30), np.exp(-30)]), 1.0, INTERCEPT_AND_SLOPE, SYM.column_names)
    s = SubjectRecord("x", [0, 1, 3], [5.0, 6.0, 7.0], 1, 1, None, {"L": 0.0})
    pred = predict_random_effects(f, s, SYM, symmetric_design())
    assert pred.g_at_boundary
    np.testing.assert_array_equal(pred.b_hat, 0.0)


def test_responder_with_shared_rows_matches_single_blup():
    """Autism design: a responder observed only up to week 12 has a2-free rows."""
    m = autism_mean_model()
    beta = np.array([28.0, 1.2, -0.5, 0.2, 0.1, 0.3, -2.0])
    f = fake_fit(beta, np.array([[9.0]]), 4.0, INTERCEPT_ONLY, m.column_names)
    early = SubjectRecord("r", [0, 12, 24, 36], [30.0, 45.0, np.nan, np.nan], 1, 1, None, {"age": 0.5})
    pred = predict_random_effects(f, early, m, autism_design())
    assert set(pred.trajectories) == {DtrIndex(1, 1), DtrIndex(1, -1)}
    single = blup(f, early, DtrIndex(1, 1), m)
    np.testing.assert_allclose(blup(f, early, DtrIndex(1, -1), m), single, atol=1e-12)
    np.testing.assert_allclose(pred.b_hat, single, atol=1e-12)

    # with second-stage rows the two terms differ and b_hat is their weighted mean (weights 2 and 2)
    full = SubjectRecord("r", [0, 12, 24, 36], [30.0, 45.0, 47.0, 52.0], 1, 1, None, {"age": 0.5})
    pred = predict_random_effects(f, full, m, autism_design())
    t1, t2 = blup(f, full, DtrIndex(1, 1), m), blup(f, full, DtrIndex(1, -1), m)
    assert not np.allclose(t1, t2)
    np.testing.assert_allclose(pred.b_hat, 0.5 * (t1 + t2), atol=1e-12)
    assert pred.weights == {DtrIndex(1, 1): 2.0, DtrIndex(1, -1): 2.0}


def test_zero_residual_subject():
    f = fake_fit(BETA_SYM, G2, 1.0, INTERCEPT_AND_SLOPE, SYM.column_names)
    times = np.array([0, 0.5, 1.5, 2.0])  # pre-knot rows do not depend on a2
    y = build_X(SYM, times, DtrIndex(1, 1), {"L": 0.2}) @ BETA_SYM
    s = SubjectRecord("z", times, y, 1, 1, None, {"L": 0.2})
    assert np.all(predict_random_effects(f, s, SYM, symmetric_design()).b_hat == 0.0)


def test_intercept_only_shrinkage():
    rng = np.random.default_rng(3)
    f = fake_fit(BETA_SYM, np.array([[0.7]]), 1.3, INTERCEPT_ONLY, SYM.column_names)
    for _ in range(50):
        a1, r = int(rng.choice([-1, 1])), int(rng.integers(0, 2))
        a2 = None if r else int(rng.choice([-1, 1]))
        s = SubjectRecord("s", [0, 0.5, 1.5, 2, 2.5, 3], rng.normal(0, 2, 6), a1, r, a2, {"L": rng.normal()})
        pred = predict_random_effects(f, s, SYM, symmetric_design())
        bound = max(
            abs(np.mean(s.y - build_X(SYM, s.times, d, s.covariates) @ BETA_SYM)) for d in pred.trajectories
        )
        assert abs(pred.b_hat[0]) <= bound + 1e-12


def test_trajectories_on_default_grid():
    f = fake_fit(BETA_SYM, G2, 1.0, INTERCEPT_AND_SLOPE, SYM.column_names)
    s = SubjectRecord("x", [0, 0.5, 1.5, 2, 3], [0.1, 1.0, 1.2, 2.2, 0.4], 1, 1, None, {"L": 0.0})
    pred = predict_random_effects(f, s, SYM, symmetric_design())
    assert len(pred.grid) == len(default_grid(s))
    for t in s.times:
        assert t in pred.grid
    for d, traj in pred.trajectories.items():
        expect = build_X(SYM, pred.grid, d, s.covariates) @ BETA_SYM + build_Z(INTERCEPT_AND_SLOPE, pred.grid) @ pred.b_hat
        np.testing.assert_allclose(traj, expect)
    rows = list(pred.rows())
    assert len(rows) == 2 * len(pred.grid)
    # posterior covariance is PSD and shrinks G
    for P in pred.posterior_cov.values():
        assert np.all(np.linalg.eigvalsh(P) >= -1e-12)
        assert np.all(np.linalg.eigvalsh(G2 - P) >= -1e-12)


def test_gee_fit_is_rejected(sim1_aug, sim1_small):
    cfg, obs = sim1_small
    with pytest.raises(ValidationError):
        predict_random_effects(gee_fit("exchangeable", sim1_aug), obs.to_subjects()[0], SYM, symmetric_design())


def test_population_centering():
    cfg = simulation1_config(0.8)
    rng = np.random.default_rng(21)
    obs = observe(generate_potential_outcomes(cfg, 5000, rng), symmetric_design(), rng)
    res = fit(obs.augmented(symmetric_design(), SYM))
    b = np.array([p.b_hat for p in predict_all(res, obs.to_subjects(), SYM, symmetric_design(), grid=[0.0])])
    se = b.std(axis=0, ddof=1) / np.sqrt(len(b))
    assert np.all(np.abs(b.mean(axis=0)) < 3 * se)
