import warnings

import numpy as np
import pytest
from scipy.interpolate import BSpline
from scipy.optimize import minimize

from odsate.core_model import AdjustedLink, MismeasureSpec, ObservedSample, adjusted_link, adjusted_link_derivs, expit
from odsate.ee_solver import SolveOptions
from odsate.errors import DomainError, IllConditionedWarning
from odsate.gam_ee import (
    SplineConfig,
    build_gam_design,
    bspline_basis,
    difference_penalty,
    effective_df,
    equidistant_knots,
    fit_gam_ee,
    penalized_loglik,
    penalized_score,
    select_lambda_bic,
)
from odsate.glm_ee import fit_glm_ee, glm_problem
from odsate.sim_harness import ScenarioSpec, case_control_sample, generate_pool, stream

from conftest import random_logistic_sample
from oracles import de_boor_basis


# -- basis -------------------------------------------------------------------------


def test_degree_zero_indicator():
    np.testing.assert_array_equal(bspline_basis(0.25, 0, [0.0, 0.5, 1.0]), [1.0, 0.0])
    np.testing.assert_array_equal(bspline_basis(0.75, 0, [0.0, 0.5, 1.0]), [0.0, 1.0])


def test_partition_of_unity_and_local_support():
    rng = np.random.default_rng(0)
    x = rng.random(10_000)
    for degree, k in ((1, 5), (2, 4), (3, 10), (3, 17)):
        b = bspline_basis(x, degree, equidistant_knots(k, degree))
        assert b.shape == (x.size, k + degree)
        assert np.max(np.abs(b.sum(axis=1) - 1)) < 1e-12
        assert np.all(b >= 0)
        assert np.max((b > 0).sum(axis=1)) <= degree + 1
    assert abs(bspline_basis(0.37, 3, equidistant_knots(10, 3)).sum() - 1) < 1e-12
    for degree in (1, 2, 3):
        ends = bspline_basis([0.0, 1.0], degree, equidistant_knots(7, degree))
        assert np.max(np.abs(ends.sum(axis=1) - 1)) < 1e-12 and np.all(ends >= 0)


def test_matches_textbook_recursion():
    t = equidistant_knots(4, 2)
    np.testing.assert_allclose(bspline_basis(0.5, 2, t), de_boor_basis(0.5, 2, t), atol=1e-14, rtol=0)
    rng = np.random.default_rng(1)
    for degree, k in ((2, 4), (3, 10)):
        t = equidistant_knots(k, degree)
        xs = rng.random(200)
        ours = bspline_basis(xs, degree, t)
        ref = np.array([de_boor_basis(x, degree, t) for x in xs])
        assert np.max(np.abs(ours - ref)) < 1e-14


def test_matches_scipy_design_matrix():
    t = equidistant_knots(10, 3)
    xs = np.linspace(0, 1, 501)
    ref = BSpline.design_matrix(xs, t, 3).toarray()
    assert np.max(np.abs(bspline_basis(xs, 3, t) - ref)) < 1e-13


def test_basis_clamps_outside_domain():
    t = equidistant_knots(6, 3)
    np.testing.assert_array_equal(bspline_basis(-0.3, 3, t), bspline_basis(0.0, 3, t))
    np.testing.assert_array_equal(bspline_basis(1.7, 3, t), bspline_basis(1.0, 3, t))


def test_malformed_knots():
    with pytest.raises(DomainError):
        bspline_basis(0.5, 2, [0.0, 0.4, 0.3, 1.0, 1.2])
    with pytest.raises(DomainError):
        bspline_basis(0.5, 3, [0.0, 1.0])


# -- difference penalty -------------------------------------------------------------


def test_difference_matrices():
    np.testing.assert_array_equal(difference_penalty(1, 3), [[-1, 1, 0], [0, -1, 1]])
    d2 = difference_penalty(2, 5)
    np.testing.assert_array_equal(d2, difference_penalty(1, 4) @ difference_penalty(1, 5))
    k = np.arange(7.0)
    np.testing.assert_array_equal(difference_penalty(2, 7) @ (1.5 - 0.25 * k), np.zeros(5))
    with pytest.raises(DomainError):
        difference_penalty(3, 3)


def test_second_difference_null_space_is_linear_functions():
    t = equidistant_knots(10, 3)
    xs = np.linspace(0, 1, 50)
    coef = 0.3 + 2.0 * np.arange(13)
    fx = bspline_basis(xs, 3, t) @ coef
    np.testing.assert_allclose(np.diff(fx, 2), 0, atol=1e-12)


# -- design ------------------------------------------------------------------------


def test_design_dimensions_and_penalty_layout(m1_sample):
    cfg = SplineConfig(knots_Kn=10, degree_p=3)
    d = build_gam_design(m1_sample, cfg, 3.0)
    assert d.q == 2 * 13 + 1 + 1 + 1 == 29
    for idx in [d.intercept_index, d.treatment_index, *d.linear_indices]:
        assert np.all(d.Q_a[idx] == 0) and np.all(d.Q_a[:, idx] == 0)
        assert np.all(d.T_a[idx] == 0) and np.all(d.T_a[:, idx] == 0)
    for m in (d.Q_a, d.T_a):
        assert np.array_equal(m, m.T)
        assert np.min(np.linalg.eigvalsh(m)) >= -1e-10
    for sl in d.spline_slices:
        assert np.max(np.abs(d.Z[:, sl].mean(axis=0))) < 1e-12
    np.testing.assert_array_equal(d.Z[:, d.treatment_index], m1_sample.t)


def test_constant_covariate_rejected():
    s = ObservedSample([1, 0, 1, 0], [0, 1, 1, 0], np.column_stack([np.ones(4), [0.1, 0.5, 0.2, 0.9]]),
                       covariate_kinds=("continuous", "continuous"))
    with pytest.raises(DomainError):
        build_gam_design(s, SplineConfig(knots_Kn=3), 1.0)


def test_config_validation():
    for bad in ({"degree_p": 0}, {"knots_Kn": 2}, {"gamma": -1}, {"lambda_grid": ()}):
        with pytest.raises(DomainError):
            SplineConfig(**bad)


# -- score --------------------------------------------------------------------------


def test_unpenalized_score_equals_plain_score(m1_sample):
    cfg = SplineConfig(gamma=0.0)
    d = build_gam_design(m1_sample, cfg, 0.0)
    link = AdjustedLink(0.0, 0.2, 124.0)
    rng = np.random.default_rng(2)
    y = m1_sample.y_star
    for _ in range(5):
        beta = rng.normal(scale=0.3, size=d.q)
        eta = d.Z @ beta
        mu = adjusted_link(eta, link)
        h1, _ = adjusted_link_derivs(eta, link)
        ref = d.Z.T @ ((y - mu) * h1 / (mu * (1 - mu))) / y.size
        assert np.max(np.abs(penalized_score(beta, 124.0, d, y, link) - ref)) < 1e-14


def test_penalty_vanishes_at_origin(m1_sample):
    d = build_gam_design(m1_sample, SplineConfig(gamma=0.5), 7.0)
    d0 = build_gam_design(m1_sample, SplineConfig(gamma=0.0), 0.0)
    link = AdjustedLink(0.0, 0.2, 50.0)
    beta = np.zeros(d.q)
    np.testing.assert_array_equal(penalized_score(beta, 50.0, d, m1_sample.y_star, link),
                                  penalized_score(beta, 50.0, d0, m1_sample.y_star, link))


def test_penalized_score_matches_loglik_differences(m1_sample):
    rng = np.random.default_rng(3)
    y = m1_sample.y_star
    worst = 0.0
    for _ in range(100):
        d = build_gam_design(m1_sample, SplineConfig(gamma=rng.uniform(0, 1)), float(np.exp(rng.uniform(-2, 4))))
        link = AdjustedLink(rng.uniform(0, 0.1), rng.uniform(0, 0.4), 1.0)
        s = float(np.exp(rng.uniform(-1, 5)))
        beta = rng.normal(scale=0.4, size=d.q)
        beta[d.intercept_index] = rng.uniform(-6, 0)
        analytic = penalized_score(beta, s, d, y, link) * y.size
        fd = np.empty(d.q)
        for k in range(d.q):
            e = np.zeros(d.q)
            e[k] = 1e-5
            fd[k] = (penalized_loglik(beta + e, s, d, y, link) - penalized_loglik(beta - e, s, d, y, link)) / 2e-5
        worst = max(worst, np.max(np.abs(fd - analytic)) / np.max(np.abs(analytic)))
    assert worst < 1e-6


# -- fits ---------------------------------------------------------------------------


def test_heavy_smoothing_gives_linear_smooths(m1_sample):
    spec = MismeasureSpec(0.01, 0.0, 0.2)
    cfg = SplineConfig(gamma=0.1)
    fit = fit_gam_ee(m1_sample, spec, cfg, lam=1e8)
    d = build_gam_design(m1_sample, cfg, 1e8)
    dm = difference_penalty(2, cfg.basis_dim)
    for sl in d.spline_slices:
        assert np.max(np.abs(dm @ fit.theta.beta[sl])) < 1e-4


def test_all_linear_unpenalized_matches_glm(random_sample):
    spec = MismeasureSpec(0.3, 0.0, 0.0)
    cfg = SplineConfig(gamma=0.0, per_covariate_linear=(True, True, True))
    opts = SolveOptions(tol_score=1e-12)
    gam = fit_gam_ee(random_sample, spec, cfg, opts, lam=0.0, fixed_s=1.0)
    glm = fit_glm_ee(random_sample, spec, opts, fixed_s=1.0)
    assert gam.tau_hat == pytest.approx(glm.tau_hat, abs=1e-8)


def test_pure_spline_truth_matches_generic_optimizer():
    rng = np.random.default_rng(17)
    n = 1500
    x = np.column_stack([rng.random(n), rng.normal(size=n)])
    t = (rng.random(n) < 0.5).astype(float)
    probe = ObservedSample(np.r_[1.0, np.zeros(n - 1)], t, x, ("continuous", "continuous"))
    cfg = SplineConfig(knots_Kn=5, gamma=0.0)
    z = build_gam_design(probe, cfg, 0.0).Z
    beta_true = np.r_[rng.normal(scale=0.6, size=z.shape[1] - 2), -0.3, 0.8]
    y = (rng.random(n) < expit(z @ beta_true)).astype(float)
    sample = ObservedSample(y, t, x, ("continuous", "continuous"))
    d = build_gam_design(sample, cfg, 0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedWarning)
        fit = fit_gam_ee(sample, MismeasureSpec(0.4), cfg, SolveOptions(tol_score=1e-12, allow_singular=True),
                         lam=0.0, fixed_s=1.0)

    # oracle: drop one column per centred block (they sum to zero) and maximise
    # the plain logistic likelihood with a quasi-Newton optimiser
    keep = np.ones(d.q, dtype=bool)
    for sl in d.spline_slices:
        keep[sl.stop - 1] = False
    zr = d.Z[:, keep]

    def nll(b):
        eta = zr @ b
        return np.sum(np.logaddexp(0, eta) - y * eta)

    def grad(b):
        return zr.T @ (expit(zr @ b) - y)

    res = minimize(nll, np.zeros(zr.shape[1]), jac=grad, method="BFGS", options={"gtol": 1e-10, "maxiter": 5000})
    eta_oracle = zr @ res.x
    assert np.max(np.abs(d.Z @ fit.theta.beta - eta_oracle)) < 1e-6
    br = res.x
    z1, z0 = zr.copy(), zr.copy()
    tcol = np.flatnonzero(keep).tolist().index(d.treatment_index)
    z1[:, tcol], z0[:, tcol] = 1.0, 0.0
    v_star = 0.4
    g1, g0 = expit(z1 @ br), expit(z0 @ br)
    tau_oracle = (v_star * (g1 - g0)[y == 1].mean() + (1 - v_star) * (g1 - g0)[y == 0].mean())
    assert fit.tau_hat == pytest.approx(tau_oracle, abs=1e-6)


def test_penalized_score_vanishes_at_fit(m1_sample):
    spec = MismeasureSpec(0.01, 0.0, 0.2)
    fit = fit_gam_ee(m1_sample, spec, lam=3.0)
    d = build_gam_design(m1_sample, SplineConfig(), 3.0)
    score = penalized_score(fit.theta.beta, fit.s_hat, d, m1_sample.y_star, AdjustedLink(0.0, 0.2, fit.s_hat))
    assert np.max(np.abs(score)) <= 1e-8
    assert fit.extra["lambda_selected"] == 3.0


def test_singleton_grid(m1_sample):
    lam, trace = select_lambda_bic(m1_sample, MismeasureSpec(0.01, 0.0, 0.2), SplineConfig(lambda_grid=(5.0,)))
    assert lam == 5.0 and len(trace) == 1 and trace[0]["converged"]


def test_edf_non_increasing_in_lambda(m1_sample):
    spec = MismeasureSpec(0.01, 0.0, 0.2)
    cfg = SplineConfig()
    fit = fit_gam_ee(m1_sample, spec, cfg, lam=1.0)
    d = build_gam_design(m1_sample, cfg, 1.0)
    from odsate.gam_ee import _problem

    info = _problem(m1_sample, spec, d, None).fisher_information(fit.theta.beta, fit.s_hat)
    edfs = []
    for lam in np.logspace(-3, 8, 23):
        dl = build_gam_design(m1_sample, cfg, lam)
        edfs.append(effective_df(info, dl.Q_a, dl.T_a))
    assert np.all(np.diff(edfs) <= 1e-9)
    assert edfs[0] <= d.q


def test_bic_prefers_interior_lambda_on_smooth_truth():
    sc = ScenarioSpec("M2", v=0.1, pool_size=300_000, replications=1, seed=5)
    sample = case_control_sample(generate_pool(sc), 1000, 1000, stream(5, 3, 0))
    grid = (0.0, *10.0 ** np.arange(-3, 8), 1e8)
    lam, trace = select_lambda_bic(sample, sc.spec, SplineConfig(lambda_grid=grid))
    assert lam not in (0.0, 1e8)
    assert len(trace) == len(grid)


def test_trace_reported_in_fit(m1_sample):
    fit = fit_gam_ee(m1_sample, MismeasureSpec(0.01, 0.0, 0.2), SplineConfig(lambda_grid=(1.0, 10.0)))
    assert fit.engine == "gam"
    assert [row["lambda"] for row in fit.extra["bic_trace"]] == [1.0, 10.0]
    assert fit.tau_ci95[0] < fit.tau_hat < fit.tau_ci95[1]
