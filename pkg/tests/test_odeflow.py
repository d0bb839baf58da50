from __future__ import annotations

import warnings

import numpy as np
import pytest

from hodsm import odeflow as of
from hodsm.analytic import MixtureDensity, diffuse, trimodal_mog
from hodsm.schedule import DiffusionSchedule
from hodsm.scorefn import AnalyticScore, LinearFlow, ProbabilityFlow, ZeroScore, gaussian_logpdf
from hodsm.scorenet import ScoreModel

VE = DiffusionSchedule.ve()
STD_NORMAL = MixtureDensity(np.array([1.0]), np.zeros((1, 1)), np.array([1.0]))
TIGHT = of.OdeSolverConfig(rtol=1e-9, atol=1e-11)


def small(dim=1, seed=0, sched=VE):
    return ScoreModel(dim=dim, schedule=sched, seed=seed, n_freq=8, t_width=16, x_width=16, head_width=32)


def test_solver_config_validation():
    for bad in ({"method": "euler"}, {"steps": 0}, {"rtol": 0.0}, {"atol": -1.0}):
        with pytest.raises(ValueError):
            of.OdeSolverConfig(**bad)


def test_rhs_examples():
    x = np.linspace(-2, 2, 7)[:, None]
    np.testing.assert_array_equal(ProbabilityFlow(ZeroScore(VE, 1)).velocity(x, 0.3), 0.0)
    t = 0.37
    ref = 0.5 * VE.diffusion(t) ** 2 * x / (1 + VE.sigma(t) ** 2)
    np.testing.assert_allclose(of.rhs_data(STD_NORMAL, VE, x, t), ref, rtol=1e-13)
    np.testing.assert_array_equal(ProbabilityFlow(AnalyticScore(STD_NORMAL, VE)).velocity(x, t),
                                  of.rhs_data(STD_NORMAL, VE, x, t))
    m = small()
    np.testing.assert_allclose(of.rhs_model(m, x, t), -0.5 * VE.diffusion(t) ** 2 * m.score_np(x, t), rtol=1e-14)
    # sign of the flow against finite differences of the marginal density transport
    h = 1e-6
    q = lambda s: diffuse(STD_NORMAL, VE, s)
    dlogq_dt = (q(t + h).log_pdf(x) - q(t - h).log_pdf(x)) / (2 * h)
    v = of.rhs_data(STD_NORMAL, VE, x, t)[:, 0]
    div = 0.5 * VE.diffusion(t) ** 2 / (1 + VE.sigma(t) ** 2)
    # continuity equation: d log q/dt = -div h - h . grad log q
    np.testing.assert_allclose(dlogq_dt, -div - v * q(t).score1(x)[:, 0], rtol=1e-5, atol=1e-8)


def test_likelihood_standard_normal_at_zero():
    ll = of.log_likelihood(AnalyticScore(STD_NORMAL, VE), np.zeros((1, 1)))
    ref = -0.5 * np.log(2 * np.pi * (1 + VE.sigma(VE.eps_time) ** 2))
    assert abs(ll[0] - ref) < 1e-2


def test_likelihood_mog_matches_marginal_up_to_prior_mismatch():
    q0 = trimodal_mog()
    x = q0.sample(10, np.random.default_rng(0))
    ll, st = of.log_likelihood(AnalyticScore(q0, VE), x, TIGHT, return_state=True)
    truth = diffuse(q0, VE, VE.eps_time).log_pdf(x)
    mismatch = gaussian_logpdf(st.x, VE.prior_std()) - diffuse(q0, VE, VE.T).log_pdf(st.x)
    assert np.max(np.abs(ll - truth - mismatch)) < 1e-4
    assert np.all(np.isfinite(st.logdet))


def test_likelihood_mass_on_grid():
    q0 = trimodal_mog()
    sched = DiffusionSchedule.ve(sigma_max=100.0)
    grid = np.linspace(-1.5, 1.5, 401)[:, None]
    p = np.exp(of.log_likelihood(AnalyticScore(q0, sched), grid))
    assert abs(np.trapezoid(p, grid[:, 0]) - 1.0) < 2e-2


def test_zero_jacobian_gives_zero_logdet():
    x = np.array([[0.3], [-1.2]])
    ll, st = of.log_likelihood(ZeroScore(VE, 1), x, return_state=True)
    np.testing.assert_array_equal(st.logdet, 0.0)
    np.testing.assert_array_equal(st.x, x)
    np.testing.assert_allclose(ll, gaussian_logpdf(x, VE.prior_std()), rtol=1e-15)


def test_likelihood_rejects_nonfinite_and_solver_failure():
    with pytest.raises(ValueError):
        of.log_likelihood(ZeroScore(VE, 1), np.array([[np.nan]]))

    class Bad(ZeroScore):
        def derivs(self, x, t):
            s, j, d, g = super().derivs(x, t)
            return s + np.nan, j, d, g

    with pytest.raises(of.SolverError):
        of.log_likelihood(Bad(VE, 1), np.zeros((1, 1)))


def test_rk4_fourth_order():
    a = 0.9
    errs = []
    for n in (50, 100, 200):
        y = of.integrate(lambda u, y: a * y * np.cos(u), np.ones((1, 1)), 0.0, 2.0,
                         of.OdeSolverConfig(method="rk4", steps=n))
        errs.append(abs(y[0, 0] - np.exp(a * np.sin(2.0))))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(rates - 4.0) < 0.3), rates


def test_integrate_eval_points_both_methods():
    grid = [0.5, 0.25, 0.0]
    for cfg in (of.OdeSolverConfig(method="rk4", steps=400), TIGHT):
        out = of.integrate(lambda u, y: -y, np.ones((2, 1)), 1.0, 0.0, cfg, u_eval=grid)
        np.testing.assert_allclose(np.concatenate(out)[::2, 0], np.exp(1.0 - np.array(grid)), rtol=1e-7)


def test_linear_flow_score_closed_form():
    a = 0.7
    flow = LinearFlow(a, 2, VE)
    x0 = np.array([[0.3, -0.4], [1.0, 2.0]])
    tr = of.model_score_along(flow, x0, TIGHT, np.linspace(VE.eps_time, 1.0, 20))
    T = VE.T
    x_T = x0 * np.exp(a * (T - VE.eps_time))
    s_T = flow.prior_score(x_T)
    ref = s_T[None] * np.exp(a * (T - tr.t))[:, None, None]
    assert np.max(np.abs(tr.score - ref)) < 1e-6
    np.testing.assert_allclose(tr.x, x0[None] * np.exp(a * (tr.t - VE.eps_time))[:, None, None], rtol=1e-7)


def test_analytic_score_transport():
    q0 = trimodal_mog()
    sched = DiffusionSchedule.ve(sigma_max=1e4)
    x0 = q0.sample(20, np.random.default_rng(1))
    grid = np.linspace(sched.eps_time, 1.0, 25)
    tr = of.model_score_along(AnalyticScore(q0, sched), x0, TIGHT, grid)
    for k, t in enumerate(grid):
        truth = diffuse(q0, sched, float(t)).score1(tr.x[k])
        assert np.max(np.abs(tr.score[k] - truth)) < 1e-3, t


def test_score_at_eps_is_likelihood_gradient():
    for scorer in (AnalyticScore(trimodal_mog(), VE), small(seed=3)):
        x0 = np.array([[-0.3], [0.45]])
        tr = of.model_score_along(scorer, x0, TIGHT, np.array([VE.eps_time]))
        h = 1e-4
        fd = (of.log_likelihood(scorer, x0 + h, TIGHT) - of.log_likelihood(scorer, x0 - h, TIGHT)) / (2 * h)
        assert np.max(np.abs(tr.score[0, :, 0] - fd)) < 1e-3


def test_ode_score_at_agrees_with_trajectory_route():
    m = small(dim=2, seed=4)
    x0 = np.random.default_rng(4).normal(scale=0.5, size=(3, 2))
    grid = np.array([VE.eps_time, 0.2, 0.6])
    tr = of.model_score_along(m, x0, TIGHT, grid)
    for k, t in enumerate(grid):
        direct = of.ode_score_at(m, tr.x[k], t, TIGHT)
        np.testing.assert_allclose(direct, tr.score[k], rtol=1e-4, atol=1e-6)


def test_diag_exact_score_floor():
    q0 = trimodal_mog()
    sched = DiffusionSchedule.ve(sigma_max=1e4)
    grid = np.linspace(sched.eps_time, sched.T, 100)
    res = of.diag_curves(AnalyticScore(q0, sched), q0, sched, grid, n_mc=100, seed=0)
    np.testing.assert_array_equal(res.sm, 0.0)
    assert np.all(res.fisher >= 0) and np.all(res.diff >= 0)
    assert res.integral("fisher")[0] < 1e-3
    kl = of.kl_decomposition(diag=res)
    assert abs(kl["j_sm"]) < 1e-3 and abs(kl["j_diff"]) < 1e-3 and abs(kl["j_ode"]) < 1e-3
    assert len(res.curves()) == 100


def test_kl_identity_and_cauchy_schwarz_random_model():
    q0 = trimodal_mog()
    m = small(seed=5)
    res = of.diag_curves(m, q0, VE, np.linspace(VE.eps_time, 1.0, 10), n_mc=100, seed=1)
    kl = of.kl_decomposition(diag=res)
    assert abs(kl["j_ode"] - kl["j_sm"] - kl["j_diff"]) <= 4 * np.hypot(kl["se_ode"], 1e-12) + 1e-9 * kl["j_sm"]
    assert kl["j_ode"] <= kl["cs_bound"] + 4 * kl["se_ode"]
    assert np.all(res.sm >= 0) and np.all(res.fisher >= 0) and np.all(res.diff >= 0)
    assert kl["j_sm"] > 0


def test_trapezoid_and_diag_errors():
    w = of.trapezoid_weights([0.0, 0.5, 1.5])
    np.testing.assert_allclose(w, [0.25, 0.75, 0.5])
    q0 = trimodal_mog()
    z = AnalyticScore(q0, VE)
    with pytest.raises(ValueError):
        of.diag_curves(z, q0, VE, np.array([]), n_mc=100)
    with pytest.raises(ValueError):
        of.diag_curves(z, q0, VE, np.array([0.0, 0.5]), n_mc=100)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        of.diag_curves(z, q0, VE, np.array([0.5]), n_mc=10)
    assert any("Monte-Carlo" in str(r.message) for r in rec)


def test_hutchinson_likelihood_path():
    x = np.array([[0.2], [-0.5]])
    # 1-D Rademacher probes make the estimate exact
    for scorer in (AnalyticScore(trimodal_mog(), VE), small(seed=6)):
        np.testing.assert_allclose(of.log_likelihood(scorer, x, TIGHT, trace="hutchinson"),
                                   of.log_likelihood(scorer, x, TIGHT), rtol=1e-7)
    q0 = MixtureDensity(np.array([0.5, 0.5]), np.array([[0.3, -0.2], [-0.4, 0.1]]), np.array([0.05, 0.1]))
    x2 = np.zeros((400, 2)) + np.array([0.1, 0.0])
    exact = of.log_likelihood(AnalyticScore(q0, VE), x2[:1])[0]
    est = of.log_likelihood(AnalyticScore(q0, VE), x2, trace="hutchinson", probe_seed=1)
    assert abs(est.mean() - exact) < 4 * est.std(ddof=1) / np.sqrt(len(est)) + 1e-9
    assert est.std() > 0
    lin = LinearFlow(0.3, 2, VE)
    np.testing.assert_allclose(of.log_likelihood(lin, x2[:2], trace="hutchinson"), of.log_likelihood(lin, x2[:2]))
    with pytest.raises(ValueError):
        of.log_likelihood(lin, x2[:2], trace="approx")
