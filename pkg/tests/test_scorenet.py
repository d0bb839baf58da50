from __future__ import annotations

import numpy as np
import pytest

from hodsm import autodiff as ad
from hodsm.schedule import DiffusionSchedule, DomainError
from hodsm.scorenet import ScoreModel

VE = DiffusionSchedule.ve()


def small(dim=1, seed=0, **kw):
    return ScoreModel(dim=dim, schedule=VE, seed=seed, n_freq=8, t_width=16, x_width=16, head_width=32, **kw)


def fd_jac(m, x, t, h=1e-5):
    cols = []
    for k in range(m.dim):
        e = np.zeros(m.dim)
        e[k] = h
        cols.append((m.score_np(x + e, t) - m.score_np(x - e, t)) / (2 * h))
    return np.stack(cols, axis=-1)


def rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


def test_zero_head_gives_zero_score():
    m = small(dim=2, zero_head=True)
    x = np.random.default_rng(0).normal(size=(5, 2))
    np.testing.assert_array_equal(m.score_np(x, 0.4), 0.0)


def test_parameterization_identity():
    m = small(dim=2)
    rng = np.random.default_rng(1)
    x, t = rng.normal(size=(7, 2)), rng.uniform(1e-5, 1, 7)
    sig = VE.sigma(t)[:, None]
    with ad.no_record():
        np.testing.assert_array_equal(sig * m.score(x, t).value, sig * (m.net(x, t).value * (1.0 / sig)))
    np.testing.assert_allclose(sig * m.score_np(x, t), m.net_np(x, t), rtol=1e-14)


def test_finiteness_random_inputs():
    m = ScoreModel(dim=2, schedule=VE, seed=3)
    rng = np.random.default_rng(2)
    x = rng.normal(scale=30, size=(1000, 2))
    t = rng.uniform(VE.eps_time, 1.0, 1000)
    assert np.all(np.isfinite(m.score_np(x, t)))


def test_time_floor():
    m = small()
    with pytest.raises(DomainError):
        m.score_np(np.zeros((1, 1)), 1e-6)
    with pytest.raises(ValueError):
        m.score_np(np.zeros((1, 2)), 0.5)


def test_deterministic_init_and_checkpoint_roundtrip(tmp_path):
    a, b = ScoreModel(dim=2, seed=11), ScoreModel(dim=2, seed=11)
    assert a.theta.tobytes() == b.theta.tobytes()
    assert ScoreModel(dim=2, seed=12).theta.tobytes() != a.theta.tobytes()
    a.theta = a.theta + np.random.default_rng(0).normal(size=a.n_params) * 1e-3
    a.save(tmp_path / "ck.json")
    c = ScoreModel.load(tmp_path / "ck.json")
    assert c.theta.tobytes() == a.theta.tobytes()
    assert (c.dim, c.t_width, c.schedule) == (a.dim, a.t_width, a.schedule)


def test_score_jvp_examples():
    m = small(dim=2, seed=4)
    rng = np.random.default_rng(4)
    x, t, v = rng.normal(size=(6, 2)), rng.uniform(0.01, 1, 6), rng.normal(size=(6, 2))
    _, z = m.score_jvp(x, t, np.zeros_like(v))
    np.testing.assert_array_equal(z.value, 0.0)
    _, j1 = m.score_jvp(x, t, v)
    _, j2 = m.score_jvp(x, t, 2 * v)
    np.testing.assert_array_equal(j2.value, 2 * j1.value)
    m1 = small(dim=1, seed=5)
    x1, t1 = rng.normal(size=(6, 1)), rng.uniform(0.01, 1, 6)
    _, d1 = m1.score_jvp(x1, t1, np.ones((6, 1)))
    assert rel(d1.value, fd_jac(m1, x1, t1)[:, :, 0]) < 1e-5


def test_grad_div_dim1_second_derivative():
    m = small(dim=1, seed=6)
    rng = np.random.default_rng(6)
    x, t = rng.normal(size=(5, 1)), rng.uniform(0.01, 1, 5)
    _, gd, _ = m.grad_div(x, t, np.ones((5, 1)))
    h = 1e-4

    def d1(z):
        return m.score_jvp(z, t, np.ones((5, 1)))[1].value

    ref = (d1(x + h) - d1(x - h)) / (2 * h)
    assert rel(gd.value, ref) < 1e-4


def test_grad_div_zero_for_affine_score():
    m = small(dim=2, seed=7)
    # with x-independent hidden activations the model is constant in x
    m.theta[[i for n, _, lo, hi in m._layout if n == "x1.W" for i in range(lo, hi)]] = 0.0
    x = np.random.default_rng(7).normal(size=(4, 2))
    s_jvp, gd, _ = m.grad_div(x, 0.5, np.ones((4, 2)))
    np.testing.assert_array_equal(gd.value, 0.0)
    np.testing.assert_array_equal(s_jvp.value, 0.0)


def test_hutchinson_matches_trace():
    m = small(dim=2, seed=8)
    x = np.array([[0.3, -0.5]])
    t = 0.3
    n = 10_000
    rng = np.random.default_rng(8)
    v = rng.integers(0, 2, size=(n, 2)) * 2.0 - 1.0
    xs = np.repeat(x, n, axis=0)
    _, jv = m.score_jvp(xs, t, v)
    est = np.sum(v * jv.value, axis=1)
    tr = np.trace(m.full_jacobian(x, t).value[0])
    assert abs(est.mean() - tr) < 4 * est.std(ddof=1) / np.sqrt(n) + 1e-12


def test_full_jacobian_and_exact_path():
    for dim in (1, 2, 3):
        m = small(dim=dim, seed=9 + dim)
        rng = np.random.default_rng(dim)
        x, t = rng.normal(size=(4, dim)), rng.uniform(0.01, 1, 4)
        jac = m.full_jacobian(x, t).value
        assert np.max(np.abs(jac - fd_jac(m, x, t))) < 1e-5
        s, jac2, div, dg = m.exact_derivs(x, t)
        np.testing.assert_allclose(jac2.value, jac, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(div.value, np.trace(jac, axis1=1, axis2=2), rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(s.value, m.score_np(x, t), rtol=1e-13)
        # gradient of the divergence two ways: finite differences and vjp-over-jvp with basis probes
        h = 1e-5
        ref = np.zeros((4, dim))
        for k in range(dim):
            e = np.zeros(dim)
            e[k] = h
            tp = np.trace(m.full_jacobian(x + e, t).value, axis1=1, axis2=2)
            tm = np.trace(m.full_jacobian(x - e, t).value, axis1=1, axis2=2)
            ref[:, k] = (tp - tm) / (2 * h)
        assert np.max(np.abs(dg.value - ref)) < 1e-5 * max(1.0, np.max(np.abs(ref)))
        basis = sum(m.grad_div(x, t, np.tile(np.eye(dim)[i], (4, 1)))[1].value for i in range(dim))
        np.testing.assert_allclose(basis, dg.value, rtol=1e-10, atol=1e-12)
    m1 = small(dim=1)
    x = np.array([[0.2]])
    np.testing.assert_allclose(m1.full_jacobian(x, 0.5).value[:, :, 0], m1.score_jvp(x, 0.5, np.ones((1, 1)))[1].value)


def test_exact_path_dimension_limit():
    m = ScoreModel(dim=5, schedule=VE, n_freq=4, t_width=8, x_width=8, head_width=8)
    with pytest.raises(ValueError, match="estimated"):
        m.full_jacobian(np.zeros((1, 5)), 0.5)
    with pytest.raises(ValueError, match="estimated"):
        m.exact_div_grad(np.zeros((1, 5)), 0.5)
