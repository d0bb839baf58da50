"""Denoising score matching objectives of orders one to three.

Loss functions take model quantities (tensors, duals or arrays) plus a
:class:`BatchSample` and return a scalar. Lower-order estimates passed in as
``*_hat`` must already be stop-gradient copies; :func:`total_loss` takes care
of that. Every loss is a batch mean of a per-sample norm divided by ``dim``.
The sigma prefactors are the time-reweighted forms used for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .schedule import DiffusionSchedule


@dataclass(frozen=True)
class BatchSample:
    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray

    @property
    def dim(self) -> int:
        return self.x0.shape[1]

    @property
    def size(self) -> int:
        return self.x0.shape[0]

    @classmethod
    def build(cls, sched: DiffusionSchedule, x0, eps, t) -> "BatchSample":
        x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],)).copy()
        alpha, sigma = sched.alpha_sigma(t)
        x_t = sched.perturb(x0, eps, t)
        return cls(x0, eps, t, x_t, alpha, sigma)


@dataclass(frozen=True)
class LossBreakdown:
    """Loss values of one batch. Terms with zero weight are not evaluated and read 0."""

    j1: float
    j2: float
    j2_trace: float
    j3: float
    total: float
    lambda1: float
    lambda2: float

    def as_row(self) -> dict:
        return {"j1": self.j1, "j2": self.j2, "j2_trace": self.j2_trace, "j3": self.j3, "total": self.total}


def _col(a):
    return np.asarray(a)[:, None]


def _mat(a):
    return np.asarray(a)[:, None, None]


def _batch_mean(per_sample, dim):
    return ad.mul(ad.mean(per_sample), 1.0 / dim)


def ell1(s1_hat, eps, sigma):
    """``sigma * s1_hat + eps`` per sample."""
    return ad.value_of(s1_hat) * _col(sigma) + np.asarray(eps)


def ell2(s2_hat, sigma):
    d = np.shape(ad.value_of(s2_hat))[-1]
    return ad.value_of(s2_hat) * _mat(sigma) ** 2 + np.eye(d)


def ell3(l1, l2):
    """``(|l1|^2 - tr l2) l1 - 2 l2 l1`` for batched ``l1 (B, d)`` and ``l2 (B, d, d)``."""
    l1 = np.asarray(l1)
    l2 = np.asarray(l2)
    coef = np.sum(l1**2, axis=-1) - np.trace(l2, axis1=-2, axis2=-1)
    return coef[..., None] * l1 - 2.0 * np.einsum("...ij,...j->...i", l2, l1)


def loss_first(s, batch: BatchSample):
    r = ad.add(ad.mul(s, _col(batch.sigma)), batch.eps)
    return _batch_mean(ad.sq_norm(r), batch.dim)


def loss_second_exact(jac, s1_hat, batch: BatchSample):
    d = batch.dim
    l1 = ell1(s1_hat, batch.eps, batch.sigma)
    target = l1[:, :, None] * l1[:, None, :] - np.eye(d)
    r = ad.sub(ad.mul(jac, _mat(batch.sigma) ** 2), target)
    return _batch_mean(ad.sum(ad.mul(r, r), axis=(1, 2)), d)


def loss_second_est(s_jvp, s1_hat, batch: BatchSample, v):
    l1 = ell1(s1_hat, batch.eps, batch.sigma)
    a = np.sum(l1 * v, axis=-1)
    r = ad.add(ad.mul(s_jvp, _col(batch.sigma) ** 2), v - a[:, None] * l1)
    return _batch_mean(ad.sq_norm(r), batch.dim)


def loss_second_trace_exact(div, s1_hat, batch: BatchSample):
    l1 = ell1(s1_hat, batch.eps, batch.sigma)
    r = ad.add(ad.mul(div, batch.sigma**2), batch.dim - np.sum(l1**2, axis=-1))
    return _batch_mean(ad.mul(r, r), batch.dim)


def loss_second_trace_est(s_jvp, s1_hat, batch: BatchSample, v):
    l1 = ell1(s1_hat, batch.eps, batch.sigma)
    a = np.sum(l1 * v, axis=-1)
    quad = ad.inner(v, s_jvp)
    r = ad.add(ad.mul(quad, batch.sigma**2), np.sum(v * v, axis=-1) - a**2)
    return _batch_mean(ad.mul(r, r), batch.dim)


def loss_third_exact(div_grad, s1_hat, s2_hat, batch: BatchSample):
    l1 = ell1(s1_hat, batch.eps, batch.sigma)
    l3 = ell3(l1, ell2(s2_hat, batch.sigma))
    r = ad.add(ad.mul(div_grad, _col(batch.sigma) ** 3), l3)
    return _batch_mean(ad.sq_norm(r), batch.dim)


def loss_third_est(div_grad_v, s1_hat, s_jvp_hat, batch: BatchSample, v):
    sig = _col(batch.sigma)
    l1 = ell1(s1_hat, batch.eps, batch.sigma)
    a = np.sum(l1 * v, axis=-1)[:, None]
    sj = ad.value_of(s_jvp_hat)
    quad = sig**2 * np.sum(v * sj, axis=-1, keepdims=True) + np.sum(v * v, axis=-1, keepdims=True)
    target = a**2 * l1 - quad * l1 - 2.0 * a * (sig**2 * sj + v)
    r = ad.add(ad.mul(div_grad_v, sig**3), target)
    return _batch_mean(ad.sq_norm(r), batch.dim)


def draw_probe(rng: np.random.Generator, shape, kind: str = "rademacher") -> np.ndarray:
    if kind == "rademacher":
        return rng.integers(0, 2, size=shape) * 2.0 - 1.0
    if kind == "gaussian":
        return rng.standard_normal(shape)
    raise ValueError(f"unknown probe kind {kind!r}")


def default_mode(dim: int) -> str:
    return "exact" if dim <= 2 else "estimated"


def total_loss(model, params, batch: BatchSample, lambda1: float = 0.0, lambda2: float = 0.0,
               mode: str | None = None, v=None):
    """Combined objective ``j1 + lambda1 (j2 + j2_trace) + lambda2 j3``.

    Returns ``(total_tensor, LossBreakdown)``. ``params`` are model parameters
    (bound to a tape for training, or ``None`` for plain evaluation). The
    estimated mode needs one probe vector per sample in ``v``.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    mode = default_mode(batch.dim) if mode is None else mode
    if mode not in ("exact", "estimated"):
        raise ValueError(f"unknown mode {mode!r}")
    x, t = batch.x_t, batch.t
    zero = ad.Tensor(0.0)
    j2 = j2tr = j3 = zero
    if lambda1 == 0.0 and lambda2 == 0.0:
        s = model.score(x, t, params)
        j1 = loss_first(s, batch)
    elif mode == "exact":
        if lambda2 > 0.0:
            s, jac, div, div_grad = model.exact_derivs(x, t, params)
        else:
            s = model.score(x, t, params)
            jac = model.full_jacobian(x, t, params)
            div = ad.sum(ad.mul(jac, np.eye(batch.dim)[None]), axis=(1, 2))
        s1_hat = ad.stop_gradient(s)
        j1 = loss_first(s, batch)
        if lambda1 > 0.0:
            j2 = loss_second_exact(jac, s1_hat, batch)
            j2tr = loss_second_trace_exact(div, s1_hat, batch)
        if lambda2 > 0.0:
            j3 = loss_third_exact(div_grad, s1_hat, ad.stop_gradient(jac), batch)
    else:
        if v is None:
            raise ValueError("estimated mode needs probe vectors")
        v = np.asarray(v, dtype=np.float64)
        if lambda2 > 0.0:
            s_jvp, gdv, s = model.grad_div(x, t, v, params)
        else:
            s, s_jvp = model.score_jvp(x, t, v, params)
        s1_hat = ad.stop_gradient(s)
        j1 = loss_first(s, batch)
        if lambda1 > 0.0:
            j2 = loss_second_est(s_jvp, s1_hat, batch, v)
            j2tr = loss_second_trace_est(s_jvp, s1_hat, batch, v)
        if lambda2 > 0.0:
            j3 = loss_third_est(gdv, s1_hat, ad.stop_gradient(s_jvp), batch, v)
    total = j1
    if lambda1 > 0.0:
        total = ad.add(total, ad.mul(ad.add(j2, j2tr), lambda1))
    if lambda2 > 0.0:
        total = ad.add(total, ad.mul(j3, lambda2))
    parts = [float(ad.value_of(q)) for q in (j1, j2, j2tr, j3, total)]
    return total, LossBreakdown(*parts, lambda1=float(lambda1), lambda2=float(lambda2))
