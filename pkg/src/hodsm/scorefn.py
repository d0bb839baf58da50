"""Score adapters with a common numpy interface, and the ODE velocity fields built on them.

A score adapter exposes ``derivs(x, t) -> (s, J, div, div_grad)`` and
``score(x, t)`` on batches ``x (B, d)`` with a scalar or per-sample ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .analytic import MixtureDensity, diffuse
from .schedule import DiffusionSchedule, _bcast
from .scorenet import ScoreModel


def _times(t, n):
    return np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()


class ModelScore:
    """Evaluates a :class:`ScoreModel` without recording a graph."""

    def __init__(self, model: ScoreModel, chunk: int = 20000):
        self.model = model
        self.schedule = model.schedule
        self.dim = model.dim
        self.chunk = chunk

    def _chunked(self, fn, x, t):
        x = np.asarray(x, dtype=np.float64)
        t = _times(t, x.shape[0])
        if x.shape[0] <= self.chunk:
            return fn(x, t)
        parts = [fn(x[i:i + self.chunk], t[i:i + self.chunk]) for i in range(0, x.shape[0], self.chunk)]
        if isinstance(parts[0], tuple):
            return tuple(np.concatenate(p, axis=0) for p in zip(*parts))
        return np.concatenate(parts, axis=0)

    def score(self, x, t):
        def fn(x, t):
            with ad.no_record():
                return self.model.score(x, t).value
        return self._chunked(fn, x, t)

    def derivs(self, x, t):
        def fn(x, t):
            with ad.no_record():
                return tuple(q.value for q in self.model.exact_derivs(x, t))
        return self._chunked(fn, x, t)

    def jvp(self, x, t, v):
        v = np.asarray(v, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        out = []
        for i in range(0, x.shape[0], self.chunk):
            sl = slice(i, i + self.chunk)
            with ad.no_record():
                out.append(self.model.score_jvp(x[sl], _times(t, x.shape[0])[sl], v[sl])[1].value)
        return np.concatenate(out, axis=0)


class AnalyticScore:
    """Closed-form scores of the diffused mixture ``q_t``."""

    def __init__(self, q0: MixtureDensity, schedule: DiffusionSchedule):
        self.q0 = q0
        self.schedule = schedule
        self.dim = q0.dim

    def marginal(self, t, n):
        return diffuse(self.q0, self.schedule, _times(t, n))

    def score(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        return self.marginal(t, x.shape[0]).score1(x)

    def derivs(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        q = self.marginal(t, x.shape[0])
        jac = q.score2(x)
        return q.score1(x), jac, np.trace(jac, axis1=1, axis2=2), q.score3(x)

    def jvp(self, x, t, v):
        x = np.asarray(x, dtype=np.float64)
        return np.einsum("bij,bj->bi", self.marginal(t, x.shape[0]).score2(x), v)


class ZeroScore:
    def __init__(self, schedule: DiffusionSchedule, dim: int):
        self.schedule = schedule
        self.dim = dim

    def score(self, x, t):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    def derivs(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        b, d = x.shape
        return np.zeros_like(x), np.zeros((b, d, d)), np.zeros(b), np.zeros_like(x)

    def jvp(self, x, t, v):
        return np.zeros_like(np.asarray(v, dtype=np.float64))


@dataclass
class ProbabilityFlow:
    """``h(x, t) = f(x, t) - g(t)^2 s(x, t) / 2`` and its input derivatives."""

    scorefn: object

    @property
    def schedule(self) -> DiffusionSchedule:
        return self.scorefn.schedule

    @property
    def dim(self) -> int:
        return self.scorefn.dim

    def _coefs(self, t, n):
        t = _times(t, n)
        return self.schedule.drift_coef(t), self.schedule.diffusion(t) ** 2

    def velocity(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        a, g2 = self._coefs(t, x.shape[0])
        return _bcast(a, x) * x - 0.5 * _bcast(g2, x) * self.scorefn.score(x, t)

    def velocity_derivs(self, x, t, with_score: bool = False):
        """Return ``(h, dh/dx, tr dh/dx, grad tr dh/dx)`` batched, plus the score if asked."""
        x = np.asarray(x, dtype=np.float64)
        b, d = x.shape
        a, g2 = self._coefs(t, b)
        s, jac, div, dg = self.scorefn.derivs(x, t)
        h = a[:, None] * x - 0.5 * g2[:, None] * s
        jh = a[:, None, None] * np.eye(d) - 0.5 * g2[:, None, None] * jac
        tr = d * a - 0.5 * g2 * div
        gtr = -0.5 * g2[:, None] * dg
        if with_score:
            return h, jh, tr, gtr, s
        return h, jh, tr, gtr

    def trace_estimate(self, x, t, v):
        """``(h, v^T (dh/dx) v)``: one-probe Hutchinson estimate of the divergence."""
        x = np.asarray(x, dtype=np.float64)
        a, g2 = self._coefs(t, x.shape[0])
        h = _bcast(a, x) * x - 0.5 * _bcast(g2, x) * self.scorefn.score(x, t)
        quad = np.sum(v * self.scorefn.jvp(x, t, v), axis=1)
        return h, a * np.sum(v * v, axis=1) - 0.5 * g2 * quad

    def prior_logpdf(self, x):
        return gaussian_logpdf(x, self.schedule.prior_std())

    def prior_score(self, x):
        return -np.asarray(x) / self.schedule.prior_std() ** 2


@dataclass
class LinearFlow:
    """``h(x, t) = a x``; a closed-form test case for the ODE machinery."""

    a: float
    dim: int
    schedule: DiffusionSchedule

    def velocity(self, x, t):
        return self.a * np.asarray(x, dtype=np.float64)

    def velocity_derivs(self, x, t, with_score: bool = False):
        x = np.asarray(x, dtype=np.float64)
        b, d = x.shape
        out = (self.a * x, np.broadcast_to(self.a * np.eye(d), (b, d, d)), np.full(b, d * self.a), np.zeros_like(x))
        return out + (np.zeros_like(x),) if with_score else out

    def trace_estimate(self, x, t, v):
        return self.a * np.asarray(x, dtype=np.float64), self.a * np.sum(v * v, axis=1)

    def prior_logpdf(self, x):
        return gaussian_logpdf(x, self.schedule.prior_std())

    def prior_score(self, x):
        return -np.asarray(x) / self.schedule.prior_std() ** 2


def gaussian_logpdf(x, std: float):
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    return -0.5 * d * np.log(2 * np.pi * std**2) - 0.5 * np.sum(x**2, axis=-1) / std**2
