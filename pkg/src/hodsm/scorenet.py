"""MLP score model with a sinusoidal noise-level embedding and input-derivative accessors.

The network predicts ``sigma_t * s(x, t)``, so ``score = net / sigma_t``.
With ``input_scale`` the spatial input is ``x / sqrt(alpha_t^2 + sigma_t^2)``,
which keeps it at unit scale for unit-scale data at every noise level.
All accessors take parameters either as the model's own ``theta`` (plain
evaluation) or as tensors bound to a tape (training), see :meth:`ScoreModel.bind`.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .schedule import DiffusionSchedule, DomainError

CHECKPOINT_FORMAT = "hodsm-scorenet"
CHECKPOINT_VERSION = 1
MAX_EXACT_DIM = 4


@dataclass
class ScoreModel:
    dim: int
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    n_freq: int = 32
    t_width: int = 64
    x_width: int = 64
    head_width: int = 128
    embed_scale: float = 4.0
    max_positions: float = 10000.0
    seed: int = 0
    zero_head: bool = False
    input_scale: bool = True
    theta: np.ndarray | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        shapes = self.param_shapes()
        self._layout = []
        offset = 0
        for name, shp in shapes:
            size = int(np.prod(shp))
            self._layout.append((name, shp, offset, offset + size))
            offset += size
        self.n_params = offset
        if self.theta is None:
            self.theta = self._init_theta()
        else:
            self.theta = np.asarray(self.theta, dtype=np.float64).copy()
            if self.theta.shape != (self.n_params,):
                raise ValueError(f"theta has {self.theta.size} entries, expected {self.n_params}")

    def param_shapes(self):
        e, tw, xw, hw = 2 * self.n_freq, self.t_width, self.x_width, self.head_width
        return [
            ("t1.W", (e, tw)), ("t1.b", (tw,)),
            ("t2.W", (tw, tw)), ("t2.b", (tw,)),
            ("x1.W", (self.dim, xw)), ("x1.b", (xw,)),
            ("x2.W", (xw, xw)), ("x2.b", (xw,)),
            ("h1.W", (tw + xw, hw)), ("h1.b", (hw,)),
            ("h2.W", (hw, self.dim)), ("h2.b", (self.dim,)),
        ]

    def _init_theta(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        theta = np.zeros(self.n_params)
        for name, shp, lo, hi in self._layout:
            if name.endswith(".W"):
                w = rng.standard_normal(shp) / np.sqrt(shp[0])
                if name == "h2.W" and self.zero_head:
                    w[:] = 0.0
                theta[lo:hi] = w.ravel()
        return theta

    # -- parameters ----------------------------------------------------------

    def params(self, theta=None) -> dict:
        theta = self.theta if theta is None else theta
        if isinstance(theta, ad.Tensor):
            return {n: ad.reshape(ad.getitem(theta, slice(lo, hi)), shp) for n, shp, lo, hi in self._layout}
        return {n: ad.Tensor(theta[lo:hi].reshape(shp)) for n, shp, lo, hi in self._layout}

    def bind(self, tape: ad.Tape):
        """Record ``theta`` as a leaf on ``tape``; returns ``(theta_leaf, params)``."""
        leaf = tape.leaf(self.theta)
        return leaf, self.params(leaf)

    # -- forward -------------------------------------------------------------

    def _times(self, t, batch: int) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        if np.any(t < self.schedule.eps_time * (1 - 1e-12)) or np.any(t > self.schedule.T):
            raise DomainError(f"score model needs t in [{self.schedule.eps_time}, {self.schedule.T}]")
        return t

    def embed(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        c = self.embed_scale * np.log(self.schedule.sigma(t))
        freqs = np.exp(-np.log(self.max_positions) * np.arange(self.n_freq) / max(self.n_freq - 1, 1))
        arg = c[:, None] * freqs
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)

    def net(self, x, t, params=None):
        """Noise-prediction output for points ``x`` of shape ``(B, dim)``."""
        p = self.params() if params is None else params
        if ad._shape(x)[-1] != self.dim:
            raise ValueError(f"dimension mismatch: x has {ad._shape(x)[-1]} coords, model has {self.dim}")
        t = self._times(t, ad._shape(x)[0])
        h_t = ad.Tensor(self.embed(t))
        h_t = ad.add(ad.matmul(h_t, p["t1.W"]), p["t1.b"])
        h_t = ad.add(ad.matmul(ad.swish(h_t), p["t2.W"]), p["t2.b"])
        if self.input_scale:
            alpha, sigma = self.schedule.alpha_sigma(t)
            x = ad.mul(x, (1.0 / np.sqrt(alpha**2 + sigma**2))[:, None])
        h_x = ad.add(ad.matmul(x, p["x1.W"]), p["x1.b"])
        h_x = ad.add(ad.matmul(ad.swish(h_x), p["x2.W"]), p["x2.b"])
        h = ad.swish(ad.concat([h_t, h_x], axis=-1))
        h = ad.swish(ad.add(ad.matmul(h, p["h1.W"]), p["h1.b"]))
        return ad.add(ad.matmul(h, p["h2.W"]), p["h2.b"])

    def score(self, x, t, params=None):
        out = self.net(x, t, params)
        t = self._times(t, ad._shape(x)[0])
        return ad.mul(out, (1.0 / self.schedule.sigma(t))[:, None])

    def score_jvp(self, x, t, v, params=None):
        """``(s, (ds/dx) v)``; both stay differentiable graph nodes."""
        if isinstance(x, np.ndarray):
            x = ad.Tensor(x)
        return ad.jvp(lambda z: self.score(z, t, params), x, v)

    def grad_div(self, x, t, v, params=None):
        """``(s_jvp, v^T d(s_jvp)/dx, s)`` by a reverse pass over the forward tangent."""
        tape = None
        if params is not None:
            tape = next((q.tape for q in params.values() if isinstance(q, ad.Tensor) and q.tracked), None)
        tape = ad.Tape() if tape is None else tape
        x_leaf = tape.leaf(ad.value_of(x))
        box = {}

        def tangent(z):
            s, s_jvp = self.score_jvp(z, t, v, params)
            box["s"] = s
            return s_jvp

        s_jvp, gd = ad.vjp(tangent, x_leaf, v)
        return s_jvp, gd, box["s"]

    def exact_derivs(self, x, t, params=None):
        """Score, Jacobian ``(B, d, d)``, divergence ``(B,)`` and its gradient ``(B, d)``.

        One forward-over-forward pass on a batch tiled over all coordinate pairs.
        """
        d = self.dim
        if d > MAX_EXACT_DIM:
            raise ValueError(f"exact derivatives are limited to dim <= {MAX_EXACT_DIM}; use the estimated objectives")
        x = ad.value_of(x)
        b = x.shape[0]
        t = self._times(t, b)
        eye = np.eye(d)
        x_rep = np.repeat(x, d * d, axis=0)
        e_i = np.tile(np.repeat(eye, d, axis=0), (b, 1))
        e_k = np.tile(np.tile(eye, (d, 1)), (b, 1))
        t_rep = np.repeat(t, d * d)
        tag1, tag2 = ad.new_tag(), ad.new_tag()
        z = ad.Dual(ad.Dual(ad.Tensor(x_rep), ad.Tensor(e_i), tag1), ad.Tensor(e_k), tag2)
        out = self.score(z, t_rep, params)
        inner, outer = ad._split(out, tag2)
        s, ji = ad._split(inner, tag1)
        _, dki = ad._split(outer, tag1) if outer is not None else (None, None)
        zeros = ad.Tensor(np.zeros((b * d * d, d)))
        ji = zeros if ji is None else ji
        dki = zeros if dki is None else dki
        # rows are ordered (b, i, k); ji[b, i, k, j] = J_b[j, i], dki[b, i, k, j] = d_k d_i s_j
        s = ad.getitem(ad.reshape(s, (b, d * d, d)), (slice(None), 0))
        cols = ad.getitem(ad.reshape(ji, (b, d, d, d)), (slice(None), slice(None), 0))
        jac = ad.transpose(cols)
        diag = eye.reshape(1, d, 1, d)
        div = ad.sum(ad.mul(cols, eye[None]), axis=(1, 2))
        div_grad = ad.sum(ad.mul(ad.reshape(dki, (b, d, d, d)), diag), axis=(1, 3))
        return s, jac, div, div_grad

    def full_jacobian(self, x, t, params=None):
        if self.dim > MAX_EXACT_DIM:
            raise ValueError(f"exact Jacobian is limited to dim <= {MAX_EXACT_DIM}; use the estimated objectives")
        d = self.dim
        xv = ad.value_of(x)
        b = xv.shape[0]
        t = self._times(t, b)
        x_rep = np.repeat(xv, d, axis=0)
        e = np.tile(np.eye(d), (b, 1))
        _, cols = self.score_jvp(ad.Tensor(x_rep), np.repeat(t, d), e, params)
        return ad.transpose(ad.reshape(cols, (b, d, d)))

    def exact_div_grad(self, x, t, params=None):
        _, _, div, div_grad = self.exact_derivs(x, t, params)
        return div, div_grad

    # -- numpy conveniences ----------------------------------------------------

    def score_np(self, x, t) -> np.ndarray:
        with ad.no_record():
            return self.score(np.asarray(x, dtype=np.float64), t).value

    def net_np(self, x, t) -> np.ndarray:
        with ad.no_record():
            return self.net(np.asarray(x, dtype=np.float64), t).value

    # -- checkpoints -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dim": self.dim,
            "widths": {"n_freq": self.n_freq, "t": self.t_width, "x": self.x_width, "head": self.head_width},
            "embed_scale": self.embed_scale,
            "max_positions": self.max_positions,
            "seed": self.seed,
            "input_scale": self.input_scale,
            "schedule": self.schedule.to_dict(),
            "n_params": self.n_params,
            "theta_f64le": base64.b64encode(self.theta.astype("<f8").tobytes()).decode("ascii"),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreModel":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a score model checkpoint of a supported version")
        theta = np.frombuffer(base64.b64decode(d["theta_f64le"]), dtype="<f8").astype(np.float64)
        w = d["widths"]
        return cls(
            dim=d["dim"],
            schedule=DiffusionSchedule.from_dict(d["schedule"]),
            n_freq=w["n_freq"],
            t_width=w["t"],
            x_width=w["x"],
            head_width=w["head"],
            embed_scale=d["embed_scale"],
            max_positions=d["max_positions"],
            seed=d["seed"],
            input_scale=d.get("input_scale", False),
            theta=theta,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ScoreModel":
        return cls.from_dict(json.loads(Path(path).read_text()))
