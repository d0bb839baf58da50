"""Ground-truth densities: isotropic Gaussian mixtures with closed-form scores, and a checkerboard.

Mixtures may carry leading batch dimensions on their parameters
(``means: (..., K, d)``, ``variances: (..., K)``). That is how a mixture
diffused to a different time per sample is represented; ``x`` then has
matching leading dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .schedule import DiffusionSchedule

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class MixtureDensity:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        v = np.asarray(self.variances, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        if w.ndim != 1 or mu.shape[-2] != w.shape[0] or v.shape[-1] != w.shape[0]:
            raise ValueError("weights, means and variances disagree on the component count")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(v <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", v)

    @property
    def dim(self) -> int:
        return self.means.shape[-1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureDensity":
        unknown = set(d) - {"weights", "means", "variances"}
        if unknown:
            raise ValueError(f"unknown mixture keys: {sorted(unknown)}")
        return cls(d["weights"], d["means"], d["variances"])

    # -- closed forms ------------------------------------------------------

    def _terms(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"dimension mismatch: x has {x.shape[-1]} coords, density has {self.dim}")
        diff = x[..., None, :] - self.means  # (..., K, d)
        v = self.variances
        log_comp = (
            np.log(self.weights)
            - 0.5 * self.dim * (LOG_2PI + np.log(v))
            - 0.5 * np.sum(diff**2, axis=-1) / v
        )
        top = np.max(log_comp, axis=-1, keepdims=True)
        unnorm = np.exp(log_comp - top)
        total = np.sum(unnorm, axis=-1, keepdims=True)
        log_pdf = np.log(total[..., 0]) + top[..., 0]
        resp = unnorm / total
        comp_scores = -diff / v[..., None]
        return log_pdf, resp, comp_scores

    def log_pdf(self, x):
        return self._terms(x)[0]

    def pdf(self, x):
        return np.exp(self.log_pdf(x))

    def responsibilities(self, x):
        return self._terms(x)[1]

    def score1(self, x):
        _, resp, s = self._terms(x)
        return np.einsum("...k,...kd->...d", resp, s)

    def score2(self, x):
        _, resp, s = self._terms(x)
        s1 = np.einsum("...k,...kd->...d", resp, s)
        delta = s - s1[..., None, :]
        eye = np.eye(self.dim)
        comp = -eye / self.variances[..., None, None] + delta[..., :, None] * delta[..., None, :]
        return np.einsum("...k,...kij->...ij", resp, comp)

    def score3(self, x):
        """Gradient of the trace of the Hessian of ``log_pdf``."""
        _, resp, s = self._terms(x)
        s1 = np.einsum("...k,...kd->...d", resp, s)
        delta = s - s1[..., None, :]
        coef = np.sum(delta**2, axis=-1) - (self.dim + 2) / self.variances
        return np.einsum("...k,...kd->...d", resp * coef, delta)

    # -- sampling ----------------------------------------------------------

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.means.ndim != 2:
            raise ValueError("sampling needs an unbatched mixture")
        if n == 0:
            return np.zeros((0, self.dim))
        k = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[k] + np.sqrt(self.variances[k])[:, None] * z

    def posterior(self, x_t, alpha: float, sigma: float) -> "MixtureDensity":
        """Exact posterior of ``x0`` given ``x_t = alpha x0 + sigma eps`` for a single point.

        The result is again an isotropic mixture in ``x0``.
        """
        x_t = np.asarray(x_t, dtype=np.float64).reshape(self.dim)
        a2v = alpha**2 * self.variances
        marginal = MixtureDensity(self.weights, alpha * self.means, a2v + sigma**2)
        resp = marginal.responsibilities(x_t)
        post_var = self.variances * sigma**2 / (sigma**2 + a2v)
        post_mean = post_var[:, None] * (self.means / self.variances[:, None] + alpha * x_t / sigma**2)
        # renormalize in case of underflowed components
        resp = np.maximum(resp, 1e-300)
        resp = resp / resp.sum()
        return MixtureDensity(resp, post_mean, post_var)


def diffuse(q0: MixtureDensity, sched: DiffusionSchedule, t) -> MixtureDensity:
    """Marginal ``q_t`` of the forward process started at ``q0``.

    A scalar ``t`` gives an ordinary mixture; an array ``t`` of shape ``(B,)``
    gives a batched mixture whose ``b``-th member is ``q_{t[b]}``.
    """
    alpha, sigma = sched.alpha_sigma(t)
    alpha = np.asarray(alpha)[..., None]
    sigma = np.asarray(sigma)[..., None]
    means = alpha[..., None] * q0.means
    variances = alpha**2 * q0.variances + sigma**2
    return MixtureDensity(q0.weights, means, variances)


def trimodal_mog(scale_is: str = "variance") -> MixtureDensity:
    """The 1-D three-component mixture used for the density experiments.

    ``scale_is="variance"`` reads the second Gaussian argument ``1/9^2`` as a
    variance; ``"std"`` reads it as a standard deviation.
    """
    base = np.array([1.0, 1.0, 2.0]) / 81.0
    if scale_is == "variance":
        variances = base
    elif scale_is == "std":
        variances = base**2
    else:
        raise ValueError("scale_is must be 'variance' or 'std'")
    means = np.array([[-2.0 / 9.0], [-2.0 / 3.0], [4.0 / 9.0]])
    return MixtureDensity(np.array([0.4, 0.4, 0.2]), means, variances)


@dataclass
class CheckerboardSampler:
    """Uniform density on the dark cells of a square board centred at the origin."""

    cell_size: float = 1.0
    extent: float = 2.0
    rng_seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        n = 2.0 * self.extent / self.cell_size
        if abs(n - round(n)) > 1e-9 or n < 2:
            raise ValueError("extent must be a multiple of cell_size/2 with at least 2 cells per side")
        self._rng = np.random.default_rng(self.rng_seed)

    dim = 2

    @property
    def cells_per_side(self) -> int:
        return int(round(2.0 * self.extent / self.cell_size))

    def dark_cells(self) -> np.ndarray:
        n = self.cells_per_side
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        mask = (i + j) % 2 == 0
        return np.stack([i[mask], j[mask]], axis=1)

    def contains(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        idx = np.floor((points + self.extent) / self.cell_size).astype(int)
        n = self.cells_per_side
        inside = np.all((idx >= 0) & (idx < n), axis=-1)
        return inside & ((idx[..., 0] + idx[..., 1]) % 2 == 0)

    def sample(self, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = self._rng if rng is None else rng
        cells = self.dark_cells()
        pick = cells[rng.integers(len(cells), size=n)]
        u = rng.uniform(0.0, 1.0, size=(n, 2))
        return -self.extent + (pick + u) * self.cell_size

    def to_dict(self) -> dict:
        return {"kind": "checkerboard", "cell_size": self.cell_size, "extent": self.extent}


def sample(q, n: int, seed: int) -> np.ndarray:
    """Deterministic i.i.d. draws from a mixture or checkerboard for a fixed seed."""
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    return q.sample(n, rng)
