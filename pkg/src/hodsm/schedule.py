"""Forward diffusion processes (VE and VP) and their Gaussian perturbation kernels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

T_END = 1.0


class DomainError(ValueError):
    """Raised when a time argument falls outside ``[0, T]``."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear forward SDE ``dx = f(x, t) dt + g(t) dw`` with kernel ``N(alpha_t x0, sigma_t^2 I)``.

    ``kind`` is ``"ve"`` (geometric noise levels, zero drift) or ``"vp"``
    (linear beta schedule). Only the constants of the chosen kind are used.
    """

    kind: str = "ve"
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    beta_min: float = 0.1
    beta_max: float = 20.0
    eps_time: float = 1e-5
    T: float = T_END

    def __post_init__(self):
        if self.kind not in ("ve", "vp"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.T != T_END:
            raise ValueError("the horizon T is fixed to 1.0")
        if not 0.0 < self.eps_time < self.T:
            raise ValueError("eps_time must lie in (0, T)")
        if self.kind == "ve" and not 0.0 < self.sigma_min < self.sigma_max:
            raise ValueError("VE schedule needs 0 < sigma_min < sigma_max")
        if self.kind == "vp" and not 0.0 < self.beta_min <= self.beta_max:
            raise ValueError("VP schedule needs 0 < beta_min <= beta_max")

    @classmethod
    def ve(cls, sigma_min=0.01, sigma_max=50.0, eps_time=1e-5):
        return cls(kind="ve", sigma_min=sigma_min, sigma_max=sigma_max, eps_time=eps_time)

    @classmethod
    def vp(cls, beta_min=0.1, beta_max=20.0, eps_time=1e-5):
        return cls(kind="vp", beta_min=beta_min, beta_max=beta_max, eps_time=eps_time)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        if self.kind == "ve":
            d = {"kind": "ve", "sigma_min": self.sigma_min, "sigma_max": self.sigma_max}
        else:
            d = {"kind": "vp", "beta_min": self.beta_min, "beta_max": self.beta_max}
        d["eps_time"] = self.eps_time
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        d = dict(d)
        kind = d.pop("kind")
        if kind == "ve":
            allowed = {"sigma_min", "sigma_max", "eps_time"}
        elif kind == "vp":
            allowed = {"beta_min", "beta_max", "eps_time"}
        else:
            raise ValueError(f"unknown schedule kind {kind!r}")
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(kind=kind, **d)

    # -- kernel and SDE coefficients ---------------------------------------

    def _check(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > self.T) or np.any(~np.isfinite(t)):
            raise DomainError(f"time outside [0, {self.T}]")
        return t

    @property
    def log_ratio(self) -> float:
        return float(np.log(self.sigma_max / self.sigma_min))

    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def _beta_integral(self, t):
        return self.beta_min * t + 0.5 * t**2 * (self.beta_max - self.beta_min)

    def alpha_sigma(self, t):
        """Return ``(alpha_t, sigma_t)``; works elementwise on arrays of times."""
        t = self._check(t)
        if self.kind == "ve":
            return np.ones_like(t), self.sigma_min * (self.sigma_max / self.sigma_min) ** t
        log_alpha = -0.5 * self._beta_integral(t)
        alpha = np.exp(log_alpha)
        # 1 - alpha^2 without cancellation for small t
        return alpha, np.sqrt(-np.expm1(2.0 * log_alpha))

    def sigma(self, t):
        return self.alpha_sigma(t)[1]

    def drift_coef(self, t):
        """Scalar ``a(t)`` with ``f(x, t) = a(t) x``."""
        t = self._check(t)
        if self.kind == "ve":
            return np.zeros_like(t)
        return -0.5 * self.beta(t)

    def drift(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        a = self.drift_coef(t)
        return _bcast(a, x) * x

    def diffusion(self, t):
        t = self._check(t)
        if self.kind == "ve":
            return self.sigma(t) * np.sqrt(2.0 * self.log_ratio)
        return np.sqrt(self.beta(t))

    def perturb(self, x0, noise, t):
        x0 = np.asarray(x0, dtype=np.float64)
        noise = np.asarray(noise, dtype=np.float64)
        if x0.shape != noise.shape:
            raise ValueError(f"dimension mismatch: x0 {x0.shape} vs noise {noise.shape}")
        alpha, sigma = self.alpha_sigma(t)
        return _bcast(alpha, x0) * x0 + _bcast(sigma, x0) * noise

    def prior_std(self) -> float:
        """Standard deviation of the Gaussian prior at ``t = T``."""
        return float(self.sigma(self.T)) if self.kind == "ve" else 1.0

    def sample_times(self, rng: np.random.Generator, n: int):
        return rng.uniform(self.eps_time, self.T, size=n)


def _bcast(coef, x):
    """Broadcast per-sample scalars ``(B,)`` against points ``(B, d)``."""
    coef = np.asarray(coef)
    if coef.ndim == 0 or x.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim))
