"""Training loop: batch assembly, combined loss, Adam updates, checkpoints."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .analytic import CheckerboardSampler, MixtureDensity, trimodal_mog
from .dsm import BatchSample, LossBreakdown, default_mode, draw_probe, total_loss
from .schedule import DiffusionSchedule
from .scorenet import ScoreModel

log = logging.getLogger(__name__)

CSV_COLUMNS = ["step", "j1", "j2", "j2_trace", "j3", "total", "wall_ms"]


class NumericalAbort(RuntimeError):
    def __init__(self, step: int, term: str, value: float):
        super().__init__(f"non-finite {term} ({value}) at step {step}")
        self.step = step
        self.term = term
        self.value = value


def make_dataset(spec: dict):
    """Build a data distribution from its JSON description."""
    spec = dict(spec)
    kind = spec.pop("kind", "mixture")
    if kind == "mixture":
        return MixtureDensity.from_dict(spec)
    if kind == "trimodal":
        return trimodal_mog(**spec)
    if kind == "checkerboard":
        return CheckerboardSampler(**spec)
    raise ValueError(f"unknown dataset kind {kind!r}")


@dataclass
class TrainConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "trimodal"})
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    lambda1: float = 0.5
    lambda2: float = 0.1
    batch_size: int = 5000
    iters: int = 50000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eps_time: float = 1e-5
    seed: int = 0
    mode: str | None = None
    probe: str = "rademacher"
    checkpoint_every: int = 0
    ema_rate: float = 0.0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.iters < 0:
            raise ValueError("iters must be non-negative")
        if not 0.0 < self.eps_time < 1.0:
            raise ValueError("eps_time must lie in (0, 1)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.mode not in (None, "exact", "estimated"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.ema_rate < 1.0:
            raise ValueError("ema_rate must lie in [0, 1)")
        if self.probe not in ("rademacher", "gaussian"):
            raise ValueError(f"unknown probe {self.probe!r}")
        if self.schedule.eps_time != self.eps_time:
            self.schedule = replace(self.schedule, eps_time=self.eps_time)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "schedule" in d:
            sched = dict(d["schedule"])
            if "eps_time" in d:
                sched.setdefault("eps_time", d["eps_time"])
            d["schedule"] = DiffusionSchedule.from_dict(sched)
            d.setdefault("eps_time", d["schedule"].eps_time)
        return cls(**d)


def build_model(cfg: TrainConfig, dim: int) -> ScoreModel:
    return ScoreModel(dim=dim, schedule=cfg.schedule, seed=cfg.seed, **cfg.model)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def sample_batch(cfg: TrainConfig, rng: np.random.Generator, data=None) -> BatchSample:
    data = make_dataset(cfg.dataset) if data is None else data
    x0 = data.sample(cfg.batch_size, rng)
    eps = rng.standard_normal(x0.shape)
    t = cfg.schedule.sample_times(rng, cfg.batch_size)
    return BatchSample.build(cfg.schedule, x0, eps, t)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta, grad, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns fresh ``(theta, state)``."""
    k = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**k)
    v_hat = v / (1.0 - beta2**k)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta, AdamState(m, v, k)


def loss_and_grad(model: ScoreModel, batch: BatchSample, cfg: TrainConfig, v=None):
    tape = ad.Tape()
    leaf, params = model.bind(tape)
    total, parts = total_loss(model, params, batch, cfg.lambda1, cfg.lambda2, cfg.mode, v)
    return ad.grad(total, leaf), parts


def _check_finite(parts: LossBreakdown, grad, step: int):
    for name, val in parts.as_row().items():
        if not np.isfinite(val):
            raise NumericalAbort(step, name, val)
    if not np.all(np.isfinite(grad)):
        raise NumericalAbort(step, "gradient", float("nan"))


def train(cfg: TrainConfig, out_dir=None, progress_every: int = 0):
    """Run ``cfg.iters`` optimizer steps from a fresh initialization.

    Returns ``(model, rows)`` where rows are the training-CSV records.
    With ``out_dir`` set, writes checkpoints there. With ``ema_rate > 0`` the
    returned model and ``checkpoint.json`` carry the exponential moving average
    of the iterates; the last iterate goes to ``checkpoint_raw.json``.
    """
    data = make_dataset(cfg.dataset)
    model = build_model(cfg, data.dim)
    mode = cfg.mode or default_mode(data.dim)
    cfg = replace(cfg, mode=mode)
    state = AdamState.zeros(model.n_params)
    ema = model.theta.copy() if cfg.ema_rate > 0 else None
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for step in range(1, cfg.iters + 1):
        t0 = time.perf_counter()
        rng = step_rng(cfg.seed, step)
        batch = sample_batch(cfg, rng, data)
        v = draw_probe(rng, batch.x_t.shape, cfg.probe) if mode == "estimated" else None
        g, parts = loss_and_grad(model, batch, cfg, v)
        _check_finite(parts, g, step)
        model.theta, state = adam_step(model.theta, g, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        if ema is not None:
            ema = cfg.ema_rate * ema + (1.0 - cfg.ema_rate) * model.theta
        rows.append({"step": step, **parts.as_row(), "wall_ms": 1e3 * (time.perf_counter() - t0)})
        if progress_every and step % progress_every == 0:
            log.info("step %d total %.5f j1 %.5f", step, parts.total, parts.j1)
        if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            _with_theta(model, ema).save(out / f"checkpoint_{step:07d}.json")
    if ema is not None:
        if out is not None:
            model.save(out / "checkpoint_raw.json")
        model = _with_theta(model, ema)
    if out is not None:
        model.save(out / "checkpoint.json")
    return model, rows


def _with_theta(model: ScoreModel, theta) -> ScoreModel:
    return model if theta is None else replace(model, theta=theta)


def write_rows(path, rows, columns=CSV_COLUMNS, footer: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
        if footer:
            fh.write(f"# {footer}\n")


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))
