"""High-order denoising score matching and probability-flow ODE tools for low-dimensional data."""

from .analytic import CheckerboardSampler, MixtureDensity, diffuse, trimodal_mog, sample
from .dsm import BatchSample, LossBreakdown, total_loss
from .odeflow import OdeSolverConfig, diag_curves, kl_decomposition, log_likelihood, model_score_along
from .sampler import PcConfig, ode_sample, pc_sample
from .schedule import DiffusionSchedule, DomainError
from .scorenet import ScoreModel
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BatchSample", "CheckerboardSampler", "DiffusionSchedule", "DomainError", "LossBreakdown",
    "MixtureDensity", "OdeSolverConfig", "PcConfig", "ScoreModel", "TrainConfig",
    "diag_curves", "diffuse", "kl_decomposition", "log_likelihood", "model_score_along",
    "ode_sample", "trimodal_mog", "pc_sample", "sample", "total_loss", "train",
]
