"""Run-config JSON: schema validation, parsing, hashing and CSV metadata."""

from __future__ import annotations

import hashlib
import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .odeflow import OdeSolverConfig
from .sampler import PcConfig
from .schedule import DiffusionSchedule
from .trainer import TrainConfig, make_dataset


class ConfigError(ValueError):
    pass


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_COUNT = {"type": "integer", "minimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "weights", "means", "variances"],
                    "properties": {
                        "kind": {"const": "mixture"},
                        "weights": {"type": "array", "items": _POS, "minItems": 1},
                        "means": {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 1}},
                        "variances": {"type": "array", "items": _POS},
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {"kind": {"const": "trimodal"}, "scale_is": {"enum": ["variance", "std"]}},
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"const": "checkerboard"},
                        "cell_size": _POS,
                        "extent": _POS,
                        "rng_seed": {"type": "integer"},
                    },
                },
            ]
        },
        "schedule": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {"kind": {"const": "ve"}, "sigma_min": _POS, "sigma_max": _POS, "eps_time": _POS},
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {"kind": {"const": "vp"}, "beta_min": _POS, "beta_max": _POS, "eps_time": _POS},
                },
            ]
        },
        "lambda1": _NONNEG,
        "lambda2": _NONNEG,
        "batch_size": {"type": "integer", "minimum": 1},
        "iters": _COUNT,
        "lr": _POS,
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adam_eps": _POS,
        "eps_time": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "mode": {"enum": ["exact", "estimated", None]},
        "probe": {"enum": ["rademacher", "gaussian"]},
        "checkpoint_every": _COUNT,
        "ema_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_freq": {"type": "integer", "minimum": 1},
                "t_width": {"type": "integer", "minimum": 1},
                "x_width": {"type": "integer", "minimum": 1},
                "head_width": {"type": "integer", "minimum": 1},
                "embed_scale": _POS,
                "max_positions": _POS,
                "zero_head": {"type": "boolean"},
                "input_scale": {"type": "boolean"},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "method": {"enum": ["rk45", "rk4"]},
                "steps": {"type": "integer", "minimum": 1},
                "rtol": _POS,
                "atol": _POS,
            },
        },
        "sampler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_steps": {"type": "integer", "minimum": 1},
                "snr": _POS,
                "corrector_steps": _COUNT,
            },
        },
        "output_dir": {"type": "string"},
    },
}

_TRAIN_KEYS = {
    "dataset", "lambda1", "lambda2", "batch_size", "iters", "lr", "beta1", "beta2", "adam_eps",
    "eps_time", "seed", "mode", "probe", "checkpoint_every", "ema_rate", "model",
}


@dataclass
class RunConfig:
    train: TrainConfig
    solver: OdeSolverConfig = field(default_factory=OdeSolverConfig)
    sampler: PcConfig = field(default_factory=PcConfig)
    output_dir: str = "runs/default"
    raw: dict = field(default_factory=dict)

    @property
    def schedule(self) -> DiffusionSchedule:
        return self.train.schedule

    def hash(self) -> str:
        return config_hash(self.raw)


def parse_config(raw: dict) -> RunConfig:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {e.message}") from None
    try:
        train_part = {k: v for k, v in raw.items() if k in _TRAIN_KEYS}
        if "schedule" in raw:
            train_part["schedule"] = raw["schedule"]
        train = TrainConfig.from_dict(train_part)
        make_dataset(train.dataset)
        solver = OdeSolverConfig(**raw.get("solver", {}))
        sampler = PcConfig(seed=train.seed, **raw.get("sampler", {}))
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError(f"invalid config: {e}") from None
    return RunConfig(train, solver, sampler, raw.get("output_dir", "runs/default"), raw)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return parse_config(raw)


def config_hash(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def metadata_line(raw: dict) -> str:
    return f"config_hash={config_hash(raw)} git={git_describe()}"
