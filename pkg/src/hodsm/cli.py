"""Command-line entry point: ``hodsm {train,eval-nll,diag,density,sample}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import odeflow, sampler
from .analytic import MixtureDensity
from .config import ConfigError, RunConfig, load_config, metadata_line, parse_config
from .odeflow import SolverError
from .sampler import SamplerError
from .scorefn import AnalyticScore
from .scorenet import ScoreModel
from .trainer import NumericalAbort, make_dataset, train, write_rows

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("hodsm")


def _write_csv(path, header, rows, raw_config):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
        fh.write(f"# {metadata_line(raw_config)}\n")


def _run_config(args) -> RunConfig:
    if args.config:
        return load_config(args.config)
    return parse_config({})


def _scorer(args, rc: RunConfig):
    """The score source of an evaluation command: a checkpoint or the analytic data score."""
    if args.checkpoint and args.analytic:
        raise ConfigError("pass either --checkpoint or --analytic, not both")
    if args.checkpoint:
        p = Path(args.checkpoint)
        if not p.is_file():
            raise ConfigError(f"checkpoint not found: {p}")
        try:
            return ScoreModel.load(p)
        except (ValueError, KeyError, json.JSONDecodeError) as e:
            raise ConfigError(f"unreadable checkpoint {p}: {e}") from None
    if args.analytic:
        data = make_dataset(rc.train.dataset)
        if not isinstance(data, MixtureDensity):
            raise ConfigError("--analytic needs a mixture dataset")
        return AnalyticScore(data, rc.schedule)
    raise ConfigError("one of --checkpoint or --analytic is required")


def _solver(args, rc: RunConfig):
    s = rc.solver
    if getattr(args, "method", None):
        s = replace(s, method=args.method)
    if getattr(args, "steps", None):
        s = replace(s, steps=args.steps)
    return s


def _out_dir(args, rc: RunConfig) -> Path:
    return Path(args.output_dir or rc.output_dir)


def cmd_train(args) -> int:
    rc = _run_config(args)
    cfg = rc.train
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.iters is not None:
        cfg = replace(cfg, iters=args.iters)
    out = _out_dir(args, rc)
    model, rows = train(cfg, out_dir=out, progress_every=args.log_every)
    raw = dict(rc.raw, seed=cfg.seed, iters=cfg.iters)
    if rows:
        write_rows(out / "train.csv", rows, footer=metadata_line(raw))
        final = rows[-1]
        print(" ".join(f"{k}={final[k]:.6g}" for k in ("j1", "j2", "j2_trace", "j3", "total")),
              f"lambda1={cfg.lambda1:g} lambda2={cfg.lambda2:g}")
    (out / "config.json").write_text(json.dumps(raw, indent=1, sort_keys=True) + "\n")
    print(f"checkpoint: {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval_nll(args) -> int:
    rc = _run_config(args)
    if args.n < 1:
        raise ConfigError("-n must be at least 1")
    scorer = _scorer(args, rc)
    data = make_dataset(rc.train.dataset)
    x = data.sample(args.n, np.random.default_rng(args.seed))
    ll = odeflow.log_likelihood(scorer, x, _solver(args, rc))
    nll = float(-np.mean(ll))
    bpd = nll / (x.shape[1] * np.log(2.0))
    print(f"nll_nats={nll:.6f} bits_per_dim={bpd:.6f} n={args.n}")
    if args.out:
        _write_csv(args.out, ["nll_nats", "bits_per_dim", "n"], [(nll, bpd, args.n)], rc.raw)
    return EXIT_OK


def cmd_diag(args) -> int:
    rc = _run_config(args)
    if args.grid_points < 1:
        raise ConfigError("--grid-points must be at least 1")
    scorer = _scorer(args, rc)
    data = make_dataset(rc.train.dataset)
    if not isinstance(data, MixtureDensity):
        raise ConfigError("diagnostics need a mixture dataset with closed-form scores")
    sched = scorer.schedule
    grid = np.linspace(sched.eps_time, sched.T, args.grid_points)
    res = odeflow.diag_curves(scorer, data, sched, grid, args.n_mc, args.seed, _solver(args, rc))
    kl = odeflow.kl_decomposition(diag=res)
    out = _out_dir(args, rc)
    _write_csv(out / "diag_curves.csv", ["t", "l_sm", "l_fisher", "l_diff"],
               [(r["t"], r["l_sm"], r["l_fisher"], r["l_diff"]) for r in res.curves()], rc.raw)
    cols = ["j_sm", "j_diff", "j_ode", "j_fisher", "cs_bound"]
    _write_csv(out / "kl_decomposition.csv", cols, [[kl[c] for c in cols]], rc.raw)
    print(" ".join(f"{c}={kl[c]:.6g}" for c in cols))
    return EXIT_OK


def cmd_density(args) -> int:
    rc = _run_config(args)
    scorer = _scorer(args, rc)
    dim = scorer.dim
    if dim == 1:
        pts = args.points or 401
        x = np.linspace(args.lo, args.hi, pts)[:, None]
    elif dim == 2:
        pts = args.points or 101
        g = np.linspace(args.lo, args.hi, pts)
        xx, yy = np.meshgrid(g, g, indexing="ij")
        x = np.stack([xx.ravel(), yy.ravel()], axis=1)
    else:
        raise ConfigError("density grids are available for dim 1 and 2")
    ll = odeflow.log_likelihood(scorer, x, _solver(args, rc))
    header = ["x", "logp"] if dim == 1 else ["x1", "x2", "logp"]
    _write_csv(args.out, header, np.column_stack([x, ll]), rc.raw)
    return EXIT_OK


def cmd_sample(args) -> int:
    rc = _run_config(args)
    if args.n < 1:
        raise ConfigError("-n must be at least 1")
    scorer = _scorer(args, rc)
    seed = rc.train.seed if args.seed is None else args.seed
    if args.sampler == "pc":
        cfg = replace(rc.sampler, seed=seed)
        x = sampler.pc_sample(scorer, scorer.schedule, args.n, cfg)
    else:
        x = sampler.ode_sample(scorer, scorer.schedule, args.n, _solver(args, rc), seed)
    header = ["x"] if x.shape[1] == 1 else [f"x{i + 1}" for i in range(x.shape[1])]
    _write_csv(args.out, header, x, rc.raw)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hodsm", description="High-order denoising score matching toolkit")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads (env HODSM_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def evaluation(sp):
        sp.add_argument("--config", help="run-config JSON (dataset, schedule, solver)")
        sp.add_argument("--checkpoint", help="score model checkpoint")
        sp.add_argument("--analytic", action="store_true", help="use the closed-form data score instead of a model")
        sp.add_argument("--method", choices=["rk45", "rk4"], default=None)
        sp.add_argument("--steps", type=int, default=None, help="RK4 step count")

    tr = sub.add_parser("train", help="train a score model")
    tr.add_argument("--config", required=True)
    tr.add_argument("--output-dir", default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--iters", type=int, default=None)
    tr.add_argument("--log-every", type=int, default=0)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval-nll", help="mean negative log-likelihood under the ODE")
    evaluation(ev)
    ev.add_argument("-n", type=int, default=1000)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", default=None)
    ev.set_defaults(func=cmd_eval_nll)

    dg = sub.add_parser("diag", help="score and Fisher divergence curves, KL decomposition")
    evaluation(dg)
    dg.add_argument("--grid-points", type=int, default=100)
    dg.add_argument("--n-mc", type=int, default=1000)
    dg.add_argument("--seed", type=int, default=0)
    dg.add_argument("--output-dir", default=None)
    dg.set_defaults(func=cmd_diag)

    de = sub.add_parser("density", help="log-density grid under the ODE")
    evaluation(de)
    de.add_argument("--lo", type=float, default=-1.5)
    de.add_argument("--hi", type=float, default=1.5)
    de.add_argument("--points", type=int, default=None, help="points per axis (401 in 1-D, 101 in 2-D)")
    de.add_argument("--out", required=True)
    de.set_defaults(func=cmd_density)

    sa = sub.add_parser("sample", help="draw samples from a model")
    evaluation(sa)
    sa.add_argument("--sampler", choices=["pc", "ode"], default="pc")
    sa.add_argument("-n", type=int, default=1000)
    sa.add_argument("--seed", type=int, default=None)
    sa.add_argument("--out", required=True)
    sa.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = args.threads
    if threads is None and os.environ.get("HODSM_THREADS"):
        try:
            threads = int(os.environ["HODSM_THREADS"])
        except ValueError:
            print("error: HODSM_THREADS must be an integer", file=sys.stderr)
            return EXIT_CONFIG
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, SolverError, SamplerError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
