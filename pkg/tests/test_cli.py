from __future__ import annotations

import csv
import json
import re

import numpy as np
import pytest

from hodsm.analytic import diffuse, trimodal_mog
from hodsm.cli import main
from hodsm.config import ConfigError, config_hash, load_config, parse_config
from hodsm.schedule import DiffusionSchedule

TINY = {"n_freq": 4, "t_width": 8, "x_width": 8, "head_width": 8}
META = re.compile(r"^# config_hash=[0-9a-f]{16} git=\S+$")


def write_cfg(tmp_path, name="cfg.json", **kw):
    raw = {"dataset": {"kind": "trimodal"}, "iters": 2, "batch_size": 32, "model": TINY,
           "output_dir": str(tmp_path / "run")}
    raw.update(kw)
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return p


def read_csv(path):
    lines = path.read_text().splitlines()
    assert META.match(lines[-1]), lines[-1]
    rows = list(csv.reader(lines[:-1]))
    return rows[0], np.array(rows[1:], dtype=float)


def test_config_parsing_and_errors(tmp_path):
    rc = parse_config({"schedule": {"kind": "vp"}, "eps_time": 1e-3, "solver": {"method": "rk4"}})
    assert rc.schedule.kind == "vp" and rc.schedule.eps_time == 1e-3 and rc.solver.method == "rk4"
    for bad in ({"unknown": 1}, {"iters": -1}, {"dataset": {"kind": "mixture", "weights": [1.0]}},
                {"dataset": {"kind": "mixture", "weights": [1.0], "means": [[0.0]], "variances": [1.0, 1.0]}},
                {"model": {"depth": 3}}, {"schedule": {"kind": "ve", "beta_min": 0.1}}):
        with pytest.raises(ConfigError):
            parse_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})


def test_train_outputs_and_exit_codes(tmp_path, capsys):
    cfg = write_cfg(tmp_path, lambda1=0.5, lambda2=0.1)
    assert main(["train", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "j3=" in out and "lambda1=0.5" in out
    run = tmp_path / "run"
    header, rows = read_csv(run / "train.csv")
    assert header == ["step", "j1", "j2", "j2_trace", "j3", "total", "wall_ms"]
    assert list(rows[:, 0]) == [1, 2] and np.all(np.isfinite(rows))
    assert (run / "checkpoint.json").is_file()
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["train", "--config", str(write_cfg(tmp_path, "bad.json", lr=-1))]) == 2
    huge = {"kind": "mixture", "weights": [1.0], "means": [[1e300]], "variances": [1.0]}
    with np.errstate(all="ignore"):
        assert main(["train", "--config", str(write_cfg(tmp_path, "nan.json", dataset=huge))]) == 3


def test_train_iters_zero_writes_checkpoint_only(tmp_path):
    cfg = write_cfg(tmp_path, iters=0)
    assert main(["train", "--config", str(cfg), "--output-dir", str(tmp_path / "z")]) == 0
    assert (tmp_path / "z" / "checkpoint.json").is_file()
    assert not (tmp_path / "z" / "train.csv").exists()


def test_train_idempotent(tmp_path):
    cfg = write_cfg(tmp_path)
    for d in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--output-dir", str(tmp_path / d)]) == 0
    ha, ra = read_csv(tmp_path / "a" / "train.csv")
    hb, rb = read_csv(tmp_path / "b" / "train.csv")
    keep = [i for i, h in enumerate(ha) if h != "wall_ms"]
    assert ra[:, keep].tobytes() == rb[:, keep].tobytes()
    for f in ("checkpoint.json", "config.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_eval_nll_analytic(tmp_path, capsys):
    cfg = write_cfg(tmp_path, schedule={"kind": "ve", "sigma_max": 100.0})
    out = tmp_path / "nll.csv"
    assert main(["eval-nll", "--config", str(cfg), "--analytic", "-n", "200", "--seed", "3", "--out", str(out)]) == 0
    header, rows = read_csv(out)
    assert header == ["nll_nats", "bits_per_dim", "n"]
    nll = rows[0, 0]
    q0 = trimodal_mog()
    sched = DiffusionSchedule.ve(sigma_max=100.0)
    x = q0.sample(200, np.random.default_rng(3))
    entropy_mc = -np.mean(diffuse(q0, sched, sched.eps_time).log_pdf(x))
    assert abs(nll - entropy_mc) < 1e-2
    assert rows[0, 1] == pytest.approx(nll / np.log(2))
    out2 = tmp_path / "nll2.csv"
    main(["eval-nll", "--config", str(cfg), "--analytic", "-n", "200", "--seed", "3", "--out", str(out2)])
    assert out.read_bytes() == out2.read_bytes()
    assert main(["eval-nll", "--config", str(cfg), "--analytic", "-n", "0"]) == 2
    assert main(["eval-nll", "--config", str(cfg)]) == 2
    assert main(["eval-nll", "--config", str(cfg), "--checkpoint", str(tmp_path / "none.json")]) == 2


def test_density_analytic(tmp_path):
    cfg = write_cfg(tmp_path, schedule={"kind": "ve", "sigma_max": 1000.0})
    out = tmp_path / "dens.csv"
    assert main(["density", "--config", str(cfg), "--analytic", "--out", str(out)]) == 0
    header, rows = read_csv(out)
    assert header == ["x", "logp"] and rows.shape == (401, 2)
    sched = DiffusionSchedule.ve(sigma_max=1000.0)
    truth = diffuse(trimodal_mog(), sched, sched.eps_time).log_pdf(rows[:, :1])
    assert np.max(np.abs(rows[:, 1] - truth)) < 1e-2
    assert abs(np.trapezoid(np.exp(rows[:, 1]), rows[:, 0]) - 1) < 2e-2
    out2 = tmp_path / "dens2.csv"
    main(["density", "--config", str(cfg), "--analytic", "--out", str(out2)])
    assert out.read_bytes() == out2.read_bytes()


def test_density_two_dim_checkpoint(tmp_path):
    cfg = write_cfg(tmp_path, dataset={"kind": "checkerboard"}, iters=0)
    main(["train", "--config", str(cfg)])
    out = tmp_path / "d2.csv"
    ck = str(tmp_path / "run" / "checkpoint.json")
    assert main(["density", "--config", str(cfg), "--checkpoint", ck, "--points", "5",
                 "--method", "rk4", "--steps", "20", "--out", str(out)]) == 0
    header, rows = read_csv(out)
    assert header == ["x1", "x2", "logp"] and rows.shape == (25, 3)


def test_diag_analytic_and_errors(tmp_path, capsys):
    cfg = write_cfg(tmp_path, schedule={"kind": "ve", "sigma_max": 1e4})
    od = tmp_path / "diag"
    assert main(["diag", "--config", str(cfg), "--analytic", "--n-mc", "100", "--output-dir", str(od)]) == 0
    header, curves = read_csv(od / "diag_curves.csv")
    assert header == ["t", "l_sm", "l_fisher", "l_diff"] and curves.shape == (100, 4)
    assert np.all(np.abs(curves[:, 1:]) < 1e-3)
    header, kl = read_csv(od / "kl_decomposition.csv")
    assert header == ["j_sm", "j_diff", "j_ode", "j_fisher", "cs_bound"]
    assert np.all(np.abs(kl) < 1e-3)
    assert main(["diag", "--config", str(cfg), "--analytic", "--grid-points", "0"]) == 2
    cb = write_cfg(tmp_path, "cb.json", dataset={"kind": "checkerboard"})
    assert main(["diag", "--config", str(cb), "--analytic"]) == 2


def test_sample_commands(tmp_path):
    cfg = write_cfg(tmp_path, sampler={"n_steps": 20})
    outs = []
    for i in range(2):
        out = tmp_path / f"s{i}.csv"
        assert main(["sample", "--config", str(cfg), "--analytic", "-n", "30", "--seed", "1", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    header, rows = read_csv(tmp_path / "s0.csv")
    assert header == ["x"] and rows.shape == (30, 1)
    out = tmp_path / "ode.csv"
    assert main(["sample", "--config", str(cfg), "--analytic", "--sampler", "ode", "-n", "5",
                 "--out", str(out)]) == 0
    assert read_csv(out)[1].shape == (5, 1)
    assert main(["sample", "--config", str(cfg), "--analytic", "-n", "0", "--out", str(out)]) == 2


def test_threads_flag_and_env(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, sampler={"n_steps": 5})
    out = tmp_path / "t.csv"
    assert main(["--threads", "1", "sample", "--config", str(cfg), "--analytic", "-n", "3", "--out", str(out)]) == 0
    monkeypatch.setenv("HODSM_THREADS", "two")
    assert main(["sample", "--config", str(cfg), "--analytic", "-n", "3", "--out", str(out)]) == 2
    monkeypatch.setenv("HODSM_THREADS", "1")
    assert main(["sample", "--config", str(cfg), "--analytic", "-n", "3", "--out", str(out)]) == 0


def test_shipped_configs_validate():
    from pathlib import Path

    for p in sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.json")):
        rc = load_config(p)
        assert rc.train.iters > 0, p.name
