import csv

import numpy as np
import pytest

from traffic_prgp import config as cfgmod
from traffic_prgp.cli import build_parser, main
from traffic_prgp.data import REPORT_UNITS, ingest_csv
from traffic_prgp.report import read_metrics_csv

CONFIG = """\
[synthetic]
n_segments = 10
n_windows = 48
aggregation = 10
n_detectors = 4
onramp_segment = 6
offramp_segment = 3

[metanet]
I = 10

[train]
iterations = 8
lr = 0.01

[split]
n_test_columns = 12

[scenario]
name = tiny
methods = metanet, pure-gp, prgp
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(CONFIG)
    return str(p)


def run(*argv):
    assert main([str(a) for a in argv]) == 0


def test_parser_lists_subcommands():
    text = build_parser().format_help()
    for name in ("simulate", "emit-data", "corrupt", "subsample", "train", "predict",
                 "evaluate", "run-scenario", "report", "init-config"):
        assert name in text


def test_data_pipeline(cfg, tmp_path, capsys):
    grid = tmp_path / "grid.csv"
    run("simulate", "--config", cfg, "--seed", 1, "--out", grid)
    det = tmp_path / "det.csv"
    run("emit-data", "--config", cfg, "--grid", grid, "--detectors", "0,4,9", "--out", det)
    data = ingest_csv(det, REPORT_UNITS)
    assert data.n == 3 * 48 and set(np.unique(data.X[:, 0])) == {0, 4, 9}
    with det.open() as fh:
        assert next(csv.reader(fh)) == ["segment", "k", "flow", "speed"]

    bad = tmp_path / "bad.csv"
    run("corrupt", "--config", cfg, "--data", det, "--fraction", 0.5, "--seed", 3, "--out", bad)
    dirty = ingest_csv(bad, REPORT_UNITS)
    changed = np.any(np.abs(dirty.Y[:, :2] - data.Y[:, :2]) > 1e-6, axis=1)
    assert changed.sum() == 72

    few = tmp_path / "few.csv"
    run("subsample", "--config", cfg, "--data", det, "--ratio", 0.25, "--seed", 3, "--out", few)
    assert ingest_csv(few, REPORT_UNITS).n == 36

    ckpt = tmp_path / "model.ini"
    run("train", "--config", cfg, "--data", det, "--method", "prgp", "--out", ckpt)
    pred = tmp_path / "pred.csv"
    run("predict", "--config", cfg, "--checkpoint", ckpt, "--data", det, "--out", pred)
    full = ingest_csv(pred, REPORT_UNITS)
    assert full.n == 10 * 48 and np.all(np.isfinite(full.Y[:, :2]))

    metrics = tmp_path / "m.csv"
    run("evaluate", "--config", cfg, "--truth", det, "--estimate", pred, "--method", "prgp",
        "--out", metrics)
    rows = read_metrics_csv(metrics)
    assert [r["dimension"] for r in rows] == ["flow", "speed"]
    assert all(float(r["rmse"]) >= 0 for r in rows)
    capsys.readouterr()
    run("report", metrics)
    assert "prgp" in capsys.readouterr().out


def test_run_scenario_is_byte_deterministic(cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run("run-scenario", "--config", cfg, "--seed", 5, "--out-dir", a)
    run("run-scenario", "--config", cfg, "--seed", 5, "--out-dir", b)
    for name in ("metrics.csv", "scatter_prgp.csv", "scatter_metanet.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rows = read_metrics_csv(a / "metrics.csv")
    assert len(rows) == 6 and {r["scenario"] for r in rows} == {"tiny"}


def test_run_scenario_method_filter(cfg, tmp_path):
    run("run-scenario", "--config", cfg, "--method", "metanet", "--out-dir", tmp_path)
    rows = read_metrics_csv(tmp_path / "metrics.csv")
    assert {r["method"] for r in rows} == {"metanet"}


def test_init_config_round_trip(tmp_path):
    path = tmp_path / "default.ini"
    run("init-config", "--out", path)
    cp = cfgmod.read_config(path)
    sc = cfgmod.scenario_from_config(cp)
    assert sc.train.iterations == 500 and sc.train.m == 10
    assert sc.model.v_f == 120.0 and sc.model.n_segments == 20


def test_errors_exit_with_status_2(tmp_path, capsys):
    assert main(["evaluate", "--truth", str(tmp_path / "none.csv"),
                 "--estimate", str(tmp_path / "none.csv")]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nlearning_rat = 0.1\n")
    assert main(["run-scenario", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert "learning_rat" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "missing.ini")]) == 2
