"""Command line entry point: ``traffic-prgp <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import Dataset, REPORT_UNITS, export_csv, ingest_csv, inject_bias, subsample
from .metanet import TrafficGrid, emit_detector_data
from .metrics import compute_metrics
from .prgp import (initial_params, load_checkpoint, model_from_checkpoint, predict,
                   prepare_training_set, save_checkpoint, train)
from .report import emit_report, format_table, read_metrics_csv, write_metrics_csv
from .scenario import METHODS, gp_physical, run_scenario, synthetic_truth

log = logging.getLogger("traffic_prgp")


def _out(args, name: str) -> Path:
    if args.out:
        return Path(args.out)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / name


def cmd_simulate(args, cp):
    """Synthetic ground truth: METANET grid plus the detector readings."""
    sc = cfgmod.scenario_from_config(cp, args.seed)
    truth = synthetic_truth(sc.synthetic, sc.seed)
    path = truth.grid.to_csv(_out(args, "grid.csv"))
    print(path)


def cmd_emit_data(args, cp):
    grid = TrafficGrid.from_csv(args.grid)
    sc = cfgmod.scenario_from_config(cp)
    dets = ([int(d) for d in args.detectors.split(",")] if args.detectors
            else sc.synthetic.detector_segments())
    agg = args.aggregation or sc.synthetic.aggregation
    data = emit_detector_data(grid, dets, agg)
    print(export_csv(data, _out(args, "detectors.csv"), cfgmod.data_units(cp)))


def cmd_corrupt(args, cp):
    units = cfgmod.data_units(cp)
    data = ingest_csv(args.data, units)
    sc = cfgmod.scenario_from_config(cp)
    frac = sc.bias_fraction if args.fraction is None else args.fraction
    out = inject_bias(data, frac, sc.bias_flow_std if args.flow_std is None else args.flow_std,
                      sc.bias_speed_std if args.speed_std is None else args.speed_std,
                      args.seed or 0)
    print(export_csv(out, _out(args, "corrupted.csv"), units))


def cmd_subsample(args, cp):
    units = cfgmod.data_units(cp)
    data = ingest_csv(args.data, units)
    print(export_csv(subsample(data, args.ratio, args.seed or 0),
                     _out(args, "subsampled.csv"), units))


def cmd_train(args, cp):
    if args.method not in ("pure-gp", "prgp"):
        raise SystemExit("train supports --method pure-gp or prgp")
    data = ingest_csv(args.data, cfgmod.data_units(cp))
    sc = cfgmod.scenario_from_config(cp, args.seed)
    agg = sc.synthetic.aggregation
    physical = sc.model.replace(T=sc.model.T * agg)
    training = prepare_training_set(data, physical, args.n_steps)
    tcfg = sc.train if args.method == "prgp" else dataclasses.replace(sc.train, phi_g=0.0)
    params0 = initial_params(physical, training, seed=sc.seed, m=tcfg.m)
    model, trace = train(params0, training, tcfg)
    log.info("stopped after %d iterations (%s)", len(trace.records), trace.stop_reason)
    print(save_checkpoint(model, _out(args, "model.ini"), tcfg))


def cmd_predict(args, cp):
    units = cfgmod.data_units(cp)
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt, ingest_csv(args.data, units))
    inputs = ingest_csv(args.inputs, units) if args.inputs else None
    X = inputs.X if inputs is not None else np.array(
        [(i, k) for i in range(ckpt.params.physical.n_segments) for k in range(ckpt.n_steps)])
    pred = predict(model, X)
    print(export_csv(pred.to_dataset(), _out(args, "prediction.csv"), units))


def cmd_evaluate(args, cp):
    units = cfgmod.data_units(cp)
    truth = ingest_csv(args.truth, units)
    est = ingest_csv(args.estimate, units)
    report = compute_metrics(truth, est, args.method or "estimate", REPORT_UNITS)
    report.scenario = args.name
    print(write_metrics_csv(report, _out(args, "metrics.csv"), timing=False))


def cmd_run_scenario(args, cp):
    methods = args.method or None
    sc = cfgmod.scenario_from_config(cp, args.seed, methods)
    report = run_scenario(sc)
    for path in emit_report(report, args.out_dir, timing=args.timing, units=sc.report_units):
        print(path)
    for method, msg in report.errors.items():
        print(f"warning: {method} failed: {msg}", file=sys.stderr)


def cmd_report(args, cp):
    rows = [r for path in args.metrics for r in read_metrics_csv(path)]
    print(format_table(rows))


def cmd_init_config(args, cp):
    print(cfgmod.write_default_config(_out(args, "config.ini")))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="traffic-prgp",
                                     description="Freeway traffic state estimation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--out", help="output file (overrides --out-dir)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    add("simulate", cmd_simulate, "synthetic METANET ground truth -> grid CSV")
    p = add("emit-data", cmd_emit_data, "grid CSV -> detector CSV")
    p.add_argument("--grid", required=True)
    p.add_argument("--detectors", help="comma separated segment indices")
    p.add_argument("--aggregation", type=int)
    p = add("corrupt", cmd_corrupt, "add noise to a fraction of detector rows")
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float)
    p.add_argument("--flow-std", type=float, help="veh/5min")
    p.add_argument("--speed-std", type=float, help="mph")
    p = add("subsample", cmd_subsample, "keep a random fraction of detector rows")
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p = add("train", cmd_train, "fit a GP estimator and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("pure-gp", "prgp"), default="prgp")
    p.add_argument("--n-steps", type=int, help="number of time indices in the grid")
    p = add("predict", cmd_predict, "posterior means from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="the training CSV used for the checkpoint")
    p.add_argument("--inputs", help="CSV whose (segment, k) rows are predicted")
    p = add("evaluate", cmd_evaluate, "metrics of an estimate against a truth CSV")
    p.add_argument("--truth", required=True)
    p.add_argument("--estimate", required=True)
    p.add_argument("--method", default="estimate")
    p.add_argument("--name", default="evaluate", help="scenario name in the CSV")
    p = add("run-scenario", cmd_run_scenario, "full protocol: split, corrupt, fit, score")
    p.add_argument("--method", action="append", choices=METHODS,
                   help="restrict to this method (repeatable)")
    p.add_argument("--timing", action="store_true",
                   help="record wall time in runtime_s (output no longer byte-stable)")
    p = add("report", cmd_report, "print metrics CSVs as a table")
    p.add_argument("metrics", nargs="+")
    add("init-config", cmd_init_config, "write a config file with default values")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, cfgmod.read_config(args.config))
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
