"""Command-line entry point.

Examples
--------
    artifact constants --hurst 0.4 --q 3
    artifact --seed 7 simulate --scheme cn --model trig --hurst 0.5 --m 8
    artifact --out runs/euler rates --scheme euler --model sinh --hurst 0.75
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

import numpy as np

from . import harness
from .fbm import sample_fbm
from .flow import reference_solution
from .schemes import run_scheme


def _globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=d, help="master seed")
    parser.add_argument("--threads", type=int, default=d, help="numba worker threads")
    parser.add_argument("--out", default=d, help="output directory (stdout when omitted)")
    parser.add_argument("--config", default=d, help="JSON experiment config; flags override it")


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scheme", choices=["euler", "milstein", "cn"])
    p.add_argument("--model")
    p.add_argument("--model-params", type=json.loads, help="JSON object of model parameters")
    p.add_argument("--hurst", type=float)
    p.add_argument("--xi", type=float)
    p.add_argument("--paths", dest="n_paths", type=int)
    p.add_argument("--fine-offset", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--force", action="store_true", default=None,
                   help="run CN below its admissible level")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artifact", description=__doc__.splitlines()[0])
    _globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("constants", help="limit constants as JSON")
    _globals(p, suppress=True)
    p.add_argument("--hurst", type=float, required=True)
    p.add_argument("--q", type=int, default=3)
    p.add_argument("--lags", type=int, default=10)

    p = sub.add_parser("simulate", help="one scheme run against the reference solution")
    _globals(p, suppress=True)
    _experiment_flags(p)
    p.add_argument("--m", type=int)
    p.add_argument("--dense", action="store_true", help="report every fine-grid node")

    p = sub.add_parser("rates", help="convergence-rate experiment")
    _globals(p, suppress=True)
    _experiment_flags(p)
    p.add_argument("--m-min", type=int)
    p.add_argument("--m-max", type=int)

    p = sub.add_parser("distribution", help="normalized error against its limit")
    _globals(p, suppress=True)
    _experiment_flags(p)
    p.add_argument("--m", type=int)
    p.add_argument("--mode", choices=["auto", "pathwise", "weak"])

    p = sub.add_parser("variations", help="variation-theorem checks")
    _globals(p, suppress=True)
    p.add_argument("--q", type=int)
    p.add_argument("--paths", dest="n_paths", type=int)
    return parser


def _config(args: argparse.Namespace) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.from_json(args.config) if args.config else harness.ExperimentConfig()
    over = {k: getattr(args, k, None) for k in
            ("scheme", "model", "model_params", "hurst", "xi", "n_paths", "fine_offset",
             "epsilon", "force", "m", "mode", "q", "seed")}
    lo, hi = getattr(args, "m_min", None), getattr(args, "m_max", None)
    if lo is not None or hi is not None:
        over["m_range"] = (lo if lo is not None else cfg.m_range[0],
                           hi if hi is not None else cfg.m_range[1])
    return cfg.replace(**over)


def _simulate(cfg: harness.ExperimentConfig, dense: bool) -> np.ndarray:
    model = cfg.build_model()
    path = sample_fbm(cfg.m + cfg.fine_offset, cfg.hurst, cfg.seed, level=cfg.m)
    cfg.validate([cfg.m])
    traj = run_scheme(cfg.kind, model, cfg.xi, path, force=cfg.force, epsilon=cfg.epsilon)
    ref = reference_solution(model, cfg.xi, path.values)
    if dense:
        t, x_ref, x_s = path.times, ref.x, traj.dense_path()
    else:
        r = path.ratio()
        t, x_ref, x_s = path.times[::r], ref.x[::r], traj.values
    return np.column_stack([t, x_ref, x_s, x_s - x_ref])


def _dump(text: str) -> None:
    sys.stdout.write(text)
    if not text.endswith("\n"):
        sys.stdout.write("\n")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        import numba
        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    seed = args.seed if args.seed is not None else 0

    if args.command == "constants":
        consts = harness.constants_report(args.hurst, args.q, args.lags)
        if args.out:
            for p in harness.emit(consts, args.out, seed=seed):
                print(p)
        else:
            _dump(json.dumps(harness.to_jsonable(consts.to_json()), indent=2, sort_keys=True))
        return 0

    cfg = _config(args)
    if args.command == "simulate":
        rows = _simulate(cfg, args.dense)
        header = "t,x_ref,x_scheme,error"
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            path = os.path.join(args.out, "simulate.csv")
            harness.write_csv(path, harness.provenance_header(cfg, cfg.seed), header, rows, "%.17g")
            print(path)
        else:
            np.savetxt(sys.stdout, rows, delimiter=",", header=header, comments="", fmt="%.17g")
        return 0

    if args.command == "rates":
        report = harness.run_rate_experiment(cfg)
    elif args.command == "distribution":
        report = harness.run_distribution_experiment(cfg)
    else:
        report = harness.run_variation_experiment(cfg)
    if args.out:
        for p in harness.emit(report, args.out):
            print(p)
    else:
        _dump(json.dumps(harness.to_jsonable(report.to_json()), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
