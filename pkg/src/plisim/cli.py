"""Command-line entry point ``plisim``.

Exit codes: 0 success, 1 validation failure, 2 some matrix cells failed,
3 I/O error.
"""
from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .apmodel import bmm_system
from .controllers import meal_schedule_events
from .errors import ConfigurationError, FitError
from .experiment import (check_output_dir, cohort_for, emit_reports, load_config, run_experiment, _ctrl)
from .koopman import dmd_fit
from .oracle import WmnEventSchedule
from .plis import ClosedLoop, ErrorBudget, PlanOptions, compute_invariant_step

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("plisim")


def _parser():
    p = argparse.ArgumentParser(prog="plisim", description="Piecewise-LTI simulation experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="cohort seed")
    common.add_argument("--reps", type=int, help="timed repetitions per engine")
    common.add_argument("--horizon", type=float, help="simulated minutes")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="run the experiment matrix")
    r.add_argument("config")
    pl = sub.add_parser("plan", parents=[common], help="print invariant-step plans")
    pl.add_argument("config")
    pl.add_argument("--eps", type=float, required=True, help="trajectory budget (fraction)")
    pl.add_argument("--psi", type=float, required=True, help="trace budget (fraction)")
    pl.add_argument("--controller", help="controller exciting the plan (default: first configured)")
    f = sub.add_parser("fit-koopman", parents=[common], help="fit a DMD model on trace CSV files")
    f.add_argument("traces_dir")
    f.add_argument("--order", type=int, default=13)
    f.add_argument("--step", type=float, default=None, help="model step, minutes (default: trace grid)")
    v = sub.add_parser("validate", parents=[common], help="validate a configuration file")
    v.add_argument("config")
    return p


def _overrides(cfg, args):
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.reps is not None:
        kw["reps"] = args.reps
    if args.horizon is not None:
        kw["horizon"] = args.horizon
    if args.out is not None:
        kw["out"] = args.out
    return replace(cfg, **kw) if kw else cfg


def _say(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr, flush=True)


def cmd_run(args):
    cfg = _overrides(load_config(args.config), args)
    try:
        check_output_dir(cfg.out)
    except OSError as exc:
        print(f"error: output directory {cfg.out!r} is not writable: {exc}", file=sys.stderr)
        return EXIT_IO
    results = run_experiment(cfg, progress=lambda m: _say(args, m))
    try:
        emit_reports(results, cfg.out)
    except OSError as exc:
        print(f"error: writing reports failed: {exc}", file=sys.stderr)
        return EXIT_IO
    if results.failures:
        _say(args, f"{len(results.failures)} cell(s) failed; see {os.path.join(cfg.out, 'summary.txt')}")
        return EXIT_PARTIAL
    _say(args, f"reports written to {cfg.out}")
    return EXIT_OK


def cmd_plan(args):
    cfg = _overrides(load_config(args.config), args)
    try:
        budget = ErrorBudget(args.eps, args.psi)
    except ValueError as exc:
        raise ConfigurationError(str(exc))
    kind = args.controller or cfg.controllers[0]
    span = (0.0, float(cfg.horizon))
    for p in cohort_for(cfg):
        sys_ = bmm_system(p, cfg.horizon)
        sched = WmnEventSchedule(tuple(meal_schedule_events(p, span)))
        plan = compute_invariant_step(sys_, ClosedLoop(_ctrl(cfg, kind, p), sched), span, budget,
                                      PlanOptions(cfg.q_inv0, cfg.decrement, cfg.q_sim, mode=cfg.trace_mode), x0=p.x0)
        print(f"{p.id} q_inv={plan.q_inv:g} converged={plan.converged} intervals={len(plan.intervals)} "
              f"max_r={plan.max_interval_error:.4g} E_rmse={plan.trace_error:.4g} E_sum={plan.trace_error_sum:.4g}")
        if not args.quiet:
            for iv in plan.intervals:
                print(f"  [{iv.tau:9.2f}, {iv.tau_next:9.2f})  r={iv.r_max:.4e}")
    return EXIT_OK


def _read_trace_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:4], data[:, 4:6]


def cmd_fit(args):
    paths = sorted(glob.glob(os.path.join(args.traces_dir, "*.csv")))
    if not paths:
        print(f"error: no trace CSV files in {args.traces_dir!r}", file=sys.stderr)
        return EXIT_IO
    snaps = []
    step = args.step
    for path in paths:
        t, X, U = _read_trace_csv(path)
        q = float(t[1] - t[0])
        step = q if step is None else step
        stride = int(round(step / q))
        snaps.append((X[::stride], U[::stride]))
    try:
        model = dmd_fit(snaps, args.order, step, delay_order=(2, 1, 0))
    except FitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = args.out or "."
    try:
        check_output_dir(out)
        dest = os.path.join(out, "koopman_model.txt")
        model.save(dest)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"fitted n_k={model.n_k} on {len(paths)} trace(s); fit_error={model.fit_error:.4e}; "
          f"truncated={model.truncated}; written to {dest}")
    return EXIT_OK


def cmd_validate(args):
    cfg = _overrides(load_config(args.config), args)
    cohort_for(cfg)
    _say(args, f"{args.config}: ok")
    return EXIT_OK


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    handler = {"run": cmd_run, "plan": cmd_plan, "fit-koopman": cmd_fit, "validate": cmd_validate}[args.command]
    try:
        return handler(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
