"""Experiment matrix: cohort x controller x engine x budget, with reports.

Output layout (all CSV with a header row, ``repr`` float formatting so two
runs with the same configuration produce identical files):

``glycemic.csv``
    approach, control_method, tir/tar/tbr mean and sd over patients.
``optimality.csv``
    approach, control_method, rho and trace-error mean and sd, mean q_inv.
``speedup.csv``
    approach, control_method, speedup mean and sd, median seconds. These
    columns come from wall-clock timing and differ between runs.
``cells.csv``
    one row per (patient, controller, approach) with status and the
    deterministic metrics.
``traces/<patient>_<controller>_<approach>.csv``
    time, i, i_s, G, u_insulin, u_meal, p3. ``u_meal`` is the whole glucose
    appearance channel (endogenous production plus meals, mg/dL/min) and
    ``p3`` is the insulin sensitivity the engine integrated with.
``summary.txt``
    the three tables side by side in plain text.
``manifest.json``
    configuration echo, seed, host information and timing protocol.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _backend
from .apmodel import DAY, bmm_system, generate_cohort, load_cohort, p3_at
from .config_io import Section, load_yaml, load_yaml_text
from .controllers import (ApSettings, LqgConfig, MpcConfig, PidConfig, make_controller, meal_schedule_events)
from .errors import ConfigurationError, ConstructionError, PlisimError
from .koopman import dmd_fit, koopman_simulate, snapshots_from_trace
from .ltv import trace_distance
from .metrics import cohort_summary, glycemic, optimality, timed_median
from .oracle import WmnEventSchedule, oracle_simulate
from .plis import ClosedLoop, ErrorBudget, PlanOptions, compute_invariant_step, plis_simulate
from .solvers import SolverConfig

log = logging.getLogger("plisim")

ENGINES = ("oracle", "plis", "koopman")
CONTROLLERS = ("pid", "mpc", "bayesian_lqg")
CONTROL_LABELS = {"pid": "PID", "mpc": "MPC", "bayesian_lqg": "Bayesian LQG"}
TIMING_COLUMNS = ("s_p_mean", "s_p_sd", "seconds_median_mean")
TRACE_HEADER = ("time", "i", "i_s", "G", "u_insulin", "u_meal", "p3")


@dataclass
class ExperimentConfig:
    """Experiment settings. Times in minutes, budgets as fractions."""

    seed: int = 0
    count: int = 12
    cohort_file: str | None = None
    controllers: tuple = CONTROLLERS
    engines: tuple = ENGINES
    budgets: tuple = ((0.03, 0.05), (0.05, 0.10), (0.10, 0.15))
    horizon: float = 2 * DAY
    q_sim: float = 1.0
    reps: int = 5
    out: str = "results"
    rel_tol: float = 1e-6
    abs_tol: float = 1e-8
    q_inv0: float = 60.0
    decrement: float = 1.0
    trace_mode: str = "trace_rmse"
    settings: ApSettings = field(default_factory=ApSettings)
    pid: PidConfig = field(default_factory=PidConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    lqg: LqgConfig = field(default_factory=LqgConfig)
    koopman_order: int = 13
    koopman_step: float = 1.0
    training_days: float = 3.0
    write_traces: bool = True

    def __post_init__(self):
        self.controllers = tuple(self.controllers)
        self.engines = tuple(self.engines)
        self.budgets = tuple((float(a), float(b)) for a, b in self.budgets)
        for k in self.controllers:
            if k not in CONTROLLERS:
                raise ConfigurationError(f"unknown controller {k!r}")
        for e in self.engines:
            if e not in ENGINES:
                raise ConfigurationError(f"unknown engine {e!r}")
        for a, b in self.budgets:
            ErrorBudget(a, b)
        if self.horizon < self.q_sim:
            raise ConfigurationError("horizon must be at least q_sim")

    def to_dict(self):
        d = asdict(self)
        d["controllers"] = list(self.controllers)
        d["engines"] = list(self.engines)
        d["budgets"] = [list(b) for b in self.budgets]
        return d


def config_from_data(data, source=None) -> ExperimentConfig:
    """Validate a parsed configuration mapping (layout as in ``configs/default.yaml``)."""
    root = Section(data, "", source)
    d = ExperimentConfig()
    coh = root.sub("cohort")
    seed = coh.number("seed", d.seed, integer=True, nonneg=True)
    count = coh.number("count", d.count, integer=True, lo=1)
    cfile = coh.raw("file")
    if cfile is not None and not isinstance(cfile, str):
        coh.fail("file", "expected a path string")
    coh.check_unknown()
    ctrls = root.seq("controllers", list(d.controllers))
    for j, k in enumerate(ctrls):
        if k not in CONTROLLERS:
            raise ConfigurationError(f"'controllers[{j}]': unknown controller {k!r}; choose from {list(CONTROLLERS)}",
                                     ctrls.line_of(j) if hasattr(ctrls, "line_of") else None, source)
    engines = root.seq("engines", list(d.engines))
    for j, e in enumerate(engines):
        if e not in ENGINES:
            raise ConfigurationError(f"'engines[{j}]': unknown engine {e!r}; choose from {list(ENGINES)}",
                                     engines.line_of(j) if hasattr(engines, "line_of") else None, source)
    budgets = root.seq("budgets", [list(b) for b in d.budgets])
    for j, b in enumerate(budgets):
        line = budgets.line_of(j) if hasattr(budgets, "line_of") else None
        if not (isinstance(b, list) and len(b) == 2 and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                              for v in b)):
            raise ConfigurationError(f"'budgets[{j}]': expected [eps_p, psi_p]", line, source)
        try:
            ErrorBudget(float(b[0]), float(b[1]))
        except ConstructionError as exc:
            raise ConfigurationError(f"'budgets[{j}]': {exc}", line, source) from exc
    horizon = root.number("horizon", d.horizon, positive=True)
    q_sim = root.number("q_sim", d.q_sim, positive=True)
    reps = root.number("reps", d.reps, integer=True, lo=1)
    out = root.string("out", d.out)
    write_traces = root.boolean("write_traces", d.write_traces)
    sol = root.sub("solver")
    rel_tol = sol.number("rel_tol", d.rel_tol, positive=True)
    abs_tol = sol.number("abs_tol", d.abs_tol, positive=True)
    sol.check_unknown()
    pl = root.sub("plan")
    q_inv0 = pl.number("q_inv0", d.q_inv0, positive=True)
    dec = pl.number("decrement", d.decrement, positive=True)
    mode = pl.string("trace_mode", d.trace_mode, choices={"trace_rmse", "alg1_sum"})
    pl.check_unknown()
    st = root.sub("controller")
    settings = _build(st, ApSettings, {"setpoint": dict(lo=70.0, hi=180.0), "u_max": dict(positive=True),
                                       "period": dict(positive=True)})
    pid = _build(root.sub("pid"), PidConfig, {k: dict(nonneg=True) for k in ("kp", "ki", "kd")})
    mpc = _build(root.sub("mpc"), MpcConfig, {"prediction_horizon": dict(positive=True),
                                              "control_horizon": dict(positive=True),
                                              "Q": dict(positive=True), "R": dict(positive=True)})
    lqg = _build(root.sub("bayesian_lqg"), LqgConfig,
                 {"q_glucose": dict(positive=True), "r_insulin": dict(positive=True),
                  "process_noise": dict(nonneg=True), "measurement_noise": dict(nonneg=True),
                  "alpha": dict(nonneg=True), "excursion_window": dict(positive=True),
                  "floor": dict(positive=True), "ceiling": dict(positive=True)})
    kp = root.sub("koopman")
    order = kp.number("order", d.koopman_order, integer=True, lo=1)
    kstep = kp.number("step", d.koopman_step, positive=True)
    tdays = kp.number("training_days", d.training_days, positive=True)
    kp.check_unknown()
    root.check_unknown()
    if int(round(kstep / q_sim)) < 1 or abs(round(kstep / q_sim) * q_sim - kstep) > 1e-9 * kstep:
        raise ConfigurationError("'koopman.step' must be a multiple of q_sim", root._line("koopman"), source)
    if "koopman" in engines or "plis" in engines:
        if "oracle" not in engines:
            raise ConfigurationError("'engines': comparisons against the ORACLE need 'oracle' in the list",
                                     root._line("engines"), source)
    try:
        return ExperimentConfig(seed, count, cfile, tuple(ctrls), tuple(engines),
                                tuple((float(a), float(b)) for a, b in budgets), horizon, q_sim, reps, out,
                                rel_tol, abs_tol, q_inv0, dec, mode, settings, pid, mpc, lqg, order, kstep, tdays,
                                write_traces)
    except ConstructionError as exc:
        raise ConfigurationError(str(exc), None, source) from exc


def _build(sec, cls, rules):
    default = cls()
    kwargs = {k: sec.number(k, getattr(default, k), **r) for k, r in rules.items()}
    sec.check_unknown()
    try:
        return cls(**kwargs)
    except ConstructionError as exc:
        raise ConfigurationError(f"'{sec.path}': {exc}", sec._line(), sec.source) from exc


def load_config(path) -> ExperimentConfig:
    return config_from_data(load_yaml(path), str(path))


def config_from_yaml(text, source="<string>") -> ExperimentConfig:
    return config_from_data(load_yaml_text(text, source), source)


def config_from_dict(d) -> ExperimentConfig:
    """Inverse of :meth:`ExperimentConfig.to_dict` (used to reload manifests)."""
    d = dict(d)
    d["settings"] = ApSettings(**d["settings"])
    d["pid"] = PidConfig(**d["pid"])
    d["mpc"] = MpcConfig(**d["mpc"])
    d["lqg"] = LqgConfig(**d["lqg"])
    d["budgets"] = tuple(tuple(b) for b in d["budgets"])
    return ExperimentConfig(**d)


# ---------------------------------------------------------------- running

@dataclass
class Cell:
    patient: str
    controller: str
    approach: str
    status: str = "ok"
    message: str = ""
    trace: object = None
    tir: float = float("nan")
    tar: float = float("nan")
    tbr: float = float("nan")
    rho: float = float("nan")
    trace_error: float = float("nan")
    q_inv: float = float("nan")
    seconds: float = float("nan")
    s_p: float = float("nan")
    p3: object = None


@dataclass
class ExperimentResults:
    config: ExperimentConfig
    patients: list
    cells: list = field(default_factory=list)

    @property
    def failures(self):
        return [c for c in self.cells if c.status != "ok"]


def budget_label(b):
    return f"PLIS (eps={_pct(b[0])}, psi={_pct(b[1])})"


def _pct(v):
    s = f"{100 * v:.4g}"
    return f"{s}%"


def approaches(config):
    out = []
    if "oracle" in config.engines:
        out.append("ORACLE")
    if "plis" in config.engines:
        out += [budget_label(b) for b in config.budgets]
    if "koopman" in config.engines:
        out.append("Koopman")
    return out


def cohort_for(config: ExperimentConfig):
    if config.cohort_file:
        return load_cohort(config.cohort_file)
    days = int(np.ceil(max(config.horizon, config.training_days * DAY) / DAY)) + 1
    return generate_cohort(config.seed, config.count, days=days)


def _ctrl(config, kind, patient):
    cfg = {"pid": config.pid, "mpc": config.mpc, "bayesian_lqg": config.lqg}[kind]
    return make_controller(kind, patient, config.settings, cfg)


def _fill(cell, trace, oracle_trace):
    g = glycemic(trace)
    cell.tir, cell.tar, cell.tbr = g.tir, g.tar, g.tbr
    if oracle_trace is not None:
        cell.rho = optimality(trace, oracle_trace)
        cell.trace_error = trace_distance(trace, oracle_trace)


def run_experiment(config: ExperimentConfig, progress=None) -> ExperimentResults:
    """Run every (patient, controller) row of the matrix.

    Engine failures are recorded on their cell and the matrix continues.
    """
    patients = cohort_for(config)
    res = ExperimentResults(config, patients)
    span = (0.0, float(config.horizon))
    solver = SolverConfig(q_sim=config.q_sim, rel_tol=config.rel_tol, abs_tol=config.abs_tol)
    for p in patients:
        sys_ = bmm_system(p, max(config.horizon, config.training_days * DAY))
        sched = WmnEventSchedule(tuple(meal_schedule_events(p, span)))
        for kind in config.controllers:
            if progress:
                progress(f"{p.id} {kind}")
            oracle_trace = None
            oracle_cell = None
            if "oracle" in config.engines:
                oracle_cell = Cell(p.id, kind, "ORACLE")
                try:
                    oracle_trace, sec, _ = timed_median(
                        lambda: oracle_simulate(sys_, _ctrl(config, kind, p), sched, p.x0, span, solver), config.reps)
                    oracle_cell.trace = oracle_trace
                    oracle_cell.seconds = sec
                    oracle_cell.p3 = p3_at(p, oracle_trace.times)
                    _fill(oracle_cell, oracle_trace, None)
                except PlisimError as exc:
                    oracle_cell.status, oracle_cell.message = "failed", f"{type(exc).__name__}: {exc}"
                    oracle_trace = None
                res.cells.append(oracle_cell)
            if "plis" in config.engines:
                for b in config.budgets:
                    cell = Cell(p.id, kind, budget_label(b))
                    try:
                        plan = compute_invariant_step(
                            sys_, ClosedLoop(_ctrl(config, kind, p), sched), span, ErrorBudget(*b),
                            PlanOptions(config.q_inv0, config.decrement, config.q_sim, mode=config.trace_mode),
                            x0=p.x0)
                        cell.q_inv = plan.q_inv
                        if not plan.converged:
                            cell.message = "plan did not converge"
                        tr, sec, _ = timed_median(
                            lambda: plis_simulate(sys_, _ctrl(config, kind, p), sched, p.x0, span, plan, config.q_sim,
                                                  allow_unconverged=True), config.reps)
                        cell.trace = tr
                        cell.seconds = sec
                        cell.p3 = np.array([-plan.intervals[k].frozen.A_j[2, 2] for k in tr.extras["interval"]])
                        _fill(cell, tr, oracle_trace)
                        if oracle_cell is not None and oracle_trace is not None:
                            cell.s_p = oracle_cell.seconds / sec
                    except PlisimError as exc:
                        cell.status, cell.message = "failed", f"{type(exc).__name__}: {exc}"
                    res.cells.append(cell)
            if "koopman" in config.engines:
                cell = Cell(p.id, kind, "Koopman")
                try:
                    tspan = (0.0, config.training_days * DAY)
                    tsched = WmnEventSchedule(tuple(meal_schedule_events(p, tspan)))
                    train = oracle_simulate(sys_, _ctrl(config, kind, p), tsched, p.x0, tspan, solver)
                    model = dmd_fit([snapshots_from_trace(train, config.koopman_step)], config.koopman_order,
                                    config.koopman_step, delay_order=(2, 1, 0))
                    tr, sec, _ = timed_median(
                        lambda: koopman_simulate(model, _ctrl(config, kind, p), sched, p.x0, span, config.q_sim),
                        config.reps)
                    cell.trace = tr
                    cell.seconds = sec
                    cell.p3 = np.full(len(tr.times), p.p3_base)
                    cell.message = f"fit_error={model.fit_error:.3e}"
                    if not np.all(np.isfinite(tr.states)):
                        raise PlisimError("non-finite Koopman trace")
                    _fill(cell, tr, oracle_trace)
                    if oracle_cell is not None and oracle_trace is not None:
                        cell.s_p = oracle_cell.seconds / sec
                except (PlisimError, np.linalg.LinAlgError, FloatingPointError) as exc:
                    cell.status, cell.message = "failed", f"{type(exc).__name__}: {exc}"
                res.cells.append(cell)
    return res


# ---------------------------------------------------------------- reports

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _group(results):
    cfg = results.config
    out = []
    for kind in cfg.controllers:
        for appr in approaches(cfg):
            cells = [c for c in results.cells if c.controller == kind and c.approach == appr]
            if cells:
                out.append((appr, kind, cells))
    return out


def check_output_dir(path):
    """Create ``path`` if needed and make sure it is writable (raises OSError)."""
    os.makedirs(path, exist_ok=True)
    probe = os.path.join(path, ".write-test")
    with open(probe, "w", encoding="utf-8") as fh:
        fh.write("")
    os.remove(probe)


def _host_info():
    return {"platform": platform.platform(), "python": sys.version.split()[0], "numpy": np.__version__,
            "kernel_backend": _backend.BACKEND, "machine": platform.machine()}


TIMING_PROTOCOL = ("median wall-clock of N repetitions after one discarded warm-up run, measured around "
                   "the integration loop only; plan search and Koopman fitting are excluded; runs are serial")


def emit_reports(results: ExperimentResults | None, out_dir, config: ExperimentConfig | None = None):
    """Write CSV tables, trace files, summary and manifest; returns written paths."""
    check_output_dir(out_dir)
    cfg = results.config if results is not None else config
    written = []
    if results is not None and results.cells:
        groups = _group(results)
        gl_rows, op_rows, sp_rows = [], [], []
        for appr, kind, cells in groups:
            ok = [c for c in cells if c.status == "ok"]
            label = CONTROL_LABELS[kind]
            nf = len(cells) - len(ok)
            tir = cohort_summary(c.tir for c in ok)
            tar = cohort_summary(c.tar for c in ok)
            tbr = cohort_summary(c.tbr for c in ok)
            gl_rows.append([appr, label, *tir, *tar, *tbr, len(ok), nf])
            if appr == "ORACLE":
                continue
            rho = cohort_summary(c.rho for c in ok)
            te = cohort_summary(c.trace_error for c in ok)
            qv = [c.q_inv for c in ok if np.isfinite(c.q_inv)]
            op_rows.append([appr, label, *rho, *te, float(np.mean(qv)) if qv else float("nan"), len(ok), nf])
            sp = cohort_summary(c.s_p for c in ok)
            secs = float(np.mean([c.seconds for c in ok])) if ok else float("nan")
            sp_rows.append([appr, label, *sp, secs, len(ok), nf])
        p = os.path.join(out_dir, "glycemic.csv")
        _write_csv(p, ["approach", "control_method", "tir_mean", "tir_sd", "tar_mean", "tar_sd", "tbr_mean",
                       "tbr_sd", "patients", "failures"], gl_rows)
        written.append(p)
        p = os.path.join(out_dir, "optimality.csv")
        _write_csv(p, ["approach", "control_method", "rho_mean", "rho_sd", "trace_error_mean", "trace_error_sd",
                       "q_inv_mean", "patients", "failures"], op_rows)
        written.append(p)
        p = os.path.join(out_dir, "speedup.csv")
        _write_csv(p, ["approach", "control_method", *TIMING_COLUMNS, "patients", "failures"], sp_rows)
        written.append(p)
        p = os.path.join(out_dir, "cells.csv")
        _write_csv(p, ["patient", "control_method", "approach", "status", "tir", "tar", "tbr", "rho",
                       "trace_error", "q_inv", "message"],
                   [[c.patient, CONTROL_LABELS[c.controller], c.approach, c.status, c.tir, c.tar, c.tbr, c.rho,
                     c.trace_error, c.q_inv, c.message] for c in results.cells])
        written.append(p)
        if cfg.write_traces:
            tdir = os.path.join(out_dir, "traces")
            os.makedirs(tdir, exist_ok=True)
            for c in results.cells:
                if c.trace is None:
                    continue
                name = f"{c.patient}_{c.controller}_{_slug(c.approach)}.csv"
                p = os.path.join(tdir, name)
                tr = c.trace
                rows = np.column_stack([tr.times, tr.states[:, :3], tr.inputs[:, :2], c.p3])
                _write_csv(p, TRACE_HEADER, rows.tolist())
                written.append(p)
        p = os.path.join(out_dir, "summary.txt")
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(summary_text(results, gl_rows, op_rows, sp_rows))
        written.append(p)
    p = os.path.join(out_dir, "manifest.json")
    manifest = {
        "config": cfg.to_dict() if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "host": _host_info(),
        "timing_protocol": TIMING_PROTOCOL,
        "timing_fields": {"speedup.csv": list(TIMING_COLUMNS)},
        "files": [os.path.relpath(w, out_dir) for w in written],
        "failures": [] if results is None else [
            {"patient": c.patient, "controller": c.controller, "approach": c.approach, "message": c.message}
            for c in results.failures],
    }
    with open(p, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(p)
    return written


def _slug(label):
    s = label.lower().replace("plis (", "plis_").replace(")", "").replace("%", "pct")
    return "".join(ch if ch.isalnum() or ch in "._" else "_" for ch in s).strip("_").replace("__", "_")


def summary_text(results, gl_rows, op_rows, sp_rows):
    lines = [f"Cohort of {len(results.patients)} patients, horizon {results.config.horizon:g} min, "
             f"q_sim {results.config.q_sim:g} min", ""]

    def table(title, header, rows, fmt):
        w0 = max([len(header[0])] + [len(r[0]) for r in rows]) + 2
        lines.append(title)
        lines.append(header[0].ljust(w0) + "".join(h.ljust(16) for h in header[1:]))
        for r in rows:
            lines.append(r[0].ljust(w0) + "".join(s.ljust(16) for s in fmt(r)))
        lines.append("")

    table("Glycemic outcomes (mean +/- sd over patients, %)", ["Approach", "Control", "TIR", "TAR", "TBR"],
          gl_rows, lambda r: [r[1], f"{r[2]:.1f}+/-{r[3]:.1f}", f"{r[4]:.1f}+/-{r[5]:.1f}",
                              f"{r[6]:.1f}+/-{r[7]:.1f}"])
    table("Optimality rho and trace error vs ORACLE", ["Approach", "Control", "rho", "trace error", "q_inv"],
          op_rows, lambda r: [r[1], f"{r[2]:.4f}+/-{r[3]:.4f}", f"{r[4]:.4f}", f"{r[6]:.1f}"])
    table("Speedup S_p vs ORACLE", ["Approach", "Control", "S_p", "median s"],
          sp_rows, lambda r: [r[1], f"{r[2]:.2f}+/-{r[3]:.2f}", f"{r[4]:.4f}"])
    fails = results.failures
    lines.append(f"Failed cells: {len(fails)}")
    for c in fails:
        lines.append(f"  {c.patient} {c.controller} {c.approach}: {c.message}")
    return "\n".join(lines) + "\n"
