"""Piecewise linear time-invariant simulation with error-bounded step search.

The horizon is cut into intervals ``[tau_j, tau_{j+1})`` of width at most
``q_inv``. On each interval the coefficients are frozen at ``tau_j`` and the
resulting LTI system is integrated with fixed-step Euler.

The error of freezing is bounded per interval by simulating an extended
system. With ``nu_A``, ``nu_B`` the largest coefficient slopes on the
interval times ``q_inv``, the state ``H = [X; mu]`` obeys

    dH/dt = [[A_j + nu_A, A_j], [nu_A, 0]] H + [[B_j + nu_B], [nu_B]] u,

started from ``[x(tau_j); 0]``. The relative RMSE between the top block of
``H`` and the frozen trajectory is the interval bound ``r_j``. The search
shrinks ``q_inv`` until every ``r_j`` meets the trajectory budget and the
whole-trace error meets the trace budget.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from ._loop import LoopRunner, run_loop
from .errors import ConstructionError, DivergenceError
from .ltv import (GRID_TOL, FrozenSystem, InputSignal, TimeVaryingLinearSystem, Trace, relative_rmse,
                  zero_order_hold)


@dataclass(frozen=True)
class ErrorBudget:
    """Trajectory budget ``eps_p`` and trace budget ``psi_p`` (fractions)."""

    eps_p: float
    psi_p: float

    def __post_init__(self):
        if not (0 < self.eps_p <= self.psi_p < 1):
            raise ConstructionError(f"need 0 < eps_p <= psi_p < 1, got ({self.eps_p}, {self.psi_p})")


@dataclass(frozen=True)
class SlopeEstimate:
    nu_A: np.ndarray
    nu_B: np.ndarray


@dataclass(frozen=True)
class ExtendedSystem:
    A_ex: np.ndarray
    B_ex: np.ndarray

    @property
    def n(self):
        return self.A_ex.shape[0] // 2

    def initial_state(self, x):
        x = np.asarray(x, dtype=float)
        return np.concatenate([x, np.zeros_like(x)])


class TraceErrorMode(str, enum.Enum):
    TRACE_RMSE = "trace_rmse"
    ALG1_SUM = "alg1_sum"


@dataclass(frozen=True)
class PlanInterval:
    tau: float
    tau_next: float
    frozen: FrozenSystem
    nu: SlopeEstimate
    r_max: float
    per_state: np.ndarray


@dataclass
class InvariantStepPlan:
    q_inv: float
    intervals: list
    trace_error: float
    converged: bool
    trace_error_sum: float = 0.0
    mode: str = TraceErrorMode.TRACE_RMSE.value
    budget: ErrorBudget | None = None
    iterations: int = 0
    history: list = field(default_factory=list)

    @property
    def taus(self):
        return [iv.tau for iv in self.intervals]

    @property
    def max_interval_error(self):
        return max((iv.r_max for iv in self.intervals), default=0.0)

    def interval_at(self, t):
        """Index of the interval containing ``t`` (right-open, last one closed)."""
        return int(self.intervals_at(np.array([t]))[0])

    def intervals_at(self, ts):
        """Vectorised :meth:`interval_at` over an array of times."""
        k = np.searchsorted(self.taus, np.asarray(ts, dtype=float) + GRID_TOL, side="right") - 1
        return np.clip(k, 0, len(self.intervals) - 1)


@dataclass(frozen=True)
class PlanOptions:
    """Search settings, minutes.

    ``q_inv0`` is the first candidate step and ``d`` the decrement. The floor
    defaults to ``q_sim``.
    """

    q_inv0: float = 60.0
    d: float = 1.0
    q_sim: float = 1.0
    floor: float | None = None
    mode: str = TraceErrorMode.TRACE_RMSE.value
    split_monotone: bool = True

    def __post_init__(self):
        if not (self.q_sim > 0 and self.d > 0 and self.q_inv0 >= self.q_sim):
            raise ConstructionError("need q_sim > 0, d > 0 and q_inv0 >= q_sim")
        TraceErrorMode(self.mode)


def _interval_grid(t0, t1, q_sim):
    k = max(int(math.floor((t1 - t0) / q_sim + 1e-9)), 1)
    ts = t0 + q_sim * np.arange(k + 1)
    if t1 - ts[-1] > GRID_TOL:
        ts = np.append(ts, t1)
    else:
        ts[-1] = t1
    return ts


def _signed_max(series):
    """Per entry: the sample of largest magnitude, with its sign."""
    idx = np.argmax(np.abs(series), axis=0)
    return np.take_along_axis(series, idx[None, ...], axis=0)[0]


def estimate_nu(sys: TimeVaryingLinearSystem, interval, q_inv, q_sim=1.0) -> SlopeEstimate:
    """Largest coefficient slope on ``interval`` (signed), times ``q_inv``.

    The derivative is sampled on the ``q_sim`` grid of the interval; the right
    end is evaluated just inside the interval so a discontinuity there is not
    picked up.
    """
    t0, t1 = interval
    if not t1 > t0:
        raise ConstructionError(f"empty interval {interval}")
    if sys.time_invariant:
        return SlopeEstimate(np.zeros((sys.n, sys.n)), np.zeros((sys.n, sys.m)))
    ts = _interval_grid(t0, t1, q_sim)
    ts[-1] = t1 - 1e-9 * max(1.0, abs(t1))
    nu_A = _signed_max(sys.da_series(ts)) * q_inv
    nu_B = _signed_max(sys.db_series(ts)) * q_inv
    return SlopeEstimate(nu_A, nu_B)


def build_extended_system(frozen: FrozenSystem, nu: SlopeEstimate) -> ExtendedSystem:
    A, B = frozen.A_j, frozen.B_j
    n, m = B.shape
    if A.shape != (n, n) or nu.nu_A.shape != (n, n) or nu.nu_B.shape != (n, m):
        raise ConstructionError(
            f"shape mismatch: A{A.shape}, B{B.shape}, nu_A{nu.nu_A.shape}, nu_B{nu.nu_B.shape}")
    A_ex = np.zeros((2 * n, 2 * n))
    A_ex[:n, :n] = A + nu.nu_A
    A_ex[:n, n:] = A
    A_ex[n:, :n] = nu.nu_A
    B_ex = np.vstack([B + nu.nu_B, nu.nu_B])
    return ExtendedSystem(A_ex, B_ex)


def _input_edges(inp, t0, t1):
    bps = getattr(inp, "breakpoints", None)
    if bps is None:
        return []
    return [float(b) for b in bps if t0 + GRID_TOL < b < t1 - GRID_TOL]


def _euler_piecewise(A, B, x0, ts, inp):
    """Euler on the uniform sample times ``ts`` with ``u = inp(t_k)`` per step.

    Steps are grouped into runs over which the input is constant so each run
    is a single kernel call.
    """
    out = np.empty((len(ts), len(x0)))
    out[0] = x0
    x = np.asarray(x0, dtype=float)
    N = len(ts) - 1
    if N <= 0:
        return out
    h = ts[1] - ts[0]
    # indices where the input may change: the first grid point at/after each edge
    cuts = sorted(set(int(np.searchsorted(ts, e - GRID_TOL)) for e in _input_edges(inp, ts[0], ts[-1])))
    bounds = [0] + [c for c in cuts if 0 < c < N] + [N]
    for k, j in zip(bounds[:-1], bounds[1:]):
        u = inp(ts[k])
        last_short = j == N and abs((ts[N] - ts[N - 1]) - h) > 1e-9 * max(h, 1.0)
        nfull = j - k - (1 if last_short else 0)
        if nfull > 0:
            seg, bad = _backend.euler_lti(A, B, u, x, h, nfull)
            if bad >= 0:
                tb = ts[k + bad + 1]
                raise DivergenceError(f"Euler state became non-finite at t={tb}", tb)
            out[k + 1:k + 1 + nfull] = seg
            x = seg[-1]
        if last_short:
            seg, bad = _backend.euler_lti(A, B, u, x, ts[N] - ts[N - 1], 1)
            if bad >= 0:
                raise DivergenceError(f"Euler state became non-finite at t={ts[N]}", ts[N])
            out[N] = seg[-1]
            x = seg[-1]
    return out


def _bound_runs(frozen, nu, x_start, inp, ts):
    ext = build_extended_system(frozen, nu)
    X = _euler_piecewise(frozen.A_j, frozen.B_j, x_start, ts, inp)
    H = _euler_piecewise(ext.A_ex, ext.B_ex, ext.initial_state(x_start), ts, inp)
    return X, H[:, :frozen.n]


def interval_error_bound(frozen: FrozenSystem, nu: SlopeEstimate, x_start, input, q_sim, interval=None):
    """Upper bound on the freezing error over one interval.

    Returns ``(r_max, per_state)``: the relative RMSE of the top block of the
    extended-system Euler trajectory against the frozen Euler trajectory.
    """
    t0, t1 = frozen.interval if interval is None else interval
    if t1 - t0 < q_sim - GRID_TOL:
        raise ConstructionError(f"interval [{t0}, {t1}] is narrower than q_sim={q_sim}")
    inp = input if callable(input) else (lambda t, v=np.atleast_1d(np.asarray(input, float)): v)
    ts = _interval_grid(t0, t1, q_sim)
    X, Htop = _bound_runs(frozen, nu, x_start, inp, ts)
    per = relative_rmse(Htop, X)
    return float(np.max(per)), per


def slope_sign_changes(sys: TimeVaryingLinearSystem, span, q_sim):
    """Grid times where some coefficient derivative changes sign."""
    if sys.time_invariant:
        return []
    t0, t1 = span
    ts = _interval_grid(t0, t1, q_sim)
    dA = sys.da_series(ts).reshape(len(ts), -1)
    dB = sys.db_series(ts).reshape(len(ts), -1)
    d = np.hstack([dA, dB])
    scale = np.max(np.abs(d), axis=0, keepdims=True)
    sgn = np.sign(np.where(np.abs(d) > 1e-12 * np.maximum(scale, 1e-300), d, 0.0))
    out = set()
    for col in sgn.T:
        nz = np.flatnonzero(col)
        flips = nz[1:][col[nz[1:]] != col[nz[:-1]]]
        out.update(float(t) for t in ts[flips])
    return sorted(out)


def partition(span, q_inv, forced=()):
    """Interval starts: every ``q_inv`` from the last start, cut at ``forced`` times."""
    t0, t1 = span
    forced = sorted(f for f in forced if t0 + GRID_TOL < f < t1 - GRID_TOL)
    taus = [t0]
    fi = 0
    while True:
        nxt = taus[-1] + q_inv
        while fi < len(forced) and forced[fi] <= taus[-1] + GRID_TOL:
            fi += 1
        if fi < len(forced) and forced[fi] < nxt - GRID_TOL:
            nxt = forced[fi]
        if nxt >= t1 - GRID_TOL:
            break
        taus.append(nxt)
    return taus + [t1]


def _snap(t, t0, q_sim):
    return t0 + round((t - t0) / q_sim) * q_sim


@dataclass
class ClosedLoop:
    """Controller (and optional event schedule) that excites the plan search.

    Passing this as the ``input`` of :func:`compute_invariant_step` evaluates
    every interval bound along the closed-loop PLIS trajectory itself, from
    the state PLIS reaches at ``tau_j`` and with the inputs it applies there.
    """

    controller: object
    schedule: object = None


def _open_loop_source(sys, inp, span, x0, q_sim, edges):
    x = np.asarray(x0, dtype=float)
    for a, b in zip(edges[:-1], edges[1:]):
        frozen = zero_order_hold(sys, a, b)
        ts = _interval_grid(a, b, q_sim)
        x_next = yield frozen, x, inp, ts
        x = x_next


def _closed_loop_source(sys, loop: ClosedLoop, span, x0, q_sim, edges):
    frozen = [zero_order_hold(sys, a, b) for a, b in zip(edges[:-1], edges[1:])]
    taus = np.array(edges[:-1])
    t0 = span[0]

    def model_at(t):
        k = int(np.searchsorted(taus, t + GRID_TOL, side="right") - 1)
        return frozen[min(max(k, 0), len(frozen) - 1)]

    def integrate(a, b, x, u, sample_times):
        fz = model_at(a)
        return _euler_segment(fz.A_j, fz.B_j, a, b, x, u, t0, q_sim, sample_times)

    runner = LoopRunner(loop.controller, loop.schedule, x0, span, q_sim, integrate=integrate,
                        model_at=model_at, extra_breaks=edges[1:-1], label="plis")
    for j, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        runner.advance_to(b)
        lo = int(np.searchsorted(runner.ts, a - GRID_TOL))
        hi = int(np.searchsorted(runner.ts, b + GRID_TOL, side="right"))
        ts = runner.ts[lo:hi]
        U = runner.inputs[lo:hi]
        keep = _change_points(U)
        inp = InputSignal(ts[keep], U[keep], ts[-1])
        yield frozen[j], runner.states[lo], inp, ts


def _plan_pass(sys, source, span, x0, q, q_sim, eps, forced, stop_early=True):
    edges = partition(span, q, forced)
    if isinstance(source, ClosedLoop):
        gen = _closed_loop_source(sys, source, span, x0, q_sim, edges)
    else:
        gen = _open_loop_source(sys, source, span, x0, q_sim, edges)
    intervals = []
    Xs, Hs = [], []
    ok = True
    item = next(gen)
    while True:
        frozen, x, inp, ts = item
        a, b = frozen.interval
        nu = estimate_nu(sys, (a, b), q, q_sim)
        X, Htop = _bound_runs(frozen, nu, x, inp, ts)
        per = relative_rmse(Htop, X)
        r = float(np.max(per))
        intervals.append(PlanInterval(a, b, frozen, nu, r, per))
        Xs.append(X[:-1])
        Hs.append(Htop[:-1])
        if r > eps:
            ok = False
            if stop_early:
                break
        try:
            item = gen.send(X[-1])
        except StopIteration:
            break
    gen.close()
    Xs.append(X[-1:])
    Hs.append(Htop[-1:])
    return intervals, np.vstack(Xs), np.vstack(Hs), ok


def compute_invariant_step(sys: TimeVaryingLinearSystem, input, span, budget: ErrorBudget,
                           opts: PlanOptions | None = None, x0=None) -> InvariantStepPlan:
    """Search the largest ``q_inv`` whose interval and trace bounds meet ``budget``.

    ``input`` excites the bound: an :class:`InputSignal` or constant vector
    (open loop, states chained by frozen Euler) or a :class:`ClosedLoop`
    (bounds evaluated along the closed-loop PLIS trajectory). ``x0`` is the
    start state (zeros if omitted). Candidates run from ``opts.q_inv0`` down by ``opts.d``
    to the floor; each candidate re-partitions the whole horizon.
    """
    opts = opts or PlanOptions()
    t0, t1 = span
    q_sim = opts.q_sim
    floor = q_sim if opts.floor is None else opts.floor
    x0 = np.zeros(sys.n) if x0 is None else np.asarray(x0, dtype=float)
    if isinstance(input, ClosedLoop) or callable(input):
        inp = input
    else:
        v = np.atleast_1d(np.asarray(input, dtype=float))
        inp = lambda t: v  # noqa: E731
    forced = [_snap(b, t0, q_sim) for b in sys.breakpoints]
    if opts.split_monotone:
        forced += slope_sign_changes(sys, span, q_sim)
    mode = TraceErrorMode(opts.mode)
    q = opts.q_inv0
    history = []
    it = 0
    while True:
        it += 1
        q = max(_snap(q, 0.0, q_sim), floor)
        intervals, X, H, ok = _plan_pass(sys, inp, span, x0, q, q_sim, budget.eps_p, forced)
        E_rmse = E_sum = math.inf
        if ok:
            E_rmse = float(np.max(relative_rmse(H, X)))
            E_sum = float(sum(iv.r_max for iv in intervals))
            E = E_rmse if mode is TraceErrorMode.TRACE_RMSE else E_sum
            ok = E <= budget.psi_p
        history.append((q, max(iv.r_max for iv in intervals), E_rmse))
        if ok:
            return InvariantStepPlan(q, intervals, E_rmse, True, E_sum, mode.value, budget, it, history)
        if q <= floor + GRID_TOL:
            if not intervals or len(intervals) < len(partition(span, q, forced)) - 1:
                # rerun without the early exit so the caller gets a full plan
                intervals, X, H, _ = _plan_pass(sys, inp, span, x0, q, q_sim, budget.eps_p, forced,
                                                stop_early=False)
                E_rmse = float(np.max(relative_rmse(H, X)))
                E_sum = float(sum(iv.r_max for iv in intervals))
            return InvariantStepPlan(q, intervals, E_rmse, False, E_sum, mode.value, budget, it, history)
        q = q - opts.d


def plis_simulate(sys: TimeVaryingLinearSystem, controller, schedule, x0, span,
                  plan: InvariantStepPlan, q_sim, allow_unconverged=False) -> Trace:
    """Closed-loop PLIS trace: frozen LTI pieces integrated with Euler at ``q_sim``.

    The controller receives the frozen model of the current interval, so a
    model-based controller factorises once per interval.
    """
    if not plan.converged and not allow_unconverged:
        raise ConstructionError("plan did not converge; pass allow_unconverged=True to use it anyway")
    t0 = span[0]
    taus = np.array(plan.taus)
    frozen = [iv.frozen for iv in plan.intervals]

    def model_at(t):
        k = int(np.searchsorted(taus, t + GRID_TOL, side="right") - 1)
        return frozen[min(max(k, 0), len(frozen) - 1)]

    def integrate(a, b, x, u, sample_times):
        fz = model_at(a)
        return _euler_segment(fz.A_j, fz.B_j, a, b, x, u, t0, q_sim, sample_times)

    tr = run_loop(controller, schedule, x0, span, q_sim, integrate=integrate, model_at=model_at,
                  extra_breaks=taus[1:], label="plis")
    tr.extras["interval"] = plan.intervals_at(tr.times)
    tr.meta["q_inv"] = plan.q_inv
    return tr


def _euler_segment(A, B, a, b, x, u, t0, q_sim, sample_times):
    """Euler from ``a`` to ``b`` along the global grid ``t0 + k q_sim``.

    Off-grid ends get one shortened step; the grid samples inside ``(a, b]``
    are returned.
    """
    pts = [a]
    ka = math.ceil((a - t0) / q_sim - 1e-9)
    first = t0 + ka * q_sim
    if first - a > GRID_TOL:
        pts.append(first)
    else:
        first = a
    kb = math.floor((b - t0) / q_sim + 1e-9)
    last = t0 + kb * q_sim
    nfull = max(int(round((last - first) / q_sim)), 0)
    x = np.asarray(x, dtype=float)
    states = []
    if pts[-1] != a:
        seg, bad = _backend.euler_lti(A, B, u, x, pts[-1] - a, 1)
        if bad >= 0:
            raise DivergenceError(f"Euler state became non-finite at t={pts[-1]}", pts[-1])
        x = seg[-1]
        states.append(seg)
    if nfull > 0:
        seg, bad = _backend.euler_lti(A, B, u, x, q_sim, nfull)
        if bad >= 0:
            tb = first + (bad + 1) * q_sim
            raise DivergenceError(f"Euler state became non-finite at t={tb}", tb)
        x = seg[-1]
        states.append(seg)
    end = first + nfull * q_sim
    if b - end > GRID_TOL:
        seg, bad = _backend.euler_lti(A, B, u, x, b - end, 1)
        if bad >= 0:
            raise DivergenceError(f"Euler state became non-finite at t={b}", b)
        x = seg[-1]
        states.append(seg)
    allst = np.vstack(states) if states else np.empty((0, len(x)))
    # map the produced points back onto the requested sample times
    times = []
    if first != a:
        times.append(first)
    times.extend(first + q_sim * np.arange(1, nfull + 1))
    if b - end > GRID_TOL:
        times.append(b)
    times = np.asarray(times)
    idx = np.searchsorted(times, np.asarray(sample_times) - GRID_TOL)
    idx = np.minimum(idx, len(times) - 1)
    return x, allst[idx] if len(sample_times) else np.empty((0, len(x)))


def _change_points(U):
    """Row 0 plus every interior row that differs from its predecessor (the last row is excluded)."""
    U = np.asarray(U)
    if len(U) < 3:
        return np.array([0])
    diff = np.any(U[1:-1] != U[:-2], axis=tuple(range(1, U.ndim)))
    return np.concatenate(([0], np.flatnonzero(diff) + 1))


def recorded_input(trace: Trace, t0, t1):
    """Piecewise-constant input signal rebuilt from a trace's applied inputs on ``[t0, t1]``."""
    w = trace.window(t0, t1)
    if w.inputs is None or len(w.times) == 0:
        raise ConstructionError("trace carries no inputs on the window")
    keep = _change_points(w.inputs)
    return InputSignal(w.times[keep], w.inputs[keep], t1)


def measured_interval_errors(sys: TimeVaryingLinearSystem, trace: Trace, plan: InvariantStepPlan, cfg=None,
                             with_trace_error=False):
    """Freezing error actually incurred by ``trace`` on each plan interval.

    Each interval is replayed with the adaptive solver on the true
    time-varying dynamics, starting from the PLIS state at ``tau_j`` and
    driven by the inputs PLIS applied there. Returns one relative RMSE (max
    over states) per interval. With ``with_trace_error`` also returns the
    relative RMSE of the concatenated replays against the whole PLIS trace,
    the measured counterpart of the plan's ``trace_error``.
    """
    from .solvers import OdeProblem, SolverConfig, rk45_adaptive

    cfg = cfg or SolverConfig(q_sim=trace.q_sim)
    out, mine, refs = [], [], []
    last = len(plan.intervals) - 1
    for j, iv in enumerate(plan.intervals):
        w = trace.window(iv.tau, iv.tau_next)
        inp = recorded_input(trace, iv.tau, iv.tau_next)
        prob = OdeProblem.from_system(sys, inp, w.states[0], (iv.tau, iv.tau_next))
        ref = rk45_adaptive(prob, SolverConfig(q_sim=trace.q_sim, rel_tol=cfg.rel_tol, abs_tol=cfg.abs_tol))
        out.append(float(np.max(relative_rmse(w.states, ref.states))))
        if with_trace_error:
            keep = slice(None) if j == last else slice(None, -1)
            mine.append(w.states[keep])
            refs.append(ref.states[keep])
    errs = np.array(out)
    if not with_trace_error:
        return errs
    return errs, float(np.max(relative_rmse(np.vstack(mine), np.vstack(refs))))
