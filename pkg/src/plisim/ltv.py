"""Time-varying linear systems, step inputs, traces and zero-order hold.

The plant is ``dx/dt = A(t) x + B(t) u(t)`` with ``u`` right-continuous and
piecewise constant. Every engine emits a :class:`Trace` on a uniform grid of
step ``q_sim`` so traces from different engines can be compared sample by
sample.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import AlignmentError, ConstructionError, EvaluationError, InputRangeError

#: Central-difference step (minutes) used when no analytic derivative is given.
FD_STEP = 0.01

#: Floor applied to RMS denominators in relative errors.
RMS_FLOOR = 1e-9

#: Tolerance used when snapping times onto a sample grid.
GRID_TOL = 1e-9


def _check_finite(mat, what, t):
    if not np.all(np.isfinite(mat)):
        idx = tuple(int(i) for i in np.argwhere(~np.isfinite(mat))[0])
        raise EvaluationError(f"{what}{list(idx)} is not finite at t={t!r}")
    return mat


@dataclass(frozen=True)
class TimeVaryingLinearSystem:
    """Coefficient functions of ``dx/dt = A(t) x + B(t) u``.

    Parameters
    ----------
    n, m : int
        State and input dimensions.
    A, B : callable
        ``t -> (n, n)`` and ``t -> (n, m)`` arrays.
    dA_dt, dB_dt : callable, optional
        Analytic time derivatives. When omitted a central difference with
        step :data:`FD_STEP` is used.
    vectorized : bool
        If true, ``dA_dt``/``dB_dt`` accept a 1-D array of times and return
        stacked ``(len(t), n, n)`` / ``(len(t), n, m)`` arrays.
    breakpoints : sequence of float
        Times at which a coefficient is discontinuous. Adaptive integration
        restarts there and piecewise-LTI intervals are split there.
    """

    n: int
    m: int
    A: Callable[[float], np.ndarray]
    B: Callable[[float], np.ndarray]
    dA_dt: Optional[Callable] = None
    dB_dt: Optional[Callable] = None
    vectorized: bool = False
    breakpoints: tuple = ()
    time_invariant: bool = False

    @classmethod
    def constant(cls, A, B):
        """Time-invariant system with zero coefficient derivatives."""
        A = np.array(A, dtype=float, ndmin=2)
        B = np.array(B, dtype=float, ndmin=2)
        n, m = A.shape[0], B.shape[1]
        if A.shape != (n, n) or B.shape[0] != n:
            raise ConstructionError(f"shape mismatch: A{A.shape}, B{B.shape}")
        A.setflags(write=False)
        B.setflags(write=False)
        zA = np.zeros((n, n))
        zB = np.zeros((n, m))

        def dA(t):
            t = np.asarray(t, dtype=float)
            return np.broadcast_to(zA, t.shape + zA.shape)

        def dB(t):
            t = np.asarray(t, dtype=float)
            return np.broadcast_to(zB, t.shape + zB.shape)

        return cls(n, m, lambda t: A, lambda t: B, dA, dB, vectorized=True, time_invariant=True)

    def a_at(self, t):
        a = np.asarray(self.A(t), dtype=float)
        if a.shape != (self.n, self.n):
            raise ConstructionError(f"A({t}) has shape {a.shape}, expected {(self.n, self.n)}")
        return _check_finite(a, "A", t)

    def b_at(self, t):
        b = np.asarray(self.B(t), dtype=float)
        if b.shape != (self.n, self.m):
            raise ConstructionError(f"B({t}) has shape {b.shape}, expected {(self.n, self.m)}")
        return _check_finite(b, "B", t)

    def _series(self, fn, fallback, ts, shape, name):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        if fn is not None and self.vectorized:
            out = np.asarray(fn(ts), dtype=float)
        elif fn is not None:
            out = np.stack([np.asarray(fn(t), dtype=float) for t in ts])
        else:
            h = FD_STEP
            out = np.stack([(fallback(t + h) - fallback(t - h)) / (2.0 * h) for t in ts])
        out = out.reshape((len(ts),) + shape)
        if not np.all(np.isfinite(out)):
            k = int(np.argwhere(~np.isfinite(out))[0][0])
            raise EvaluationError(f"d{name}/dt is not finite at t={ts[k]!r}")
        return out

    def da_series(self, ts):
        """dA/dt sampled at every time in ``ts``; shape (len(ts), n, n)."""
        return self._series(self.dA_dt, self.a_at, ts, (self.n, self.n), "A")

    def db_series(self, ts):
        """dB/dt sampled at every time in ``ts``; shape (len(ts), n, m)."""
        return self._series(self.dB_dt, self.b_at, ts, (self.n, self.m), "B")


@dataclass(frozen=True)
class FrozenSystem:
    """Coefficients held at their value at the start of ``interval``."""

    A_j: np.ndarray
    B_j: np.ndarray
    interval: tuple

    @property
    def n(self):
        return self.A_j.shape[0]

    @property
    def m(self):
        return self.B_j.shape[1]


def zero_order_hold(sys: TimeVaryingLinearSystem, tau_j: float, tau_next: float | None = None) -> FrozenSystem:
    """Freeze ``sys`` at ``tau_j``: ``A_j = A(tau_j)``, ``B_j = B(tau_j)``."""
    A = np.array(sys.a_at(tau_j), dtype=float)
    B = np.array(sys.b_at(tau_j), dtype=float)
    A.setflags(write=False)
    B.setflags(write=False)
    end = tau_j if tau_next is None else tau_next
    return FrozenSystem(A, B, (float(tau_j), float(end)))


def freeze_again(frozen: FrozenSystem, tau: float | None = None) -> FrozenSystem:
    """Treat a frozen system as a constant-coefficient system and hold it again."""
    sys = TimeVaryingLinearSystem.constant(frozen.A_j, frozen.B_j)
    t0 = frozen.interval[0] if tau is None else tau
    return zero_order_hold(sys, t0, frozen.interval[1])


class InputSignal:
    """Right-continuous piecewise-constant input.

    Parameters
    ----------
    breakpoints : sequence of float
        Strictly increasing segment start times; the first is the horizon start.
    values : array_like, shape (segments, m)
        Input level on each segment.
    T : float
        Horizon end.
    """

    def __init__(self, breakpoints: Sequence[float], values, T: float):
        bp = np.asarray(breakpoints, dtype=float)
        vals = np.array(values, dtype=float, ndmin=2)
        if bp.ndim != 1 or len(bp) == 0:
            raise ConstructionError("breakpoints must be a non-empty 1-D sequence")
        if len(vals) != len(bp):
            raise ConstructionError(f"{len(bp)} breakpoints but {len(vals)} segment values")
        if np.any(np.diff(bp) <= 0):
            raise ConstructionError("breakpoints must be strictly increasing")
        if T < bp[-1]:
            raise ConstructionError(f"horizon end {T} precedes the last breakpoint {bp[-1]}")
        if not np.all(np.isfinite(vals)):
            raise ConstructionError("input values must be finite")
        bp.setflags(write=False)
        vals.setflags(write=False)
        self.breakpoints = bp
        self.values = vals
        self.T = float(T)

    @property
    def m(self):
        return self.values.shape[1]

    @property
    def start(self):
        return float(self.breakpoints[0])

    @classmethod
    def constant(cls, value, T, start=0.0):
        return cls([start], [np.atleast_1d(np.asarray(value, dtype=float))], T)

    def segment_index(self, t):
        if t < self.breakpoints[0] - GRID_TOL or t > self.T + GRID_TOL:
            raise InputRangeError(f"t={t} outside input horizon [{self.breakpoints[0]}, {self.T}]")
        return int(np.searchsorted(self.breakpoints, t + GRID_TOL, side="right") - 1)

    def __call__(self, t):
        return self.values[max(self.segment_index(t), 0)]

    def sample(self, ts):
        """Values at every time in ``ts``, shape ``(len(ts), m)``."""
        ts = np.asarray(ts, dtype=float)
        if len(ts) and (ts.min() < self.breakpoints[0] - GRID_TOL or ts.max() > self.T + GRID_TOL):
            raise InputRangeError(f"samples outside input horizon [{self.breakpoints[0]}, {self.T}]")
        k = np.searchsorted(self.breakpoints, ts + GRID_TOL, side="right") - 1
        return self.values[np.maximum(k, 0)]

    def check_widths(self, q_sim):
        """Raise unless every segment is wider than ``q_sim``."""
        edges = np.append(self.breakpoints, self.T)
        widths = np.diff(edges)
        # the final segment may be empty when T coincides with the last breakpoint
        inner = widths[:-1] if widths[-1] == 0 else widths
        if np.any(inner <= q_sim):
            k = int(np.argmax(inner <= q_sim))
            raise ConstructionError(
                f"input segment starting at {edges[k]} is {inner[k]} min wide, not wider than q_sim={q_sim}")


def evaluate_input(sig: InputSignal, t: float) -> np.ndarray:
    """Value of ``sig`` at ``t`` (right-continuous at breakpoints)."""
    return sig(t)


def sample_grid(t0, t1, q_sim):
    """Uniform grid from ``t0`` to ``t1``; the last step may be shorter."""
    if q_sim <= 0:
        raise ConstructionError("q_sim must be positive")
    span = t1 - t0
    if span < 0:
        raise ConstructionError("span end precedes start")
    k = int(np.floor(span / q_sim + GRID_TOL))
    ts = t0 + q_sim * np.arange(k + 1)
    if t1 - ts[-1] > GRID_TOL * max(1.0, abs(t1)):
        ts = np.append(ts, t1)
    else:
        ts[-1] = t1
    return ts


def grid_index(t0, q_sim, t, n_samples):
    """Index of time ``t`` on the grid, or raise if it does not land on one."""
    k = int(round((t - t0) / q_sim))
    if k < 0 or k >= n_samples or abs(t0 + k * q_sim - t) > 1e-6 * max(q_sim, 1e-12):
        raise AlignmentError(f"time {t} is not on the q_sim={q_sim} grid starting at {t0}")
    return k


@dataclass
class Trace:
    """Engine output on a uniform sample grid.

    ``event_times`` partition the trace into trajectories; ``inputs`` and
    ``extras`` carry per-sample diagnostics (applied input, coefficients).
    """

    times: np.ndarray
    states: np.ndarray
    event_times: tuple = ()
    engine_label: str = ""
    wall_clock_seconds: float | None = None
    inputs: np.ndarray | None = None
    extras: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if len(self.times) != len(self.states):
            raise ConstructionError("times and states differ in length")
        self.event_times = tuple(float(e) for e in self.event_times)

    @property
    def n(self):
        return self.states.shape[1]

    @property
    def q_sim(self):
        if len(self.times) < 2:
            return float("nan")
        return float(self.times[1] - self.times[0])

    def __len__(self):
        return len(self.times)

    def boundary_indices(self):
        """Sample indices where each trajectory starts (plus the end)."""
        idx = [0]
        for e in self.event_times:
            k = int(np.searchsorted(self.times, e - GRID_TOL))
            if 0 < k < len(self.times) and k != idx[-1]:
                idx.append(k)
        idx.append(len(self.times))
        return idx

    def trajectories(self):
        """Split at ``event_times`` into half-open pieces ``[e_j, e_{j+1})``."""
        idx = self.boundary_indices()
        out = []
        for a, b in zip(idx[:-1], idx[1:]):
            out.append(Trace(
                self.times[a:b], self.states[a:b], (), self.engine_label, None,
                None if self.inputs is None else self.inputs[a:b],
                {k: v[a:b] for k, v in self.extras.items()}))
        return out

    @classmethod
    def concatenate(cls, pieces, event_times=None, engine_label=None, wall_clock_seconds=None):
        pieces = list(pieces)
        if not pieces:
            raise ConstructionError("nothing to concatenate")
        times = np.concatenate([p.times for p in pieces])
        states = np.concatenate([p.states for p in pieces])
        inputs = None
        if all(p.inputs is not None for p in pieces):
            inputs = np.concatenate([p.inputs for p in pieces])
        keys = set(pieces[0].extras)
        extras = {k: np.concatenate([p.extras[k] for p in pieces]) for k in keys
                  if all(k in p.extras for p in pieces)}
        if event_times is None:
            event_times = tuple(float(p.times[0]) for p in pieces[1:])
        label = pieces[0].engine_label if engine_label is None else engine_label
        return cls(times, states, tuple(event_times), label, wall_clock_seconds, inputs, extras)

    def window(self, t0, t1):
        """Samples with ``t0 <= t <= t1`` as a new trace (events dropped)."""
        a = int(np.searchsorted(self.times, t0 - GRID_TOL))
        b = int(np.searchsorted(self.times, t1 + GRID_TOL, side="right"))
        return Trace(self.times[a:b], self.states[a:b], (), self.engine_label, None,
                     None if self.inputs is None else self.inputs[a:b],
                     {k: v[a:b] for k, v in self.extras.items()})


class DistanceMode(str, enum.Enum):
    RELATIVE_RMSE = "relative_rmse"
    PER_TRAJECTORY_MAX = "per_trajectory_max"


def relative_rmse(a, b):
    """Per-state RMSE of ``a - b`` divided by the RMS of ``b`` (floored)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
        b = b[:, None]
    err = np.sqrt(np.mean((a - b) ** 2, axis=0))
    ref = np.sqrt(np.mean(b ** 2, axis=0))
    return err / np.maximum(ref, RMS_FLOOR)


def _check_aligned(a: Trace, b: Trace):
    if len(a.times) != len(b.times) or a.states.shape != b.states.shape:
        raise AlignmentError(f"trace shapes differ: {a.states.shape} vs {b.states.shape}")
    if len(a.times) and not np.allclose(a.times, b.times, rtol=0.0, atol=1e-9 * max(1.0, abs(a.times[-1]))):
        raise AlignmentError("trace sample times differ")


def trace_distance(a: Trace, b: Trace, mode: DistanceMode | str = DistanceMode.RELATIVE_RMSE) -> float:
    """Dimensionless distance between two traces on the same grid.

    ``relative_rmse`` takes the maximum over states of the relative RMSE
    with ``b`` as reference. ``per_trajectory_max`` applies the same measure
    to each trajectory of ``b`` and returns the worst one.
    """
    mode = DistanceMode(mode)
    _check_aligned(a, b)
    if len(a.times) == 0:
        return 0.0
    if mode is DistanceMode.RELATIVE_RMSE:
        return float(np.max(relative_rmse(a.states, b.states)))
    idx = b.boundary_indices()
    worst = 0.0
    for s, e in zip(idx[:-1], idx[1:]):
        worst = max(worst, float(np.max(relative_rmse(a.states[s:e], b.states[s:e]))))
    return worst
