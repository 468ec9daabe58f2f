"""Event/tick loop shared by the simulation engines.

Every engine walks the horizon through the merged set of breakpoints:
controller ticks, configuration events, disturbance edges and any
engine-specific times. At each breakpoint the pending events are applied,
the controller is ticked if due, and the engine integrates the segment to the
next breakpoint with the input held constant.
"""
from __future__ import annotations

import time

import numpy as np

from .errors import ConstructionError
from .ltv import GRID_TOL, Trace, sample_grid


def merge_times(t0, t1, *groups):
    pts = sorted(float(t) for g in groups for t in g if t0 - GRID_TOL <= t <= t1 + GRID_TOL)
    out = [t0]
    for t in pts:
        if t - out[-1] > GRID_TOL:
            out.append(t)
    if t1 - out[-1] > GRID_TOL:
        out.append(t1)
    else:
        out[-1] = t1
    return out


class LoopRunner:
    """Incremental closed-loop simulation.

    Parameters
    ----------
    integrate : callable
        ``integrate(a, b, x, u, sample_times) -> (x_b, samples)``.
    model_at : callable
        ``model_at(t) -> FrozenSystem or None`` handed to controller ticks.
    """

    def __init__(self, controller, schedule, x0, span, q_sim, *, integrate, model_at, extra_breaks=(), label=""):
        t0, t1 = span
        x0 = np.array(x0, dtype=float, ndmin=1)
        if not np.all(np.isfinite(x0)):
            raise ConstructionError("x0 must be finite")
        self.events = [] if schedule is None else list(schedule.within(span))
        for _, rec in self.events:
            controller.validate(rec)
        self.controller = controller
        self.integrate = integrate
        self.model_at = model_at
        self.label = label
        self.span = (float(t0), float(t1))
        self.ts = sample_grid(t0, t1, q_sim)
        self.states = np.empty((len(self.ts), len(x0)))
        self.inputs = np.empty((len(self.ts), controller.m))
        self.states[0] = x0
        self.elapsed = 0.0
        start = time.perf_counter()
        controller.reset(x0, span)
        ticks = controller.tick_times(span)
        self._tick_set = set(np.round(ticks, 9).tolist())
        self._ev_times = [e for e, _ in self.events]
        self._extra = list(extra_breaks)
        self.edges = merge_times(t0, t1, ticks, self._ev_times, controller.disturbance_edges(t0, t1), self._extra)
        self._seg = 0
        self._ei = 0
        self._k = 1
        self.x = x0
        self.elapsed += time.perf_counter() - start

    @property
    def t(self):
        return self.edges[self._seg]

    @property
    def done(self):
        return self._seg >= len(self.edges) - 1

    def add_breaks(self, times):
        """Insert future breakpoints (times not after the current one are ignored)."""
        t_now = self.t
        future = [b for b in times if b > t_now + GRID_TOL]
        if future:
            head = self.edges[:self._seg + 1]
            tail = merge_times(t_now, self.span[1], self.edges[self._seg + 1:], future)
            self.edges = head + tail[1:]

    def advance_to(self, t_stop):
        """Integrate up to the first breakpoint at or after ``t_stop``."""
        start = time.perf_counter()
        ctrl = self.controller
        ts = self.ts
        edges = self.edges
        while not self.done and edges[self._seg] < t_stop - GRID_TOL:
            a, b = edges[self._seg], edges[self._seg + 1]
            while self._ei < len(self.events) and self.events[self._ei][0] <= a + GRID_TOL:
                ctrl.apply(self.events[self._ei][1], self.events[self._ei][0])
                self._ei += 1
            if round(a, 9) in self._tick_set:
                ctrl.update(a, self.x, self.model_at(a))
            u = ctrl.input(a)
            k = self._k
            hi = k
            while hi < len(ts) and ts[hi] <= b + GRID_TOL:
                hi += 1
            lo = int(np.searchsorted(ts, a - GRID_TOL))
            self.inputs[lo:hi] = u
            self.x, samp = self.integrate(a, b, self.x, u, ts[k:hi])
            self.states[k:hi] = samp
            self._k = hi
            self._seg += 1
        if self.done:
            while self._ei < len(self.events):
                ctrl.apply(self.events[self._ei][1], self.events[self._ei][0])
                self._ei += 1
        self.elapsed += time.perf_counter() - start

    def trace(self):
        self.advance_to(self.span[1])
        return Trace(self.ts, self.states, tuple(self._ev_times), self.label, self.elapsed, self.inputs,
                     meta={"diagnostics": dict(self.controller.diagnostics)})


def run_loop(controller, schedule, x0, span, q_sim, *, integrate, model_at, extra_breaks=(), label=""):
    """Run a whole horizon and return the trace (see :class:`LoopRunner`)."""
    return LoopRunner(controller, schedule, x0, span, q_sim, integrate=integrate, model_at=model_at,
                      extra_breaks=extra_breaks, label=label).trace()
