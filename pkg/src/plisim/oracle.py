"""Reference engine: adaptive integration of the full time-varying plant.

The ORACLE knows the coefficient functions exactly and every configuration
change in advance. It restarts the Dormand-Prince integrator at each event,
controller tick, disturbance edge and coefficient discontinuity, and it
re-freezes the plant model handed to the controller at every tick.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._loop import run_loop
from .errors import ConfigurationError
from .ltv import GRID_TOL, TimeVaryingLinearSystem, Trace, zero_order_hold
from .solvers import DormandPrince, SolverConfig


@dataclass(frozen=True)
class WmnEventSchedule:
    """Time-ordered configuration records ``(time, Y)``."""

    events: tuple = ()

    def __post_init__(self):
        evs = tuple((float(t), rec) for t, rec in self.events)
        for (a, _), (b, _) in zip(evs, evs[1:]):
            if b < a:
                raise ConfigurationError(f"event times must be ascending ({a} then {b})")
        if any(not np.isfinite(t) for t, _ in evs):
            raise ConfigurationError("event times must be finite")
        object.__setattr__(self, "events", evs)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    @property
    def times(self):
        return [t for t, _ in self.events]

    def within(self, span):
        t0, t1 = span
        for t, _ in self.events:
            if t < t0 - GRID_TOL or t > t1 + GRID_TOL:
                raise ConfigurationError(f"event at t={t} lies outside the horizon [{t0}, {t1}]")
        return self.events

    def merged(self, other):
        """Union of two schedules; ties keep ``self``'s records first."""
        evs = sorted(list(self.events) + list(other.events), key=lambda e: e[0])
        return WmnEventSchedule(tuple(evs))


def oracle_simulate(sys: TimeVaryingLinearSystem, controller, schedule: WmnEventSchedule | None,
                    x0, span, cfg: SolverConfig | None = None) -> Trace:
    """Closed-loop reference trace of ``sys`` under ``controller``.

    Between breakpoints the input is constant and ``dx/dt = A(t) x + B(t) u``
    is integrated with Dormand-Prince 4(5); states are resampled on the
    ``cfg.q_sim`` grid by dense output.
    """
    cfg = cfg or SolverConfig()
    stepper = DormandPrince(cfg.rel_tol, cfg.abs_tol, cfg.max_step)

    def integrate(a, b, x, u, sample_times):
        def f(t, z):
            return sys.A(t) @ z + sys.B(t) @ u
        return stepper.segment(f, a, b, x, sample_times)

    def model_at(t):
        return zero_order_hold(sys, t)

    tr = run_loop(controller, schedule, x0, span, cfg.q_sim, integrate=integrate, model_at=model_at,
                  extra_breaks=sys.breakpoints, label="oracle")
    tr.meta.update(nfev=stepper.nfev, naccept=stepper.naccept, nreject=stepper.nreject)
    return tr
