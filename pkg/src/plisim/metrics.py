"""Glycemic statistics, optimality ratio and speedup."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConstructionError
from .ltv import Trace, _check_aligned, trace_distance

LOW = 70.0
HIGH = 180.0
GLUCOSE = 2


@dataclass(frozen=True)
class GlycemicReport:
    """Percent of samples in range (70..180 inclusive), above and below."""

    tir: float
    tar: float
    tbr: float


@dataclass(frozen=True)
class ComparisonReport:
    rho: float
    s_p: float
    trace_error: float


def glycemic(trace, index=GLUCOSE) -> GlycemicReport:
    G = trace.states[:, index] if isinstance(trace, Trace) else np.asarray(trace, dtype=float)
    if len(G) == 0:
        raise ValueError("glycemic statistics need at least one sample")
    n = len(G)
    below = int(np.count_nonzero(G < LOW))
    above = int(np.count_nonzero(G > HIGH))
    inside = n - below - above
    return GlycemicReport(100.0 * inside / n, 100.0 * above / n, 100.0 * below / n)


def cohort_summary(values):
    """Mean and sample standard deviation (0 for a single value)."""
    vals = [float(v) for v in values]
    if not vals:
        return float("nan"), float("nan")
    sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return statistics.fmean(vals), sd


def optimality(candidate: Trace, oracle: Trace) -> float:
    """Ratio of the summed per-state means of ``candidate`` and ``oracle``."""
    _check_aligned(candidate, oracle)
    den = float(np.sum(np.mean(oracle.states, axis=0)))
    if den == 0.0:
        raise ZeroDivisionError("oracle state means sum to zero")
    return float(np.sum(np.mean(candidate.states, axis=0))) / den


def speedup(candidate: Trace, oracle: Trace) -> float:
    """``oracle.wall_clock_seconds / candidate.wall_clock_seconds``."""
    a, b = oracle.wall_clock_seconds, candidate.wall_clock_seconds
    if a is None or b is None:
        raise ValueError("both traces need wall_clock_seconds")
    if not (a > 0 and b > 0):
        raise ValueError("wall-clock times must be positive")
    return float(a) / float(b)


def compare(candidate: Trace, oracle: Trace) -> ComparisonReport:
    return ComparisonReport(optimality(candidate, oracle), speedup(candidate, oracle),
                            trace_distance(candidate, oracle))


def timed_median(run, reps=5, warmup=1):
    """Run ``run()`` ``warmup + reps`` times; return (last result, median seconds, all seconds).

    ``run`` returns a :class:`Trace`; its ``wall_clock_seconds`` is used when
    set, otherwise the call is timed from outside.
    """
    if reps < 1:
        raise ConstructionError("reps must be >= 1")
    times = []
    result = None
    for k in range(warmup + reps):
        t = time.perf_counter()
        result = run()
        dt = time.perf_counter() - t
        wc = getattr(result, "wall_clock_seconds", None)
        if k >= warmup:
            times.append(wc if wc is not None else dt)
    return result, statistics.median(times), times
