"""Fixed-step Euler and adaptive Dormand-Prince 4(5) integrators.

Both integrators emit samples on the same uniform ``q_sim`` grid, so their
traces can be compared directly. The adaptive solver never steps across an
input or coefficient breakpoint: it restarts there from the current state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _backend
from .errors import ConstructionError, DivergenceError, StiffnessError
from .ltv import GRID_TOL, InputSignal, TimeVaryingLinearSystem, Trace, sample_grid

# Dormand-Prince 5(4) tableau.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# difference between the 5th and embedded 4th order weights
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# 4th-order continuous extension: y(t + s h) = y + h K^T P [s, s^2, s^3, s^4]
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
# PI step-size controller exponents (Hairer & Wanner, DOPRI5)
_ALPHA = 0.7 / 5
_BETA = 0.4 / 5
MIN_STEP = 1e-10


@dataclass(frozen=True)
class SolverConfig:
    """Integration settings. Times are in minutes."""

    q_sim: float = 1.0
    rel_tol: float = 1e-6
    abs_tol: float = 1e-8
    max_step: float = math.inf

    def __post_init__(self):
        if not self.q_sim > 0:
            raise ConstructionError(f"q_sim must be positive, got {self.q_sim}")
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ConstructionError("tolerances must be positive")
        if not self.max_step > 0:
            raise ConstructionError("max_step must be positive")


@dataclass
class OdeProblem:
    """``dx/dt = rhs(t, x, u(t))`` on ``span`` from ``x0``.

    ``system`` may carry the linear structure (``rhs`` is then derived from
    it), which lets the Euler integrator use the compiled kernel.
    """

    rhs: Optional[Callable]
    input: InputSignal
    x0: np.ndarray
    span: tuple
    system: Optional[TimeVaryingLinearSystem] = None
    breakpoints: tuple = field(default=())

    def __post_init__(self):
        self.x0 = np.array(self.x0, dtype=float, ndmin=1)
        if self.rhs is None:
            if self.system is None:
                raise ConstructionError("either rhs or system is required")
            sys = self.system
            self.rhs = lambda t, x, u: sys.A(t) @ x + sys.B(t) @ u
        if not np.all(np.isfinite(self.x0)):
            raise ConstructionError("x0 must be finite")

    @classmethod
    def from_system(cls, system, input, x0, span):
        return cls(None, input, x0, tuple(span), system=system)

    def all_breakpoints(self):
        t0, t1 = self.span
        pts = set(float(b) for b in self.input.breakpoints)
        if self.system is not None:
            pts.update(float(b) for b in self.system.breakpoints)
        pts.update(float(b) for b in self.breakpoints)
        inner = sorted(b for b in pts if t0 + GRID_TOL < b < t1 - GRID_TOL)
        return [t0] + inner + [t1]


def _check_span(problem, q_sim):
    t0, t1 = problem.span
    if t1 - t0 < q_sim - GRID_TOL:
        raise ConstructionError(f"span {problem.span} is shorter than q_sim={q_sim}")


def euler_fixed(problem: OdeProblem, q_sim: float) -> Trace:
    """Explicit Euler on the uniform grid ``t_start + k q_sim``.

    Each step is ``x_{k+1} = x_k + h (rhs(t_k, x_k, u(t_k)))`` with ``h = q_sim``
    except a final shortened step that lands on ``t_end``.
    """
    _check_span(problem, q_sim)
    t0, t1 = problem.span
    ts = sample_grid(t0, t1, q_sim)
    n = len(problem.x0)
    states = np.empty((len(ts), n))
    states[0] = problem.x0
    x = problem.x0
    sys = problem.system
    # interior steps use q_sim itself so the arithmetic matches multi-step kernels
    short = len(ts) > 1 and ts[-1] - ts[-2] < q_sim - GRID_TOL
    for k in range(len(ts) - 1):
        t = ts[k]
        h = ts[k + 1] - t if (short and k == len(ts) - 2) else q_sim
        u = problem.input(t)
        if sys is not None:
            out, bad = _backend.euler_lti(sys.A(t), sys.B(t), u, x, h, 1)
            xn = out[0]
            if bad >= 0:
                raise DivergenceError(f"Euler state became non-finite at t={ts[k + 1]}", ts[k + 1])
        else:
            xn = x + h * np.asarray(problem.rhs(t, x, u), dtype=float)
            if not np.all(np.isfinite(xn)):
                raise DivergenceError(f"Euler state became non-finite at t={ts[k + 1]}", ts[k + 1])
        states[k + 1] = xn
        x = xn
    inputs = problem.input.sample(ts)
    return Trace(ts, states, (), "euler", None, inputs)


def _rms_norm(x):
    return math.sqrt(float(np.dot(x, x)) / len(x))


def initial_step(f, t0, y0, f0, rtol, atol, direction_span):
    """Hairer's starting step heuristic (order 5)."""
    scale = atol + np.abs(y0) * rtol
    d0 = _rms_norm(y0 / scale)
    d1 = _rms_norm(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, direction_span)
    y1 = y0 + h0 * f0
    f1 = f(t0 + h0, y1)
    d2 = _rms_norm((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, direction_span)


class DormandPrince:
    """Adaptive Dormand-Prince 4(5) stepper with dense output.

    One instance integrates a sequence of breakpoint-free segments, carrying
    the last accepted step size from one segment to the next.
    """

    def __init__(self, rel_tol=1e-6, abs_tol=1e-8, max_step=math.inf):
        self.rtol = rel_tol
        self.atol = abs_tol
        self.max_step = max_step
        self.h = None
        self.nfev = 0
        self.naccept = 0
        self.nreject = 0

    def segment(self, f, t0, t1, y0, sample_times):
        """Integrate ``f(t, y)`` from ``t0`` to ``t1``.

        Returns ``(y1, samples)`` where ``samples`` holds the dense-output
        state at each entry of ``sample_times`` (all within ``(t0, t1]``).
        """
        y = np.array(y0, dtype=float)
        n = len(y)
        samples = np.empty((len(sample_times), n))
        span = t1 - t0
        if span <= 0:
            samples[:] = y
            return y, samples
        fy = np.asarray(f(t0, y), dtype=float)
        self.nfev += 1
        if self.h is None:
            h = initial_step(lambda t, z: np.asarray(f(t, z), dtype=float), t0, y, fy,
                             self.rtol, self.atol, span)
            self.nfev += 1
        else:
            h = self.h
        h = min(h, self.max_step)
        t = t0
        K = np.empty((7, n))
        si = 0
        err_old = 1e-4
        while t < t1:
            if t1 - t <= h * (1 + 1e-12) or t1 - t < 1e-12 * max(1.0, abs(t1)):
                h = t1 - t
                last = True
            else:
                last = False
            if h < MIN_STEP:
                raise StiffnessError(f"step size {h:.3e} underflowed at t={t}", t)
            K[0] = fy
            for s in range(1, 7):
                a = _A[s]
                dy = a[0] * K[0]
                for j in range(1, s):
                    if a[j] != 0.0:
                        dy = dy + a[j] * K[j]
                K[s] = f(t + _C[s] * h, y + h * dy)
            self.nfev += 6
            y_new = y + h * (_B[:6] @ K[:6])
            err_vec = h * (_E @ K)
            scale = self.atol + np.maximum(np.abs(y), np.abs(y_new)) * self.rtol
            err = _rms_norm(err_vec / scale)
            if not np.isfinite(err):
                if not np.all(np.isfinite(y_new)):
                    h *= MIN_FACTOR
                    self.nreject += 1
                    if h < MIN_STEP:
                        raise DivergenceError(f"state became non-finite near t={t}", t)
                    continue
            if err <= 1.0:
                t_new = t1 if last else t + h
                # dense output for the grid samples inside (t, t_new]
                hi = si
                while hi < len(sample_times) and sample_times[hi] <= t_new + GRID_TOL:
                    hi += 1
                if hi > si:
                    theta = (np.asarray(sample_times[si:hi]) - t) / h
                    theta = np.clip(theta, 0.0, 1.0)
                    powers = np.vstack([theta, theta ** 2, theta ** 3, theta ** 4])
                    Q = K.T @ _P
                    samples[si:hi] = (y[:, None] + h * (Q @ powers)).T
                    if last and abs(sample_times[hi - 1] - t1) <= GRID_TOL:
                        samples[hi - 1] = y_new
                    si = hi
                if not np.all(np.isfinite(y_new)):
                    raise DivergenceError(f"state became non-finite at t={t_new}", t_new)
                fac = SAFETY * max(err, 1e-10) ** (-_ALPHA) * err_old ** _BETA
                fac = min(MAX_FACTOR, max(MIN_FACTOR, fac))
                err_old = max(err, 1e-4)
                t = t_new
                y = y_new
                fy = K[6]
                self.naccept += 1
                if not last:
                    self.h = min(h * fac, self.max_step)
                    h = self.h
                else:
                    # keep the unclipped size as the guess for the next segment
                    self.h = min(max(self.h or h, h * fac), self.max_step)
                    break
            else:
                fac = max(MIN_FACTOR, SAFETY * err ** (-_ALPHA))
                h *= fac
                self.nreject += 1
        if si < len(sample_times):
            samples[si:] = y
        return y, samples


def rk45_adaptive(problem: OdeProblem, cfg: SolverConfig) -> Trace:
    """Dormand-Prince 4(5) with dense output resampled on the ``q_sim`` grid.

    Integration restarts at every input and coefficient breakpoint.
    """
    _check_span(problem, cfg.q_sim)
    t0, t1 = problem.span
    ts = sample_grid(t0, t1, cfg.q_sim)
    n = len(problem.x0)
    states = np.empty((len(ts), n))
    states[0] = problem.x0
    stepper = DormandPrince(cfg.rel_tol, cfg.abs_tol, cfg.max_step)
    edges = problem.all_breakpoints()
    y = problem.x0
    k = 1
    for a, b in zip(edges[:-1], edges[1:]):
        u = problem.input(a)
        hi = k
        while hi < len(ts) and ts[hi] <= b + GRID_TOL:
            hi += 1
        rhs = problem.rhs
        y, samp = stepper.segment(lambda t, z: rhs(t, z, u), a, b, y, ts[k:hi])
        states[k:hi] = samp
        k = hi
    inputs = problem.input.sample(ts)
    return Trace(ts, states, (), "rk45", None, inputs)
