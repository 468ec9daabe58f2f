"""Delay-embedded DMD surrogate of the plant.

The lifted state stacks the current original state with delayed copies of
selected coordinates. A discrete-time linear model ``z' = A_k z + B_k u`` is
fitted by least squares over snapshot pairs with a truncated-SVD
pseudo-inverse, and simulated at its own step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from ._loop import run_loop
from .errors import ConstructionError, DivergenceError, FitError
from .ltv import Trace

#: Relative singular-value cutoff of the pseudo-inverse.
SV_CUTOFF = 1e-10


def delay_layout(n, n_k, order=None):
    """Delayed coordinates ``(state index, lag)`` filling the lift up to ``n_k``.

    Lags grow by one per round; within a round the states are taken in
    ``order`` (default: last state first).
    """
    if n_k < n:
        raise ConstructionError(f"n_k={n_k} is smaller than the state dimension {n}")
    order = tuple(range(n - 1, -1, -1)) if order is None else tuple(order)
    if not order or any(not 0 <= s < n for s in order):
        raise ConstructionError(f"delay order {order} does not index a {n}-state system")
    out = []
    lag = 1
    while len(out) < n_k - n:
        for s in order:
            if len(out) == n_k - n:
                break
            out.append((s, lag))
        lag += 1
    return tuple(out)


@dataclass(frozen=True)
class KoopmanModel:
    n: int
    m: int
    n_k: int
    A_k: np.ndarray
    B_k: np.ndarray
    step: float
    fit_error: float
    delays: tuple = ()
    truncated: int = 0

    @property
    def max_lag(self):
        return max((lag for _, lag in self.delays), default=0)

    def lift(self, window):
        """Lifted vector from a history window whose last row is the current state."""
        window = np.atleast_2d(np.asarray(window, dtype=float))
        if window.shape[1] != self.n or len(window) < self.max_lag + 1:
            raise ConstructionError(
                f"window of shape {window.shape} does not cover {self.max_lag} lags of {self.n} states")
        cur = len(window) - 1
        z = np.empty(self.n_k)
        z[:self.n] = window[cur]
        for j, (s, lag) in enumerate(self.delays):
            z[self.n + j] = window[cur - lag, s]
        return z

    def unlift(self, z):
        return np.asarray(z)[..., :self.n]

    def pad_window(self, x0_window):
        w = np.atleast_2d(np.asarray(x0_window, dtype=float))
        need = self.max_lag + 1
        if len(w) < need:
            w = np.vstack([np.repeat(w[:1], need - len(w), axis=0), w])
        return w

    def continuous_generator(self):
        """Matrix logarithm of ``A_k`` over ``step`` (principal branch)."""
        import scipy.linalg
        return scipy.linalg.logm(self.A_k) / self.step

    # -------------------------------------------------------- plain text
    def dumps(self):
        lines = ["# plisim koopman model v1",
                 f"n {self.n}", f"m {self.m}", f"n_k {self.n_k}",
                 f"step {self.step!r}", f"fit_error {self.fit_error!r}", f"truncated {self.truncated}",
                 f"delays {len(self.delays)}"]
        lines += [f"{s} {lag}" for s, lag in self.delays]
        for name, M in (("A_k", self.A_k), ("B_k", self.B_k)):
            lines.append(f"{name} {M.shape[0]} {M.shape[1]}")
            lines += [" ".join(repr(float(v)) for v in row) for row in M]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text):
        rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        it = iter(rows)

        def field(name):
            r = next(it)
            if r[0] != name:
                raise ValueError(f"expected '{name}', found '{r[0]}'")
            return r[1:]

        n = int(field("n")[0])
        m = int(field("m")[0])
        n_k = int(field("n_k")[0])
        step = float(field("step")[0])
        fit_error = float(field("fit_error")[0])
        truncated = int(field("truncated")[0])
        nd = int(field("delays")[0])
        delays = tuple((int(r[0]), int(r[1])) for r in (next(it) for _ in range(nd)))
        mats = []
        for name in ("A_k", "B_k"):
            r, c = (int(v) for v in field(name))
            mats.append(np.array([[float(v) for v in next(it)] for _ in range(r)]).reshape(r, c))
        return cls(n, m, n_k, mats[0], mats[1], step, fit_error, delays, truncated)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.loads(fh.read())


def _lift_sequence(X, delays, n, n_k):
    L = max((lag for _, lag in delays), default=0)
    T = len(X)
    Z = np.empty((T - L, n_k))
    Z[:, :n] = X[L:]
    for j, (s, lag) in enumerate(delays):
        Z[:, n + j] = X[L - lag:T - lag, s]
    return Z, L


def dmd_fit(snapshots, n_k=13, step=1.0, delay_order=None) -> KoopmanModel:
    """Fit ``z' = A_k z + B_k u`` on delay-lifted snapshot sequences.

    Parameters
    ----------
    snapshots : list of (states, inputs)
        Each ``states`` is ``(T, n)``, ``inputs`` is ``(T, m)`` (or ``(T-1, m)``)
        with ``inputs[t]`` applied over ``[t, t+1)``; all sampled every ``step``.
    n_k : int
        Lifted dimension.
    """
    if not snapshots:
        raise FitError("no snapshot sequences supplied")
    X0 = np.atleast_2d(np.asarray(snapshots[0][0], dtype=float))
    n = X0.shape[1] if X0.shape[0] > 1 or X0.ndim == 2 else 1
    U0 = np.asarray(snapshots[0][1], dtype=float)
    m = 1 if U0.ndim == 1 else U0.shape[1]
    delays = delay_layout(n, n_k, delay_order)
    Zs, Zn, Us = [], [], []
    for states, inputs in snapshots:
        X = np.asarray(states, dtype=float).reshape(len(states), -1)
        U = np.asarray(inputs, dtype=float).reshape(len(inputs), -1)
        if X.shape[1] != n or U.shape[1] != m:
            raise FitError("snapshot sequences disagree in dimension")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(U))):
            raise FitError("snapshots contain non-finite values")
        Z, L = _lift_sequence(X, delays, n, n_k)
        if len(Z) < 2:
            continue
        Zs.append(Z[:-1])
        Zn.append(Z[1:])
        Us.append(U[L:L + len(Z) - 1])
    pairs = sum(len(z) for z in Zs)
    if pairs < 10 * n_k:
        raise FitError(f"{pairs} snapshot pairs are fewer than 10*n_k = {10 * n_k}")
    Z = np.vstack(Zs).T
    Zp = np.vstack(Zn).T
    U = np.vstack(Us).T
    Omega = np.vstack([Z, U])
    Uo, s, Vt = np.linalg.svd(Omega, full_matrices=False)
    keep = s > SV_CUTOFF * s[0] if s.size and s[0] > 0 else np.zeros_like(s, dtype=bool)
    r = int(keep.sum())
    if r == 0:
        raise FitError("snapshot matrix is identically zero")
    G = Zp @ Vt[:r].T @ np.diag(1.0 / s[:r]) @ Uo[:, :r].T
    A_k = G[:, :n_k]
    B_k = G[:, n_k:]
    res = Zp - G @ Omega
    denom = np.linalg.norm(Zp)
    fit_error = float(np.linalg.norm(res) / denom) if denom > 0 else 0.0
    return KoopmanModel(n, m, n_k, A_k, B_k, float(step), fit_error, delays, int(len(s) - r))


def snapshots_from_trace(trace: Trace, step):
    """Resample a trace onto ``step`` and pair states with applied inputs."""
    q = trace.q_sim
    stride = int(round(step / q))
    if stride < 1 or abs(stride * q - step) > 1e-9 * step:
        raise ConstructionError(f"step {step} is not a multiple of the trace grid {q}")
    X = trace.states[::stride]
    if trace.inputs is None:
        raise ConstructionError("trace carries no inputs")
    U = trace.inputs[::stride]
    return X, U


def koopman_simulate(model: KoopmanModel, controller, schedule, x0_window, span, q_sim=None) -> Trace:
    """Closed-loop simulation of the lifted linear model.

    Every breakpoint (tick, event, disturbance edge) must fall on the model's
    step grid. States are emitted on the ``q_sim`` grid, linearly interpolated
    between model steps when ``q_sim`` is finer than the step.
    """
    q_sim = model.step if q_sim is None else q_sim
    step = model.step
    ratio = step / q_sim
    if abs(ratio - round(ratio)) > 1e-9 * max(ratio, 1.0):
        raise ConstructionError(f"model step {step} is not a multiple of q_sim {q_sim}")
    window = model.pad_window(x0_window)
    state = {"z": model.lift(window)}
    t0 = span[0]

    def integrate(a, b, x, u, sample_times):
        ka = (a - t0) / step
        kb = (b - t0) / step
        if abs(ka - round(ka)) > 1e-6 or abs(kb - round(kb)) > 1e-6:
            raise ConstructionError(f"breakpoint segment [{a}, {b}] is off the model step grid {step}")
        nsteps = int(round(kb - ka))
        z = state["z"]
        c = model.B_k @ u
        if nsteps > 0:
            out, bad = _backend.discrete_lti(model.A_k, c, z, nsteps)
            if bad >= 0:
                tb = a + (bad + 1) * step
                raise DivergenceError(f"Koopman state became non-finite at t={tb}", tb)
        else:
            out = np.empty((0, model.n_k))
        pts = np.vstack([z[None, :], out])
        state["z"] = pts[-1]
        xs = pts[:, :model.n]
        tt = a + step * np.arange(nsteps + 1)
        samples = np.empty((len(sample_times), model.n))
        for j in range(model.n):
            samples[:, j] = np.interp(sample_times, tt, xs[:, j])
        return xs[-1], samples

    tr = run_loop(controller, schedule, window[-1], span, q_sim, integrate=integrate,
                  model_at=lambda t: None, label="koopman")
    return tr
