"""Insulin controllers ``u = g(Y, x)`` for the artificial-pancreas loop.

A controller is ticked by the simulation engine every ``period`` minutes and
its command is held between ticks. Engines pass the plant model they are
integrating (a :class:`~plisim.ltv.FrozenSystem`) to every tick. Controllers
that build prediction matrices or Riccati gains cache them per model object,
so an engine that hands over the same frozen model for a whole interval gets
the factorisation once per interval, while an engine that re-freezes the
coefficients at every tick pays for a rebuild at every tick.

The full plant input is ``command + disturbance(t)``: the controller owns the
insulin channel, the disturbance carries endogenous glucose production and
meals, which the plant receives whether or not the controller knows of them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .apmodel import MEAL_SIZES, SIZE_ORDER, Meal, VirtualPatient, _a_matrix, meal_edges, meal_to_input
from .errors import ConfigurationError, ConstructionError
from .ltv import FrozenSystem, InputSignal

#: Default controller tick period, minutes.
TICK = 5.0


def discretize(A, B, h):
    """Zero-order-hold discretisation ``(exp(A h), int_0^h exp(A s) ds B)``."""
    n, m = B.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A
    M[:n, n:] = B
    E = scipy.linalg.expm(M * h)
    return E[:n, :n], E[:n, n:]


class Controller:
    """Base class: zero command, optional exogenous input.

    Subclasses override :meth:`_law` and :meth:`_apply`.
    """

    kind = "open_loop"
    record_keys = frozenset()

    def __init__(self, m, period=TICK, disturbance=None):
        if period is not None and not period > 0:
            raise ConstructionError("controller period must be positive")
        self.m = m
        self.period = period
        self._disturbance = disturbance
        self._command = np.zeros(m)
        self.diagnostics = {}

    # engine-facing API -------------------------------------------------
    def reset(self, x0, span):
        self._command = np.zeros(self.m)
        self.diagnostics = {"ticks": 0, "model_builds": 0}

    def tick_times(self, span):
        t0, t1 = span
        if self.period is None:
            return np.array([t0])
        k = int(math.ceil((t1 - t0) / self.period - 1e-9))
        return t0 + self.period * np.arange(max(k, 1))

    def disturbance(self, t):
        if self._disturbance is None:
            return np.zeros(self.m)
        return self._disturbance(t)

    def disturbance_edges(self, t0, t1):
        if self._disturbance is None:
            return []
        bp = self._disturbance.breakpoints
        return [float(b) for b in bp if t0 < b < t1]

    def update(self, t, x, model: FrozenSystem | None):
        """Recompute the held command from state ``x`` at a tick."""
        self.diagnostics["ticks"] = self.diagnostics.get("ticks", 0) + 1
        self._command = self._law(t, np.asarray(x, dtype=float), model)
        if not np.all(np.isfinite(self._command)):
            raise FloatingPointError(f"{self.kind} produced a non-finite command at t={t}")
        return self._command

    def input(self, t):
        return self._command + self.disturbance(t)

    @property
    def command(self):
        return self._command

    def apply(self, record, t=None):
        """Apply a configuration record ``Y`` received at time ``t``; unknown keys raise."""
        self._event_time = t
        if record is None:
            return
        self.validate(record)
        self._apply(record)

    def validate(self, record):
        """Raise :class:`ConfigurationError` unless ``record`` fits this controller."""
        if record is None:
            return
        if not isinstance(record, dict):
            raise ConfigurationError(f"event record must be a mapping, got {record!r}")
        bad = sorted(set(record) - set(self.record_keys) - {"note"})
        if bad:
            raise ConfigurationError(f"{self.kind} controller does not accept event keys {bad}")
        self._validate(record)

    # subclass hooks ----------------------------------------------------
    def _law(self, t, x, model):
        return np.zeros(self.m)

    def _validate(self, record):
        pass

    def _apply(self, record):
        pass


class OpenLoop(Controller):
    """Feeds a fixed input signal; never ticks."""

    def __init__(self, signal: InputSignal):
        super().__init__(signal.m, period=None, disturbance=signal)


# ----------------------------------------------------------- AP base

@dataclass
class ApSettings:
    """Settings shared by the three insulin controllers.

    Parameters
    ----------
    setpoint : float
        Target glucose, mg/dL.
    u_max : float
        Pump limit, uU/mL/min.
    period : float
        Tick period, minutes.
    """

    setpoint: float = 120.0
    u_max: float = 40.0
    period: float = TICK

    def __post_init__(self):
        if not 70.0 < self.setpoint < 180.0:
            raise ConstructionError(f"setpoint must lie in (70, 180), got {self.setpoint}")
        if not self.u_max > 0:
            raise ConstructionError("u_max must be positive")
        if not self.period > 0:
            raise ConstructionError("period must be positive")


class ApController(Controller):
    """Insulin controller for a virtual patient (channel 0 is insulin)."""

    record_keys = frozenset({"setpoint", "meal"})

    def __init__(self, patient: VirtualPatient, settings: ApSettings | None = None):
        self.settings = settings or ApSettings()
        super().__init__(2, self.settings.period)
        self.patient = patient
        self.basal = patient.bmm.i_b
        b = patient.bmm
        B = np.array([[b.p4, 0.0], [0.0, 0.0], [0.0, 1.0 / b.VoI]])
        self.nominal_model = FrozenSystem(_a_matrix(b, patient.p3_base), B, (0.0, math.inf))
        self.setpoint = self.settings.setpoint

    def reset(self, x0, span):
        super().reset(x0, span)
        self._command = np.array([self.basal, 0.0])
        self.setpoint = self.settings.setpoint
        p = self.patient
        self._disturbance = disturbance_signal(p, span)

    def clamp(self, u):
        return min(max(u, 0.0), self.settings.u_max)

    def _model(self, model):
        return self.nominal_model if model is None else model

    def _validate(self, record):
        if "setpoint" in record:
            sp = record["setpoint"]
            if isinstance(sp, bool) or not isinstance(sp, (int, float)) or not 70 < sp < 180:
                raise ConfigurationError(f"setpoint must be a number in (70, 180), got {sp!r}")
        if "meal" in record:
            _check_meal(record["meal"])

    def _apply(self, record):
        if "setpoint" in record:
            self.setpoint = float(record["setpoint"])


def _check_meal(meal):
    if not isinstance(meal, dict) or meal.get("size") not in MEAL_SIZES:
        raise ConfigurationError(f"meal record needs a size in {SIZE_ORDER}, got {meal!r}")
    g = meal.get("grams", MEAL_SIZES[meal["size"]])
    if isinstance(g, bool) or not isinstance(g, (int, float)) or g <= 0:
        raise ConfigurationError(f"meal grams must be positive, got {g!r}")


def disturbance_signal(patient: VirtualPatient, span):
    """``[0, egp + meals(t)]`` as a piecewise-constant signal over ``span``."""
    t0, t1 = span
    starts = [t0] + meal_edges(patient.meal_schedule, t0, t1, patient.meal_width)
    vals = [[0.0, patient.bmm.egp + meal_to_input(patient.meal_schedule, s, patient.meal_width,
                                                    patient.meal_factor)] for s in starts]
    return InputSignal(starts, vals, t1)


# ----------------------------------------------------------------- PID

@dataclass
class PidConfig:
    kp: float = 0.05
    ki: float = 0.0005
    kd: float = 0.1

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0:
            raise ConstructionError("PID gains must be non-negative")


class PidController(ApController):
    """PID on glucose error with trapezoidal integral and conditional integration."""

    kind = "pid"
    record_keys = ApController.record_keys | {"gains"}

    def __init__(self, patient, settings=None, config: PidConfig | None = None):
        super().__init__(patient, settings)
        self.config = config or PidConfig()
        self._gains0 = self.config

    def reset(self, x0, span):
        super().reset(x0, span)
        self.config = self._gains0
        self._integral = 0.0
        self._e_prev = None
        self.unclamped = self.basal

    def _gains(self, g):
        if not isinstance(g, dict) or set(g) - {"kp", "ki", "kd"}:
            raise ConfigurationError(f"gains record accepts kp, ki, kd; got {g!r}")
        try:
            return PidConfig(**{**self.config.__dict__, **{k: float(v) for k, v in g.items()}})
        except (ConstructionError, TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc

    def _validate(self, record):
        super()._validate(record)
        if "gains" in record:
            self._gains(record["gains"])

    def _apply(self, record):
        super()._apply(record)
        if "gains" in record:
            self.config = self._gains(record["gains"])

    def _law(self, t, x, model):
        return np.array([self.step(x[2], self.period), 0.0])

    def step(self, glucose, dt):
        """One PID update; returns the clamped command."""
        if not dt > 0:
            raise ValueError("dt must be positive")
        c = self.config
        e = glucose - self.setpoint
        if self._e_prev is None:
            deriv = 0.0
            trial = self._integral
        else:
            deriv = (e - self._e_prev) / dt
            trial = self._integral + 0.5 * (e + self._e_prev) * dt
        raw = self.basal + c.kp * e + c.ki * trial + c.kd * deriv
        if 0.0 <= raw <= self.settings.u_max:
            self._integral = trial
        else:
            raw = self.basal + c.kp * e + c.ki * self._integral + c.kd * deriv
        self._e_prev = e
        self.unclamped = raw
        return self.clamp(raw)


def pid_tick(ctrl: PidController, glucose_sample, dt):
    return ctrl.step(glucose_sample, dt)


# ----------------------------------------------------------------- MPC

@dataclass
class MpcConfig:
    prediction_horizon: float = 60.0
    control_horizon: float = 30.0
    Q: float = 1.0
    R: float = 0.1

    def __post_init__(self):
        if not (self.Q > 0 and self.R > 0):
            raise ConstructionError("MPC weights Q and R must be positive")
        if not 0 < self.control_horizon <= self.prediction_horizon:
            raise ConstructionError("need 0 < control_horizon <= prediction_horizon")


@dataclass
class MpcMatrices:
    """Stacked prediction ``G = F x0 + Phi U + c`` for one model."""

    F: np.ndarray
    Phi: np.ndarray
    c: np.ndarray
    hold: np.ndarray
    solver: np.ndarray
    Np: int
    Nc: int


def mpc_matrices(Ad, Bd, Np, Nc, disturbance, Q, R, ridge=0.0):
    """Prediction matrices for glucose (state 3) and the normal-equation solver.

    ``Bd`` columns are (insulin, glucose appearance); the appearance is held at
    ``disturbance`` over the horizon.
    """
    n = Ad.shape[0]
    e = np.zeros(n)
    e[2] = 1.0
    bu = Bd[:, 0]
    bd = Bd[:, 1] * disturbance
    F = np.zeros((Np, n))
    Phi = np.zeros((Np, Np))
    c = np.zeros(Np)
    powers = [np.eye(n)]
    for _ in range(Np):
        powers.append(Ad @ powers[-1])
    for k in range(1, Np + 1):
        F[k - 1] = e @ powers[k]
        for j in range(k):
            Phi[k - 1, j] = e @ powers[k - 1 - j] @ bu
        c[k - 1] = sum(e @ powers[k - 1 - j] @ bd for j in range(k))
    hold = np.zeros((Np, Nc))
    for k in range(Np):
        hold[k, min(k, Nc - 1)] = 1.0
    Phi = Phi @ hold
    H = Q * Phi.T @ Phi + R * hold.T @ hold + ridge * np.eye(Nc)
    solver = np.linalg.solve(H, Q * Phi.T)
    return MpcMatrices(F, Phi, c, hold, solver, Np, Nc)


def mpc_cost(U, x, Ad, Bd, Np, Nc, disturbance, Q, R, setpoint, basal):
    """Cost of the input plan ``U`` (length ``Nc``) by forward simulation."""
    cost = 0.0
    for k in range(Np):
        u = U[min(k, Nc - 1)]
        x = Ad @ x + Bd @ np.array([u, disturbance])
        cost += Q * (x[2] - setpoint) ** 2 + R * (u - basal) ** 2
    return float(cost)


def mpc_solve(mats: MpcMatrices, x, setpoint, basal):
    """Unconstrained optimum ``U`` of the receding-horizon cost."""
    r = setpoint - mats.F @ x - mats.c - mats.Phi @ np.full(mats.Nc, basal)
    return basal + mats.solver @ r


class MpcController(ApController):
    """Receding-horizon least squares on the plant model, then clamping."""

    kind = "mpc"
    record_keys = ApController.record_keys | {"weights"}

    def __init__(self, patient, settings=None, config: MpcConfig | None = None):
        super().__init__(patient, settings)
        self.config = config or MpcConfig()
        self._config0 = self.config
        self.Np = max(1, int(round(self.config.prediction_horizon / self.period)))
        self.Nc = max(1, int(round(self.config.control_horizon / self.period)))
        self._cache = None

    def reset(self, x0, span):
        super().reset(x0, span)
        self.config = self._config0
        self._cache = None
        self.diagnostics["ridge_fallbacks"] = 0

    def _weights(self, w):
        if not isinstance(w, dict) or set(w) - {"Q", "R"}:
            raise ConfigurationError(f"weights record accepts Q, R; got {w!r}")
        try:
            return MpcConfig(self.config.prediction_horizon, self.config.control_horizon,
                             float(w.get("Q", self.config.Q)), float(w.get("R", self.config.R)))
        except (ConstructionError, TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc

    def _validate(self, record):
        super()._validate(record)
        if "weights" in record:
            self._weights(record["weights"])

    def _apply(self, record):
        super()._apply(record)
        if "weights" in record:
            self.config = self._weights(record["weights"])
            self._cache = None

    def matrices(self, model):
        model = self._model(model)
        if self._cache is not None and self._cache[0] is model:
            return self._cache[1]
        self.diagnostics["model_builds"] = self.diagnostics.get("model_builds", 0) + 1
        Ad, Bd = discretize(model.A_j, model.B_j, self.period)
        cfg = self.config
        try:
            mats = mpc_matrices(Ad, Bd, self.Np, self.Nc, self.patient.bmm.egp, cfg.Q, cfg.R)
            if not np.all(np.isfinite(mats.solver)):
                raise np.linalg.LinAlgError("non-finite solver")
        except np.linalg.LinAlgError:
            self.diagnostics["ridge_fallbacks"] = self.diagnostics.get("ridge_fallbacks", 0) + 1
            mats = mpc_matrices(Ad, Bd, self.Np, self.Nc, self.patient.bmm.egp, cfg.Q, cfg.R, ridge=1e-8)
        self._cache = (model, mats)
        return mats

    def _law(self, t, x, model):
        U = mpc_solve(self.matrices(model), x, self.setpoint, self.basal)
        return np.array([self.clamp(U[0]), 0.0])


def mpc_tick(ctrl: MpcController, state_estimate, t, model=None):
    return ctrl.update(t, state_estimate, model)[0]


# ------------------------------------------------------ Bayesian LQG

class MealMarkovModel:
    """Laplace-smoothed first-order Markov chain over meal sizes."""

    def __init__(self, alpha=1.0, counts=None):
        if alpha < 0:
            raise ConstructionError("alpha must be >= 0")
        self.alpha = float(alpha)
        self.counts = np.zeros((3, 3)) if counts is None else np.array(counts, dtype=float)

    def observe(self, prev, nxt):
        self.counts[SIZE_ORDER.index(prev), SIZE_ORDER.index(nxt)] += 1

    def fit(self, history):
        for a, b in zip(history, history[1:]):
            self.observe(a, b)
        return self

    def transition(self):
        num = self.counts + self.alpha
        den = num.sum(axis=1, keepdims=True)
        # rows with no data and no smoothing fall back to uniform
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0 / 3.0)
        return out


def meal_predict(model: MealMarkovModel, history):
    """Most likely next size after ``history[-1]``; ties go to the larger size."""
    if not history:
        raise ValueError("history must be non-empty")
    row = model.transition()[SIZE_ORDER.index(history[-1])]
    best = max(range(3), key=lambda k: (row[k], k))
    return SIZE_ORDER[best], row


@dataclass
class LqgConfig:
    q_glucose: float = 1.0
    r_insulin: float = 0.1
    process_noise: float = 1e-4
    measurement_noise: float = 1.0
    alpha: float = 1.0
    excursion_window: float = 300.0
    floor: float = 90.0
    ceiling: float = 180.0

    def __post_init__(self):
        if not (self.q_glucose > 0 and self.r_insulin > 0):
            raise ConstructionError("LQR weights must be positive")
        if self.process_noise < 0 or self.measurement_noise < 0:
            raise ConstructionError("noise covariances must be >= 0")


def lqr_continuous(A, B, Q, R):
    """Continuous-time LQR: returns ``(K, P)`` with ``u = -K x``."""
    A, B, Q, R = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (A, B, Q, R))
    P = scipy.linalg.solve_continuous_are(A, B, Q, R)
    K = np.linalg.solve(R, B.T @ P)
    return K, P


def lqr_discrete(A, B, Q, R):
    """Discrete-time LQR: returns ``(K, P)`` with ``u = -K x``."""
    A, B, Q, R = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (A, B, Q, R))
    P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return K, P


def riccati_residual(A, B, Q, R, P, discrete=True):
    """Frobenius norm of the algebraic Riccati equation evaluated at ``P``."""
    A, B, Q, R, P = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (A, B, Q, R, P))
    if discrete:
        G = R + B.T @ P @ B
        res = A.T @ P @ A - P - A.T @ P @ B @ np.linalg.solve(G, B.T @ P @ A) + Q
    else:
        res = A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + Q
    return float(np.linalg.norm(res))


class BayesianLqgController(ApController):
    """Kalman filter plus LQR, with a setpoint set from the predicted next meal."""

    kind = "bayesian_lqg"

    def __init__(self, patient, settings=None, config: LqgConfig | None = None):
        super().__init__(patient, settings)
        self.config = config or LqgConfig()
        self._cache = None

    def reset(self, x0, span):
        super().reset(x0, span)
        self.xhat = np.array(x0, dtype=float)
        self.P = np.zeros((3, 3))
        self.markov = MealMarkovModel(self.config.alpha)
        self.history = []
        self._known_meals = []
        self._last_t = None
        self._cache = None
        self.diagnostics.update(riccati_fallbacks=0, estimates=[])

    def _apply(self, record):
        super()._apply(record)
        meal = record.get("meal")
        if meal is not None:
            size = meal["size"]
            grams = float(meal.get("grams", MEAL_SIZES[size]))
            t = self._event_time if self._event_time is not None else (self._last_t or 0.0)
            if self.history:
                self.markov.observe(self.history[-1], size)
            self.history.append(size)
            self._known_meals.append(Meal(t, size, grams))
            nxt, _ = meal_predict(self.markov, self.history)
            dg = self.excursion(nxt)
            c = self.config
            self.setpoint = max(c.floor, c.ceiling - dg)

    def excursion(self, size, model=None):
        """Peak glucose rise caused by a ``size`` meal with basal insulin only."""
        m = self._model(model)
        h = 1.0
        Ad, Bd = discretize(m.A_j, m.B_j, h)
        p = self.patient
        meal = (Meal(0.0, size, MEAL_SIZES[size]),)
        x = np.zeros(3)
        peak = 0.0
        for k in range(int(self.config.excursion_window / h)):
            x = Ad @ x + Bd[:, 1] * meal_to_input(meal, k * h, p.meal_width, p.meal_factor)
            peak = max(peak, x[2])
        return peak

    def gains(self, model):
        model = self._model(model)
        if self._cache is not None and self._cache[0] is model:
            return self._cache[1]
        self.diagnostics["model_builds"] = self.diagnostics.get("model_builds", 0) + 1
        Ad, Bd = discretize(model.A_j, model.B_j, self.period)
        c = self.config
        Q = np.diag([0.0, 0.0, c.q_glucose])
        try:
            K, P = lqr_discrete(Ad, Bd[:, :1], Q, [[c.r_insulin]])
            if not np.all(np.isfinite(K)):
                raise np.linalg.LinAlgError("non-finite gain")
        except (np.linalg.LinAlgError, ValueError):
            K = None
            self.diagnostics["riccati_fallbacks"] += 1
        out = (Ad, Bd, K)
        self._cache = (model, out)
        return out

    def _u2(self, t):
        p = self.patient
        return p.bmm.egp + meal_to_input(self._known_meals, t, p.meal_width, p.meal_factor)

    def _law(self, t, x, model):
        Ad, Bd, K = self.gains(model)
        c = self.config
        if self._last_t is not None:
            u = np.array([self._command[0], self._u2(self._last_t)])
            xp = Ad @ self.xhat + Bd @ u
            Pp = Ad @ self.P @ Ad.T + c.process_noise * np.eye(3)
            S = Pp[2, 2] + c.measurement_noise
            gain = Pp[:, 2] / S if S > 0 else np.zeros(3)
            self.xhat = xp + gain * (x[2] - xp[2])
            self.P = Pp - np.outer(gain, Pp[2, :])
        self._last_t = t
        self.diagnostics["estimates"].append(self.xhat.copy())
        if K is None:
            return np.array([self.basal, 0.0])
        m = self._model(model)
        b = self.patient.bmm
        p3 = -m.A_j[2, 2]
        u_ss = b.basal_for(p3, self.setpoint)
        x_ss = b.equilibrium(p3, u_ss, b.egp)
        u = u_ss - float(K[0] @ (self.xhat - x_ss))
        return np.array([self.clamp(u), 0.0])


def bayesian_lqg_tick(ctrl: BayesianLqgController, glucose_sample, t, model=None):
    x = np.array([np.nan, np.nan, glucose_sample])
    return ctrl.update(t, x, model)[0]


CONTROLLER_KINDS = {"pid": PidController, "mpc": MpcController, "bayesian_lqg": BayesianLqgController}


def make_controller(kind, patient, settings=None, config=None):
    try:
        cls = CONTROLLER_KINDS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown controller kind {kind!r}; choose from {sorted(CONTROLLER_KINDS)}")
    return cls(patient, settings, config)


def meal_schedule_events(patient, span):
    """Meal announcements as ``(time, record)`` pairs inside ``span``."""
    t0, t1 = span
    return [(m.time, {"meal": {"size": m.size, "grams": m.grams}}) for m in patient.meal_schedule
            if t0 < m.time < t1]
