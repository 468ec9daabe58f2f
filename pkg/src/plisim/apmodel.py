"""Artificial-pancreas plant: linear Bergman minimal model with cortisol.

State ``x = [i, i_s, G]`` (plasma insulin in uU/mL, interstitial insulin,
glucose in mg/dL), input ``u = [u_ins, u2]`` (insulin infusion and glucose
appearance rate in mg/dL/min). Time is in minutes from midnight of day one.

Glucose coordinates are absolute. A constant endogenous glucose production
``egp`` is carried inside the ``u2`` channel so that the basal equilibrium is
physiological; meals add to it.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .config_io import LineList, Section, dump_yaml, load_yaml, load_yaml_text
from .errors import ConfigurationError, ConstructionError
from .ltv import InputSignal, TimeVaryingLinearSystem

DAY = 1440.0

#: Carbohydrate sizes in grams.
MEAL_SIZES = {"small": 30.0, "medium": 60.0, "large": 90.0}
SIZE_ORDER = ("small", "medium", "large")

MEAL_WIDTH = 30.0
MEAL_FACTOR = 4.5


@dataclass(frozen=True)
class BmmParameters:
    """Patient coefficients of the linear minimal model.

    Parameters
    ----------
    p1 : float
        Interstitial insulin decay, 1/min.
    p2 : float
        Plasma-to-interstitial insulin transfer, 1/min.
    p4 : float
        Insulin infusion gain; also scales insulin sensitivity.
    n_decay : float
        Plasma insulin clearance, 1/min.
    G_b : float
        Glucose uptake per unit interstitial insulin, mg/dL per (uU/mL) per min.
    VoI : float
        Volume factor; ``u2`` enters glucose as ``u2 / VoI``.
    i_b : float
        Basal insulin infusion, uU/mL/min.
    egp : float
        Endogenous glucose appearance, mg/dL/min.
    """

    p1: float = 0.028
    p2: float = 3.0e-4
    p4: float = 0.015
    n_decay: float = 0.09
    G_b: float = 80.0
    VoI: float = 1.0
    i_b: float = 4.2
    egp: float = 2.4

    def __post_init__(self):
        for name in ("p1", "p2", "p4", "n_decay", "G_b", "VoI", "i_b", "egp"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ConstructionError(f"BMM parameter {name} must be finite and > 0, got {v!r}")

    def basal_for(self, p3, glucose):
        """Basal infusion holding ``G = glucose`` at rest for a given ``p3``."""
        i_s = (self.egp / self.VoI - p3 * glucose) / self.G_b
        return i_s * self.p1 * self.n_decay / (self.p2 * self.p4)

    def equilibrium(self, p3, u_ins=None, u2=None):
        """Steady state ``[i, i_s, G]`` for constant inputs."""
        u_ins = self.i_b if u_ins is None else u_ins
        u2 = self.egp if u2 is None else u2
        i = self.p4 * u_ins / self.n_decay
        i_s = self.p2 * i / self.p1
        G = (u2 / self.VoI - self.G_b * i_s) / p3
        return np.array([i, i_s, G])


@dataclass(frozen=True)
class CortisolProfile:
    """Stress-response cortisol model, events repeating every day.

    ``stress_event_times`` are minutes from midnight.
    """

    K_p: float = 1.215
    T_p1: float = 150.0
    T_p2: float = 300.0
    T_z: float = 90.0
    T_d: float = 15.0
    stress_event_times: tuple = (480.0, 870.0)
    repeat_daily: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stress_event_times", tuple(float(t) for t in self.stress_event_times))
        for name in ("K_p", "T_p1", "T_p2", "T_z", "T_d"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ConstructionError(f"cortisol parameter {name} must be finite and > 0, got {v!r}")
        if self.T_p1 == self.T_p2:
            raise ConstructionError("T_p1 and T_p2 must differ")
        ev = self.stress_event_times
        if any(not (0.0 <= t < DAY) for t in ev):
            raise ConstructionError(f"stress event times must lie within one day, got {ev}")
        if any(b <= a for a, b in zip(ev, ev[1:])):
            raise ConstructionError("stress event times must be strictly increasing")

    def events_until(self, t_end):
        """Absolute event times in ``[0, t_end]``."""
        if not self.repeat_daily:
            return np.array([e for e in self.stress_event_times if e <= t_end])
        days = int(np.floor(max(t_end, 0.0) / DAY)) + 1
        out = [d * DAY + e for d in range(days) for e in self.stress_event_times]
        return np.array([e for e in out if e <= t_end])

    def discontinuities(self, t_end):
        """Times where the delayed term switches on (``C`` jumps there)."""
        ts = self.events_until(t_end) + self.T_d
        return ts[ts < t_end]


def _single_event(p: CortisolProfile, s):
    """Response to one stress event and its derivative, ``s`` = time since event."""
    s = np.asarray(s, dtype=float)
    g = p.K_p / (p.T_p2 - p.T_p1)
    on = s >= 0.0
    sp = np.where(on, s, 0.0)
    e1 = np.exp(-sp / p.T_p1)
    e2 = np.exp(-sp / p.T_p2)
    val = e2 - e1
    der = -e2 / p.T_p2 + e1 / p.T_p1
    gate = s >= p.T_d
    sd = np.where(gate, s - p.T_d, 0.0)
    d1 = np.exp(-sd / p.T_p1)
    d2 = np.exp(-sd / p.T_p2)
    r = p.T_z / p.T_d
    val = val + np.where(gate, r * (d1 / p.T_p1 - d2 / p.T_p2), 0.0)
    der = der + np.where(gate, r * (-d1 / p.T_p1 ** 2 + d2 / p.T_p2 ** 2), 0.0)
    return np.where(on, g * val, 0.0), np.where(on, g * der, 0.0)


def _superpose(profile, t, which):
    t_arr = np.asarray(t, dtype=float)
    events = profile.events_until(float(np.max(t_arr)) if t_arr.size else 0.0)
    total = np.zeros_like(t_arr)
    for e in events:
        total = total + _single_event(profile, t_arr - e)[which]
    return total if t_arr.ndim else float(total)


def cortisol_at(profile: CortisolProfile, t):
    """Cortisol concentration (ng/dL) at time(s) ``t`` >= 0.

    Each stress event contributes a two-pole response whose zero is realised by
    a derivative term switched on ``T_d`` minutes after the event. Events
    superpose; times before an event contribute nothing.
    """
    return _superpose(profile, t, 0)


def cortisol_rate(profile: CortisolProfile, t):
    """Analytic ``dC/dt`` (ng/dL/min); one-sided from the right at the delay switch."""
    return _superpose(profile, t, 1)


def cortisol_peak(profile: CortisolProfile, horizon=2 * DAY, q=0.1):
    """Maximum of ``C`` over ``[0, horizon]`` on a grid of step ``q``; returns (value, time)."""
    ts = np.arange(0.0, horizon + q / 2, q)
    cs = cortisol_at(profile, ts)
    k = int(np.argmax(cs))
    return float(cs[k]), float(ts[k])


@dataclass(frozen=True)
class SensitivityRegression:
    """``p3(t) = p4 * (eta * C(t) + beta)``; eta is negative for stress."""

    eta: float = 0.0
    beta: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.eta) and np.isfinite(self.beta)) or self.beta <= 0:
            raise ConstructionError(f"need finite eta and beta > 0, got {self.eta!r}, {self.beta!r}")

    @classmethod
    def calibrated(cls, profile, depression=0.3, beta=1.0):
        """Pick eta so that peak cortisol lowers ``p3`` by ``depression`` of ``p4*beta``."""
        peak, _ = cortisol_peak(profile)
        return cls(eta=-depression * beta / peak, beta=beta)


@dataclass(frozen=True)
class Meal:
    time: float
    size: str
    grams: float

    def __post_init__(self):
        if self.size not in MEAL_SIZES:
            raise ConstructionError(f"meal size must be one of {SIZE_ORDER}, got {self.size!r}")
        if not (self.grams > 0 and np.isfinite(self.grams)):
            raise ConstructionError(f"meal grams must be positive, got {self.grams!r}")
        if not (self.time >= 0 and np.isfinite(self.time)):
            raise ConstructionError(f"meal time must be >= 0, got {self.time!r}")


@dataclass(frozen=True)
class VirtualPatient:
    id: str
    bmm: BmmParameters = field(default_factory=BmmParameters)
    cortisol: CortisolProfile = field(default_factory=CortisolProfile)
    sensitivity: SensitivityRegression = field(default_factory=SensitivityRegression)
    meal_schedule: tuple = ()
    x0: tuple = None
    meal_width: float = MEAL_WIDTH
    meal_factor: float = MEAL_FACTOR

    def __post_init__(self):
        meals = tuple(m if isinstance(m, Meal) else Meal(*m) for m in self.meal_schedule)
        if any(b.time < a.time for a, b in zip(meals, meals[1:])):
            raise ConstructionError("meals must be ordered in time")
        object.__setattr__(self, "meal_schedule", meals)
        if self.meal_width <= 0 or self.meal_factor <= 0:
            raise ConstructionError("meal width and factor must be positive")
        # p3 must stay positive through the deepest cortisol trough of a day
        s = self.sensitivity
        if s.eta < 0:
            peak, _ = cortisol_peak(self.cortisol)
            if s.eta * peak + s.beta <= 0:
                raise ConstructionError(
                    f"patient {self.id}: p3 turns non-positive at peak cortisol (eta={s.eta}, beta={s.beta})")
        if self.x0 is None:
            x0 = self.bmm.equilibrium(self.p3_at(0.0))
        else:
            x0 = np.asarray(self.x0, dtype=float)
            if x0.shape != (3,) or not np.all(np.isfinite(x0)):
                raise ConstructionError(f"x0 must be 3 finite values, got {self.x0!r}")
        object.__setattr__(self, "x0", tuple(float(v) for v in x0))

    @property
    def p3_base(self):
        """Nominal insulin sensitivity ``p4 * beta`` (zero cortisol)."""
        return self.bmm.p4 * self.sensitivity.beta

    def p3_at(self, t):
        return p3_at(self, t)

    def meals_in(self, t0, t1):
        return [m for m in self.meal_schedule if t0 <= m.time < t1]

    def with_eta(self, eta):
        return replace(self, sensitivity=replace(self.sensitivity, eta=eta), x0=None)


def p3_at(patient: VirtualPatient, t):
    """Time-varying insulin sensitivity coefficient ``p3(t)``, 1/min."""
    s = patient.sensitivity
    if s.eta == 0.0:
        base = patient.bmm.p4 * s.beta
        return np.full(np.shape(t), base) if np.ndim(t) else base
    return patient.bmm.p4 * (s.eta * cortisol_at(patient.cortisol, t) + s.beta)


def p3_rate(patient: VirtualPatient, t):
    """Analytic ``dp3/dt``."""
    s = patient.sensitivity
    if s.eta == 0.0:
        return np.zeros(np.shape(t)) if np.ndim(t) else 0.0
    return patient.bmm.p4 * s.eta * cortisol_rate(patient.cortisol, t)


def bmm_system(patient: VirtualPatient, horizon=21 * DAY) -> TimeVaryingLinearSystem:
    """Time-varying linear plant of ``patient``.

    ``breakpoints`` lists the cortisol discontinuities up to ``horizon``.
    """
    b = patient.bmm
    B = np.array([[b.p4, 0.0], [0.0, 0.0], [0.0, 1.0 / b.VoI]])
    B.setflags(write=False)
    if patient.sensitivity.eta == 0.0:
        return TimeVaryingLinearSystem.constant(_a_matrix(b, p3_at(patient, 0.0)), B)

    def A(t):
        return _a_matrix(b, p3_at(patient, float(t)))

    def dA(ts):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        out = np.zeros((len(ts), 3, 3))
        out[:, 2, 2] = -p3_rate(patient, ts)
        return out

    def dB(ts):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        return np.zeros((len(ts), 3, 2))

    bps = tuple(float(t) for t in patient.cortisol.discontinuities(horizon))
    return TimeVaryingLinearSystem(3, 2, A, lambda t: B, dA, dB, vectorized=True, breakpoints=bps)


def _a_matrix(b: BmmParameters, p3):
    return np.array([
        [-b.n_decay, 0.0, 0.0],
        [b.p2, -b.p1, 0.0],
        [0.0, -b.G_b, -p3],
    ])


def meal_to_input(schedule: Sequence[Meal], t, width=MEAL_WIDTH, factor=MEAL_FACTOR):
    """Meal glucose appearance rate (mg/dL/min) at time(s) ``t``.

    Each meal is a rectangular pulse on ``[time, time + width)`` of height
    ``grams * factor / width``; overlapping pulses add.
    """
    t_arr = np.asarray(t, dtype=float)
    out = np.zeros_like(t_arr)
    for meal in schedule:
        on = (t_arr >= meal.time) & (t_arr < meal.time + width)
        out = out + np.where(on, meal.grams * factor / width, 0.0)
    return out if t_arr.ndim else float(out)


def meal_edges(schedule, t0, t1, width=MEAL_WIDTH):
    """Sorted times in ``(t0, t1)`` where the meal input changes."""
    edges = set()
    for meal in schedule:
        for e in (meal.time, meal.time + width):
            if t0 < e < t1:
                edges.add(float(e))
    return sorted(edges)


def open_loop_input(patient: VirtualPatient, span, insulin=None, with_meals=True) -> InputSignal:
    """Piecewise-constant ``[u_ins, u2]`` with constant insulin (basal by default)."""
    t0, t1 = span
    u_ins = patient.bmm.i_b if insulin is None else insulin
    meals = patient.meal_schedule if with_meals else ()
    starts = [t0] + meal_edges(meals, t0, t1, patient.meal_width)
    vals = [[u_ins, patient.bmm.egp + meal_to_input(meals, s, patient.meal_width, patient.meal_factor)]
            for s in starts]
    return InputSignal(starts, vals, t1)


# ---------------------------------------------------------------- cohort

_PERTURBED = ("p1", "p2", "p4", "n_decay", "G_b", "VoI", "egp")


def _meal_chain(rng):
    """Per-patient meal-size transition matrix with a mild habit bias."""
    P = rng.dirichlet(np.ones(3), size=3) + 0.5 * np.eye(3)
    return P / P.sum(axis=1, keepdims=True)


def generate_cohort(seed, count=12, *, days=21, fasting_glucose=120.0, spread=0.2,
                    meal_times=(450.0, 750.0, 1140.0), depression=0.3,
                    base=None, cortisol=None, max_retries=100):
    """Synthetic virtual patients from uniform perturbations of the defaults.

    Every BMM coefficient in ``p1, p2, p4, n_decay, G_b, VoI, egp`` is scaled
    by an independent factor in ``[1 - spread, 1 + spread]``. The basal rate
    is then solved so that the rest glucose equals ``fasting_glucose``; draws
    that need a non-positive basal rate are redrawn. Meal sizes follow a
    patient-specific Markov chain over (small, medium, large).
    """
    if count < 1:
        raise ConstructionError("count must be >= 1")
    base = BmmParameters() if base is None else base
    cortisol = CortisolProfile() if cortisol is None else cortisol
    sens = SensitivityRegression.calibrated(cortisol, depression)
    rng = np.random.default_rng(seed)
    patients = []
    for k in range(count):
        for _ in range(max_retries):
            f = rng.uniform(1.0 - spread, 1.0 + spread, size=len(_PERTURBED))
            vals = {name: getattr(base, name) * fk for name, fk in zip(_PERTURBED, f)}
            proto = replace(base, **vals)
            i_b = proto.basal_for(proto.p4 * sens.beta, fasting_glucose)
            if i_b > 0:
                break
        else:
            raise ConstructionError(f"could not draw a valid patient {k} after {max_retries} tries")
        bmm = replace(proto, i_b=float(i_b))
        P = _meal_chain(rng)
        size = SIZE_ORDER[int(rng.integers(3))]
        meals = []
        for d in range(days):
            for mt in meal_times:
                meals.append(Meal(d * DAY + float(mt), size, MEAL_SIZES[size]))
                size = SIZE_ORDER[int(rng.choice(3, p=P[SIZE_ORDER.index(size)]))]
        patients.append(VirtualPatient(f"P{k + 1:02d}", bmm, cortisol, sens, tuple(meals)))
    return patients


# ---------------------------------------------------------- serialization

def patient_to_dict(p: VirtualPatient):
    c = p.cortisol
    return {
        "id": p.id,
        "bmm": {k: getattr(p.bmm, k) for k in ("p1", "p2", "p4", "n_decay", "G_b", "VoI", "i_b", "egp")},
        "cortisol": {"K_p": c.K_p, "T_p1": c.T_p1, "T_p2": c.T_p2, "T_z": c.T_z, "T_d": c.T_d,
                     "stress_event_times": list(c.stress_event_times), "repeat_daily": c.repeat_daily},
        "sensitivity": {"eta": p.sensitivity.eta, "beta": p.sensitivity.beta},
        "meal_width": p.meal_width,
        "meal_factor": p.meal_factor,
        "meals": [[m.time, m.size, m.grams] for m in p.meal_schedule],
        "x0": list(p.x0),
    }


def cohort_to_yaml(patients):
    """Cohort config text. Units: minutes, mg/dL, uU/mL, grams, ng/dL."""
    header = ("# Virtual patient cohort. Units: time in minutes, glucose mg/dL,\n"
              "# insulin uU/mL, meal carbohydrate in grams, cortisol ng/dL.\n")
    return header + dump_yaml({"patients": [patient_to_dict(p) for p in patients]})


def _wrap(fn, sec, key):
    try:
        return fn()
    except ConstructionError as exc:
        raise ConfigurationError(f"'{sec.path}': {exc}", sec._line(key), sec.source) from exc


def patient_from_section(sec: Section):
    pid = sec.string("id")
    b = sec.sub("bmm")
    bmm_vals = {k: b.number(k, getattr(BmmParameters, k), positive=True)
                for k in ("p1", "p2", "p4", "n_decay", "G_b", "VoI", "i_b", "egp")}
    b.check_unknown()
    c = sec.sub("cortisol")
    cvals = {k: c.number(k, getattr(CortisolProfile, k), positive=True)
             for k in ("K_p", "T_p1", "T_p2", "T_z", "T_d")}
    ev = c.seq("stress_event_times", [480.0, 870.0])
    for j, e in enumerate(ev):
        if isinstance(e, bool) or not isinstance(e, (int, float)):
            raise ConfigurationError(f"'{c.path}.stress_event_times[{j}]': expected a number",
                                     ev.line_of(j) if isinstance(ev, LineList) else None, sec.source)
    cvals["repeat_daily"] = c.boolean("repeat_daily", True)
    c.check_unknown()
    s = sec.sub("sensitivity")
    eta = s.number("eta", 0.0)
    beta = s.number("beta", 1.0, positive=True)
    s.check_unknown()
    meals_raw = sec.seq("meals", [])
    meals = []
    for j, m in enumerate(meals_raw):
        line = meals_raw.line_of(j) if isinstance(meals_raw, LineList) else None
        if not (isinstance(m, list) and len(m) == 3):
            raise ConfigurationError(f"'{sec.path}.meals[{j}]': expected [time, size, grams]", line, sec.source)
        try:
            meals.append(Meal(float(m[0]), m[1], float(m[2])))
        except (ConstructionError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"'{sec.path}.meals[{j}]': {exc}", line, sec.source) from exc
    x0 = sec.raw("x0")
    width = sec.number("meal_width", MEAL_WIDTH, positive=True)
    factor = sec.number("meal_factor", MEAL_FACTOR, positive=True)
    sec.check_unknown()
    bmm = _wrap(lambda: BmmParameters(**bmm_vals), sec, "bmm")
    cort = _wrap(lambda: CortisolProfile(stress_event_times=tuple(float(e) for e in ev), **cvals), sec, "cortisol")
    sens = _wrap(lambda: SensitivityRegression(eta, beta), sec, "sensitivity")
    return _wrap(lambda: VirtualPatient(pid, bmm, cort, sens, tuple(meals), x0, width, factor), sec, "meals")


def cohort_from_data(data, source=None):
    root = Section(data, "", source)
    items = root.seq("patients")
    root.check_unknown()
    out = []
    for j, item in enumerate(items):
        line = items.line_of(j) if isinstance(items, LineList) else None
        out.append(patient_from_section(Section(item, f"patients[{j}]", source, line)))
    if not out:
        raise ConfigurationError("'patients': must not be empty", root._line("patients"), source)
    return out


def load_cohort(path):
    return cohort_from_data(load_yaml(path), str(path))


def cohort_from_yaml(text, source="<string>"):
    return cohort_from_data(load_yaml_text(text, source), source)


def save_cohort(patients, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cohort_to_yaml(patients))
