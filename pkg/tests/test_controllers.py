import itertools
import math

import numpy as np
import pytest
import scipy.linalg
import scipy.optimize
from hypothesis import given, strategies as st

from plisim.apmodel import DAY, Meal, SensitivityRegression, VirtualPatient, bmm_system
from plisim.controllers import (ApSettings, BayesianLqgController, LqgConfig, MealMarkovModel, MpcConfig,
                                MpcController, OpenLoop, PidConfig, PidController, discretize, lqr_continuous,
                                lqr_discrete, make_controller, meal_predict, meal_schedule_events, mpc_cost,
                                mpc_matrices, mpc_solve, riccati_residual)
from plisim.errors import ConfigurationError
from plisim.ltv import InputSignal
from plisim.oracle import WmnEventSchedule, oracle_simulate
from plisim.solvers import SolverConfig


def _flat(patient, meals=()):
    return VirtualPatient(patient.id, patient.bmm, patient.cortisol, SensitivityRegression(0.0, 1.0), meals)


def test_discretize_matches_augmented_exponential():
    A = np.array([[-0.1, 0.0], [0.2, -0.3]])
    B = np.array([[1.0], [0.0]])
    Ad, Bd = discretize(A, B, 5.0)
    np.testing.assert_allclose(Ad, scipy.linalg.expm(5.0 * A), rtol=1e-13)
    ref = np.linalg.solve(A, (Ad - np.eye(2)) @ B)
    np.testing.assert_allclose(Bd, ref, rtol=1e-10)


class TestPid:
    def _ctrl(self, patient, **gains):
        c = PidController(patient, config=PidConfig(**gains))
        c.reset(patient.x0, (0.0, DAY))
        return c

    def test_at_setpoint_gives_basal(self, patient):
        c = self._ctrl(patient)
        for _ in range(20):
            assert c.step(120.0, 5.0) == pytest.approx(patient.bmm.i_b)

    def test_proportional_first_tick(self, patient):
        c = self._ctrl(patient, kp=0.05, ki=0.0, kd=0.0)
        assert c.step(170.0, 5.0) == pytest.approx(patient.bmm.i_b + 50 * 0.05)

    def test_output_clamped_and_integral_frozen(self, patient):
        c = self._ctrl(patient, kp=10.0, ki=1.0, kd=0.0)
        for _ in range(10):
            u = c.step(300.0, 5.0)
        assert u == c.settings.u_max
        assert c._integral == 0.0
        assert c.step(40.0, 5.0) == 0.0

    def test_step_disturbance_raises_command_until_glucose_turns(self, patient):
        p = _flat(patient, (Meal(60.0, "large", 90.0),))
        ctrl = PidController(p)
        tr = oracle_simulate(bmm_system(p, 600), ctrl, None, p.x0, (0.0, 600.0), SolverConfig())
        ticks = np.arange(0, 600, 5)
        G = tr.states[ticks, 2]
        u = tr.inputs[ticks, 0]
        turn = int(np.argmax(G))
        start = int(np.searchsorted(ticks, 60.0)) + 1
        assert turn > start
        assert np.all(np.diff(u[start:turn + 1]) >= -1e-12)

    def test_gains_event(self, patient):
        c = self._ctrl(patient)
        c.apply({"gains": {"kp": 0.2}}, 10.0)
        assert c.config.kp == 0.2 and c.config.ki == PidConfig().ki
        with pytest.raises(ConfigurationError):
            c.apply({"gains": {"kq": 1.0}}, 10.0)
        with pytest.raises(ConfigurationError):
            c.apply({"weights": {"Q": 1.0}}, 10.0)


class TestMpc:
    def _model(self, patient):
        c = MpcController(patient)
        return c, *discretize(c.nominal_model.A_j, c.nominal_model.B_j, 5.0)

    def test_equilibrium_gives_basal(self, patient):
        c, Ad, Bd = self._model(patient)
        mats = mpc_matrices(Ad, Bd, c.Np, c.Nc, patient.bmm.egp, 1.0, 0.1)
        x = patient.bmm.equilibrium(patient.p3_base)
        U = mpc_solve(mats, x, 120.0, patient.bmm.i_b)
        np.testing.assert_allclose(U, patient.bmm.i_b, rtol=1e-9)

    def test_default_horizons_in_ticks(self, patient):
        c = MpcController(patient)
        assert (c.Np, c.Nc) == (12, 6)

    def test_one_step_horizon_closed_form(self, patient):
        c, Ad, Bd = self._model(patient)
        x = patient.bmm.equilibrium(patient.p3_base) * np.array([1.0, 1.0, 1.3])
        Q, R, sp, basal, d = 2.0, 0.5, 110.0, patient.bmm.i_b, patient.bmm.egp
        mats = mpc_matrices(Ad, Bd, 1, 1, d, Q, R)
        U = mpc_solve(mats, x, sp, basal)
        g0 = (Ad @ x + Bd[:, 1] * d)[2]
        b = Bd[2, 0]
        # minimise Q (g0 + b u - sp)^2 + R (u - basal)^2
        u_star = (Q * b * (sp - g0) + R * basal) / (Q * b * b + R)
        assert U[0] == pytest.approx(u_star, rel=1e-10)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_numerical_optimum_of_forward_cost(self, patient, seed):
        r = np.random.default_rng(seed)
        c, Ad, Bd = self._model(patient)
        Np = int(r.integers(1, 6))
        Nc = int(r.integers(1, Np + 1))
        Q, R = float(r.uniform(0.1, 5)), float(r.uniform(0.01, 2))
        x = patient.bmm.equilibrium(patient.p3_base) * r.uniform(0.7, 1.5, size=3)
        sp, basal, d = 120.0, patient.bmm.i_b, patient.bmm.egp
        U = mpc_solve(mpc_matrices(Ad, Bd, Np, Nc, d, Q, R), x, sp, basal)
        cost = lambda V: mpc_cost(V, x, Ad, Bd, Np, Nc, d, Q, R, sp, basal)  # noqa: E731
        best = scipy.optimize.minimize(cost, np.full(Nc, basal), method="BFGS", options={"gtol": 1e-12})
        # a grid refinement around the optimum must not beat the analytic plan either
        for offs in itertools.product((-1e-3, 0.0, 1e-3), repeat=Nc):
            assert cost(U + np.array(offs)) >= cost(U) - 1e-9
        assert cost(U) <= best.fun + 1e-6 * max(1.0, abs(best.fun))
        assert abs(cost(U) - best.fun) <= 1e-6 * max(1.0, abs(best.fun))

    def test_cheap_control_saturates_upward(self, patient):
        c = MpcController(patient, config=MpcConfig(15.0, 5.0, 1.0, 1e-9))
        c.reset(patient.x0, (0.0, DAY))
        x = patient.bmm.equilibrium(patient.p3_base) * np.array([1.0, 1.0, 2.0])
        assert c.update(0.0, x, None)[0] == c.settings.u_max

    def test_model_cache_per_frozen_object(self, patient):
        c = MpcController(patient)
        c.reset(patient.x0, (0.0, DAY))
        for t in range(0, 50, 5):
            c.update(float(t), patient.x0, None)
        assert c.diagnostics["model_builds"] == 1

    def test_weights_event_invalidates_cache(self, patient):
        c = MpcController(patient)
        c.reset(patient.x0, (0.0, DAY))
        c.update(0.0, patient.x0, None)
        c.apply({"weights": {"R": 5.0}}, 5.0)
        c.update(5.0, patient.x0, None)
        assert c.diagnostics["model_builds"] == 2


class TestRiccati:
    def test_scalar_continuous_root(self):
        K, P = lqr_continuous([[-1.0]], [[1.0]], [[1.0]], [[1.0]])
        assert P[0, 0] == pytest.approx(math.sqrt(2) - 1, abs=1e-12)
        assert K[0, 0] == pytest.approx(0.41421, abs=1e-5)
        assert riccati_residual([[-1.0]], [[1.0]], [[1.0]], [[1.0]], P, discrete=False) <= 1e-12

    @given(st.integers(0, 10_000))
    def test_discrete_residual_on_random_systems(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(1, 5))
        A = r.normal(size=(n, n))
        B = r.normal(size=(n, 1))
        Q = np.eye(n)
        R = np.array([[float(r.uniform(0.1, 2))]])
        K, P = lqr_discrete(A, B, Q, R)
        assert riccati_residual(A, B, Q, R, P) <= 1e-8 * max(1.0, np.linalg.norm(P))
        # closed loop is stable
        assert np.max(np.abs(np.linalg.eigvals(A - B @ K))) < 1.0

    def test_bmm_discrete_residual(self, patient):
        c = BayesianLqgController(patient)
        Ad, Bd = discretize(c.nominal_model.A_j, c.nominal_model.B_j, 5.0)
        Q = np.diag([0.0, 0.0, 1.0])
        K, P = lqr_discrete(Ad, Bd[:, :1], Q, [[0.1]])
        assert riccati_residual(Ad, Bd[:, :1], Q, [[0.1]], P) <= 1e-8


class TestMealPrediction:
    def test_dominant_diagonal(self):
        m = MealMarkovModel(1.0).fit(["small"] * 6)
        assert meal_predict(m, ["small"] * 6)[0] == "small"

    def test_tie_goes_to_large(self):
        assert meal_predict(MealMarkovModel(1.0), ["medium"])[0] == "large"

    def test_counts_arithmetic(self):
        counts = np.zeros((3, 3))
        counts[0] = [2, 5, 3]
        size, row = meal_predict(MealMarkovModel(0.0, counts), ["small"])
        np.testing.assert_allclose(row, [0.2, 0.5, 0.3])
        assert size == "medium"

    @given(st.lists(st.sampled_from(["small", "medium", "large"]), min_size=1, max_size=30), st.floats(0.0, 3.0))
    def test_rows_are_distributions(self, hist, alpha):
        T = MealMarkovModel(alpha).fit(hist).transition()
        np.testing.assert_allclose(T.sum(axis=1), 1.0)
        assert np.all(T >= 0)


class TestBayesianLqg:
    def test_noise_free_filter_tracks_true_state(self, patient):
        p = _flat(patient, (Meal(100.0, "medium", 60.0), Meal(400.0, "large", 90.0)))
        ctrl = BayesianLqgController(p, config=LqgConfig(process_noise=0.0, measurement_noise=0.0))
        span = (0.0, 600.0)
        sched = WmnEventSchedule(tuple(meal_schedule_events(p, span)))
        tr = oracle_simulate(bmm_system(p, 600), ctrl, sched, p.x0, span,
                             SolverConfig(rel_tol=1e-10, abs_tol=1e-12))
        est = np.array(tr.meta["diagnostics"]["estimates"])
        ticks = np.arange(0, 600, 5)
        np.testing.assert_allclose(est, tr.states[ticks], rtol=1e-7)

    def test_estimate_at_setpoint_gives_basal(self, patient):
        c = BayesianLqgController(_flat(patient))
        x = c.patient.bmm.equilibrium(c.patient.p3_base)
        c.reset(x, (0.0, DAY))
        assert c.update(0.0, x, None)[0] == pytest.approx(c.basal, rel=1e-9)

    def test_meal_event_sets_setpoint_from_excursion(self, patient):
        c = BayesianLqgController(patient)
        c.reset(patient.x0, (0.0, DAY))
        c.apply({"meal": {"size": "small", "grams": 30.0}}, 450.0)
        dg = c.excursion("large")  # uniform prior after one observation ties toward large
        assert dg > 0
        assert c.setpoint == pytest.approx(max(90.0, 180.0 - dg))

    def test_excursion_grows_with_meal_size(self, patient):
        c = BayesianLqgController(patient)
        ex = [c.excursion(s) for s in ("small", "medium", "large")]
        assert ex[0] < ex[1] < ex[2]


class TestEvents:
    def test_unknown_key_rejected(self, patient):
        with pytest.raises(ConfigurationError):
            MpcController(patient).validate({"colour": "red"})

    @pytest.mark.parametrize("rec", [{"setpoint": 200.0}, {"setpoint": True}, {"meal": {"size": "huge"}},
                                     {"meal": {"size": "small", "grams": -1}}])
    def test_invalid_values_rejected(self, patient, rec):
        with pytest.raises(ConfigurationError):
            PidController(patient).validate(rec)

    def test_note_is_always_allowed(self, patient):
        PidController(patient).validate({"note": "exercise"})

    def test_make_controller(self, patient):
        assert isinstance(make_controller("mpc", patient), MpcController)
        with pytest.raises(ConfigurationError):
            make_controller("fuzzy", patient)

    def test_open_loop_ticks_once(self):
        sig = InputSignal([0.0, 5.0], [[1.0], [2.0]], 10.0)
        c = OpenLoop(sig)
        np.testing.assert_array_equal(c.tick_times((0.0, 10.0)), [0.0])
        assert c.disturbance_edges(0.0, 10.0) == [5.0]

    def test_settings_validation(self):
        with pytest.raises(ValueError):
            ApSettings(setpoint=200.0)
