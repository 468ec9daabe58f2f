import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from plisim.apmodel import DAY, SensitivityRegression, VirtualPatient, bmm_system
from plisim.controllers import OpenLoop, PidController, discretize
from plisim.errors import ConstructionError, FitError
from plisim.koopman import KoopmanModel, delay_layout, dmd_fit, koopman_simulate, snapshots_from_trace
from plisim.ltv import InputSignal, relative_rmse
from plisim.oracle import oracle_simulate


def _simulate_discrete(Ad, Bd, x0, U):
    X = [np.asarray(x0, dtype=float)]
    for u in U[:-1]:
        X.append(Ad @ X[-1] + Bd @ u)
    return np.array(X)


class TestFit:
    def test_scalar_geometric_data(self):
        X = 0.9 ** np.arange(60)[:, None]
        model = dmd_fit([(X, np.zeros((60, 1)))], n_k=1)
        assert model.A_k[0, 0] == pytest.approx(0.9, abs=1e-10)
        assert model.fit_error < 1e-12
        assert model.truncated == 1

    def test_rotation_eigenvalues(self):
        th = 0.3
        R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        X = _simulate_discrete(R, np.zeros((2, 1)), [1.0, 0.5], np.zeros((50, 1)))
        model = dmd_fit([(X, np.zeros((50, 1)))], n_k=2)
        ev = np.sort_complex(np.linalg.eigvals(model.A_k))
        np.testing.assert_allclose(ev, np.sort_complex(np.exp([-1j * th, 1j * th])), atol=1e-8)

    def test_identity_lift_recovers_bmm_discretisation(self, patient, rng):
        p = VirtualPatient("F", patient.bmm, patient.cortisol, SensitivityRegression(0.0, 1.0))
        sys = bmm_system(p, DAY)
        Ad, Bd = discretize(sys.a_at(0.0), sys.b_at(0.0), 1.0)
        U = np.column_stack([rng.uniform(0, 20, 400), rng.uniform(0, 10, 400)])
        X = _simulate_discrete(Ad, Bd, p.x0, U)
        model = dmd_fit([(X, U)], n_k=3)
        np.testing.assert_allclose(model.A_k, scipy.linalg.expm(sys.a_at(0.0)), atol=1e-6)
        np.testing.assert_allclose(model.B_k, Bd, atol=1e-6)

    def test_too_few_pairs(self):
        with pytest.raises(FitError, match="10\\*n_k"):
            dmd_fit([(np.ones((20, 3)), np.ones((20, 1)))], n_k=13)

    def test_non_finite_snapshots(self):
        X = np.ones((200, 1))
        X[5] = np.nan
        with pytest.raises(FitError):
            dmd_fit([(X, np.zeros((200, 1)))], n_k=1)

    @given(st.integers(3, 20))
    def test_delay_layout(self, n_k):
        lay = delay_layout(3, n_k)
        assert len(lay) == n_k - 3
        assert lay[:3] == ((2, 1), (1, 1), (0, 1))[:len(lay)]


class TestSimulate:
    def test_scalar_power(self):
        model = KoopmanModel(1, 1, 1, np.array([[0.9]]), np.zeros((1, 1)), 1.0, 0.0)
        tr = koopman_simulate(model, OpenLoop(InputSignal.constant([0.0], 10.0)), None, [[1.0]], (0.0, 10.0))
        assert tr.states[-1, 0] == pytest.approx(0.9 ** 10, rel=1e-14)
        assert tr.states[-1, 0] == pytest.approx(0.3487, abs=1e-4)

    def test_identity_lift_reproduces_discrete_simulation(self, patient, rng):
        p = VirtualPatient("F", patient.bmm, patient.cortisol, SensitivityRegression(0.0, 1.0))
        sys = bmm_system(p, DAY)
        Ad, Bd = discretize(sys.a_at(0.0), sys.b_at(0.0), 1.0)
        U = np.column_stack([rng.uniform(0, 20, 400), rng.uniform(0, 10, 400)])
        model = dmd_fit([(_simulate_discrete(Ad, Bd, p.x0, U), U)], n_k=3)
        sig = InputSignal(np.arange(0.0, 100.0, 10.0), U[:10], 100.0)
        tr = koopman_simulate(model, OpenLoop(sig), None, [p.x0], (0.0, 100.0))
        ref = _simulate_discrete(Ad, Bd, p.x0, np.repeat(U[:11], 10, axis=0)[:101])
        assert np.max(relative_rmse(tr.states, ref)) < 1e-6

    def test_null_dynamics_vanish_after_delay_window(self):
        model = KoopmanModel(2, 1, 4, np.zeros((4, 4)), np.zeros((4, 1)), 1.0, 0.0, delay_layout(2, 4))
        tr = koopman_simulate(model, OpenLoop(InputSignal.constant([1.0], 10.0)), None, [[3.0, 4.0]], (0.0, 10.0))
        assert np.all(tr.states[model.max_lag + 1:] == 0.0)

    def test_off_grid_breakpoint_rejected(self):
        model = KoopmanModel(1, 1, 1, np.array([[0.5]]), np.zeros((1, 1)), 2.0, 0.0)
        sig = InputSignal([0.0, 3.0], [[0.0], [1.0]], 10.0)
        with pytest.raises(ConstructionError, match="step grid"):
            koopman_simulate(model, OpenLoop(sig), None, [[1.0]], (0.0, 10.0), q_sim=1.0)

    def test_closed_loop_surrogate_tracks_oracle(self, patient):
        span = (0.0, 2 * DAY)
        sys = bmm_system(patient, 3 * DAY)
        train = oracle_simulate(sys, PidController(patient), None, patient.x0, (0.0, 3 * DAY))
        model = dmd_fit([snapshots_from_trace(train, 1.0)], 13, 1.0, delay_order=(2, 1, 0))
        tr = koopman_simulate(model, PidController(patient), None, [patient.x0], span)
        ref = oracle_simulate(sys, PidController(patient), None, patient.x0, span)
        assert np.all(np.isfinite(tr.states))
        assert np.max(relative_rmse(tr.states, ref.states)) < 0.2


def test_text_round_trip(tmp_path, rng):
    model = KoopmanModel(3, 2, 5, rng.normal(size=(5, 5)), rng.normal(size=(5, 2)), 1.0, 0.01, delay_layout(3, 5), 1)
    path = tmp_path / "m.txt"
    model.save(path)
    back = KoopmanModel.load(path)
    np.testing.assert_array_equal(back.A_k, model.A_k)
    np.testing.assert_array_equal(back.B_k, model.B_k)
    assert (back.delays, back.step, back.fit_error, back.truncated) == (model.delays, 1.0, 0.01, 1)


def test_continuous_generator_of_discretised_system():
    A = np.array([[-0.1, 0.0], [0.05, -0.2]])
    model = KoopmanModel(2, 1, 2, scipy.linalg.expm(A * 2.0), np.zeros((2, 1)), 2.0, 0.0)
    np.testing.assert_allclose(model.continuous_generator().real, A, atol=1e-10)
