import math

import numpy as np
import pytest
import scipy.integrate
import scipy.linalg
from hypothesis import given, strategies as st

from plisim.errors import ConstructionError, DivergenceError
from plisim.ltv import InputSignal, TimeVaryingLinearSystem
from plisim.solvers import DormandPrince, OdeProblem, SolverConfig, euler_fixed, rk45_adaptive


def _decay(span=(0.0, 1.0), x0=1.0):
    return OdeProblem(lambda t, x, u: -x, InputSignal.constant([0.0], span[1], span[0]), [x0], span)


def _zero(span=(0.0, 10.0)):
    return OdeProblem(lambda t, x, u: np.zeros_like(x), InputSignal.constant([0.0], span[1]), [7.0], span)


class TestEuler:
    def test_zero_dynamics(self):
        tr = euler_fixed(_zero(), 1.0)
        np.testing.assert_array_equal(tr.states[:, 0], 7.0)

    def test_one_step_by_hand(self):
        tr = euler_fixed(_decay((0.0, 0.1)), 0.1)
        assert tr.states[-1, 0] == pytest.approx(0.9, abs=1e-15)

    def test_fine_grid_reaches_exponential(self):
        tr = euler_fixed(_decay(), 0.001)
        assert abs(tr.states[-1, 0] - math.exp(-1)) < 1e-3

    def test_first_order_convergence(self):
        errs = [abs(euler_fixed(_decay(), q).states[-1, 0] - math.exp(-1)) for q in (0.01, 0.005, 0.0025)]
        ratios = [errs[0] / errs[1], errs[1] / errs[2]]
        assert all(1.8 <= r <= 2.2 for r in ratios)

    def test_linear_system_path_equals_rhs_path(self):
        A = np.array([[-0.3, 0.1], [0.0, -0.2]])
        B = np.array([[1.0], [0.5]])
        sig = InputSignal([0.0, 2.5], [[1.0], [-2.0]], 6.0)
        sys = TimeVaryingLinearSystem.constant(A, B)
        a = euler_fixed(OdeProblem.from_system(sys, sig, [1.0, 2.0], (0.0, 6.0)), 0.5)
        b = euler_fixed(OdeProblem(lambda t, x, u: A @ x + B @ u, sig, [1.0, 2.0], (0.0, 6.0)), 0.5)
        np.testing.assert_allclose(a.states, b.states, rtol=1e-14)

    def test_span_shorter_than_step(self):
        with pytest.raises(ConstructionError):
            euler_fixed(_decay((0.0, 0.05)), 0.1)

    def test_divergence_raises(self):
        p = OdeProblem(lambda t, x, u: 1e200 * x * x, InputSignal.constant([0.0], 10.0), [1e200], (0.0, 10.0))
        with np.errstate(all="ignore"), pytest.raises(DivergenceError):
            euler_fixed(p, 1.0)


class TestRk45:
    def test_exponential_tight_tolerance(self):
        tr = rk45_adaptive(_decay(), SolverConfig(q_sim=0.1, rel_tol=1e-8, abs_tol=1e-12))
        assert abs(tr.states[-1, 0] - math.exp(-1)) < 1e-7

    def test_error_within_ten_rel_tol(self):
        for rtol in (1e-4, 1e-6, 1e-8):
            tr = rk45_adaptive(_decay(), SolverConfig(q_sim=0.1, rel_tol=rtol, abs_tol=rtol * 1e-3))
            assert abs(tr.states[-1, 0] - math.exp(-1)) <= 10 * rtol * math.exp(-1)

    def test_rotation_returns_after_one_period(self):
        A = np.array([[0.0, 1.0], [-1.0, 0.0]])
        p = OdeProblem(lambda t, x, u: A @ x, InputSignal.constant([0.0], 2 * math.pi), [1.0, 0.0], (0.0, 2 * math.pi))
        tr = rk45_adaptive(p, SolverConfig(q_sim=2 * math.pi / 100, rel_tol=1e-9, abs_tol=1e-12))
        np.testing.assert_allclose(tr.states[-1], [1.0, 0.0], atol=1e-6)

    def test_zero_dynamics_any_tolerance(self):
        for rtol in (1e-3, 1e-9):
            tr = rk45_adaptive(_zero(), SolverConfig(q_sim=1.0, rel_tol=rtol))
            np.testing.assert_array_equal(tr.states[:, 0], 7.0)

    def test_dense_output_matches_matrix_exponential(self):
        A = np.array([[-0.2, 1.0], [-1.0, -0.2]])
        p = OdeProblem(lambda t, x, u: A @ x, InputSignal.constant([0.0], 10.0), [1.0, 0.0], (0.0, 10.0))
        tr = rk45_adaptive(p, SolverConfig(q_sim=0.25, rel_tol=1e-9, abs_tol=1e-12))
        exact = np.array([scipy.linalg.expm(A * t) @ [1.0, 0.0] for t in tr.times])
        np.testing.assert_allclose(tr.states, exact, atol=1e-7)

    def test_restarts_at_input_breakpoints(self):
        sig = InputSignal([0.0, 3.3], [[0.0], [1.0]], 8.0)
        p = OdeProblem(lambda t, x, u: -x + u, sig, [0.0], (0.0, 8.0))
        tr = rk45_adaptive(p, SolverConfig(q_sim=0.1, rel_tol=1e-9, abs_tol=1e-12))
        t = tr.times
        exact = np.where(t < 3.3, 0.0, 1.0 - np.exp(-(t - 3.3)))
        np.testing.assert_allclose(tr.states[:, 0], exact, atol=1e-7)

    def test_agrees_with_scipy_reference(self):
        f = lambda t, x: np.array([x[1], -np.sin(x[0]) - 0.1 * x[1]])  # noqa: E731
        p = OdeProblem(lambda t, x, u: f(t, x), InputSignal.constant([0.0], 20.0), [1.0, 0.0], (0.0, 20.0))
        tr = rk45_adaptive(p, SolverConfig(q_sim=1.0, rel_tol=1e-10, abs_tol=1e-12))
        ref = scipy.integrate.solve_ivp(f, (0, 20), [1.0, 0.0], method="DOP853", rtol=1e-12, atol=1e-14,
                                        t_eval=tr.times)
        np.testing.assert_allclose(tr.states, ref.y.T, atol=1e-7)

    @given(st.floats(-2.0, -0.01), st.floats(0.1, 5.0))
    def test_scalar_decay_property(self, a, T):
        p = OdeProblem(lambda t, x, u: a * x, InputSignal.constant([0.0], T), [1.0], (0.0, T))
        tr = rk45_adaptive(p, SolverConfig(q_sim=T / 10, rel_tol=1e-8, abs_tol=1e-12))
        np.testing.assert_allclose(tr.states[:, 0], np.exp(a * tr.times), rtol=1e-6)

    def test_step_size_carried_between_segments(self):
        dp = DormandPrince(1e-8, 1e-12)
        dp.segment(lambda t, y: -y, 0.0, 1.0, np.array([1.0]), np.array([1.0]))
        assert dp.h is not None and dp.h > 0
        n = dp.nfev
        dp.segment(lambda t, y: -y, 1.0, 2.0, np.array([math.exp(-1)]), np.array([2.0]))
        assert dp.nfev > n


def test_solver_config_validation():
    with pytest.raises(ConstructionError):
        SolverConfig(q_sim=0.0)
    with pytest.raises(ConstructionError):
        SolverConfig(rel_tol=-1.0)
