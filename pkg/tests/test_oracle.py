import numpy as np
import pytest
import scipy.linalg

from plisim.apmodel import bmm_system, open_loop_input
from plisim.controllers import OpenLoop, PidController, meal_schedule_events
from plisim.errors import ConfigurationError
from plisim.ltv import InputSignal, TimeVaryingLinearSystem, trace_distance
from plisim.oracle import WmnEventSchedule, oracle_simulate
from plisim.solvers import OdeProblem, SolverConfig, rk45_adaptive

A = np.array([[-0.05, 0.02], [0.0, -0.1]])
B = np.array([[0.0], [1.0]])


def _lti():
    return TimeVaryingLinearSystem.constant(A, B)


def test_time_invariant_open_loop_matches_matrix_exponential():
    u = np.array([0.7])
    ctrl = OpenLoop(InputSignal.constant(u, 100.0))
    tr = oracle_simulate(_lti(), ctrl, None, [1.0, 2.0], (0.0, 100.0), SolverConfig(rel_tol=1e-9, abs_tol=1e-12))
    x0 = np.array([1.0, 2.0])
    xss = -np.linalg.solve(A, B @ u)
    exact = np.array([xss + scipy.linalg.expm(A * t) @ (x0 - xss) for t in tr.times])
    assert trace_distance(tr, type(tr)(tr.times, exact)) < 1e-6


def test_empty_schedule_is_one_trajectory():
    ctrl = OpenLoop(InputSignal.constant([0.0], 50.0))
    tr = oracle_simulate(_lti(), ctrl, WmnEventSchedule(), [1.0, 0.0], (0.0, 50.0))
    assert len(tr.trajectories()) == 1


def test_inert_event_does_not_change_trace(patient):
    span = (0.0, 600.0)
    sys = bmm_system(patient, 600)
    base = oracle_simulate(sys, PidController(patient), None, patient.x0, span)
    noted = oracle_simulate(sys, PidController(patient), WmnEventSchedule(((300.0, {"note": "ping"}),)),
                            patient.x0, span)
    assert len(noted.trajectories()) == 2
    assert trace_distance(noted, base) < 1e-6


def test_open_loop_matches_plain_adaptive_solver(patient):
    span = (0.0, 1440.0)
    sys = bmm_system(patient, 1440)
    sig = open_loop_input(patient, span)
    cfg = SolverConfig(rel_tol=1e-8, abs_tol=1e-10)
    a = oracle_simulate(sys, OpenLoop(sig), None, patient.x0, span, cfg)
    b = rk45_adaptive(OdeProblem.from_system(sys, sig, patient.x0, span), cfg)
    assert trace_distance(a, b) < 1e-6


def test_setpoint_event_is_applied(patient):
    span = (0.0, 600.0)
    sys = bmm_system(patient, 600)
    sched = WmnEventSchedule(((100.0, {"setpoint": 100.0}),))
    tr = oracle_simulate(sys, PidController(patient), sched, patient.x0, span)
    assert tr.states[-1, 2] < 110.0


def test_schedule_must_be_ascending():
    with pytest.raises(ConfigurationError):
        WmnEventSchedule(((5.0, None), (1.0, None)))


def test_event_outside_horizon_rejected(patient):
    sched = WmnEventSchedule(((900.0, {"note": "late"}),))
    with pytest.raises(ConfigurationError, match="outside"):
        oracle_simulate(bmm_system(patient, 600), PidController(patient), sched, patient.x0, (0.0, 600.0))


def test_invalid_event_rejected_before_integration(patient):
    sched = WmnEventSchedule(((100.0, {"speed": 3}),))
    with pytest.raises(ConfigurationError):
        oracle_simulate(bmm_system(patient, 600), PidController(patient), sched, patient.x0, (0.0, 600.0))


def test_controller_sees_a_fresh_model_every_tick(patient):
    from plisim.controllers import MpcController
    span = (0.0, 300.0)
    tr = oracle_simulate(bmm_system(patient, 300), MpcController(patient), None, patient.x0, span)
    assert tr.meta["diagnostics"]["model_builds"] == 60
    assert tr.meta["nfev"] > 0 and tr.wall_clock_seconds > 0


def test_meal_events_feed_controllers(patient):
    span = (0.0, 1440.0)
    evs = meal_schedule_events(patient, span)
    assert [t for t, _ in evs] == [m.time for m in patient.meal_schedule if m.time < 1440.0]
