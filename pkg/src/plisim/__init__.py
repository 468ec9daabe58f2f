"""Piecewise-LTI simulation with error-bounded invariant time steps.

The package bundles the time-varying plant representation, a fixed-step and
an adaptive reference integrator, the invariant-step planner and simulator,
a delay-DMD surrogate, an artificial-pancreas case study and the experiment
harness that compares them.
"""
from ._backend import BACKEND
from .apmodel import BmmParameters, CortisolProfile, VirtualPatient, bmm_system, generate_cohort
from .errors import (ConfigurationError, ConstructionError, DivergenceError, FitError, PlisimError)
from .koopman import KoopmanModel, dmd_fit, koopman_simulate
from .ltv import FrozenSystem, InputSignal, TimeVaryingLinearSystem, Trace, trace_distance, zero_order_hold
from .metrics import glycemic, optimality, speedup
from .oracle import WmnEventSchedule, oracle_simulate
from .plis import ClosedLoop, ErrorBudget, InvariantStepPlan, PlanOptions, compute_invariant_step, plis_simulate
from .solvers import SolverConfig, euler_fixed, rk45_adaptive

__all__ = [
    "BACKEND", "BmmParameters", "CortisolProfile", "VirtualPatient", "bmm_system", "generate_cohort",
    "ConfigurationError", "ConstructionError", "DivergenceError", "FitError", "PlisimError",
    "KoopmanModel", "dmd_fit", "koopman_simulate",
    "FrozenSystem", "InputSignal", "TimeVaryingLinearSystem", "Trace", "trace_distance", "zero_order_hold",
    "glycemic", "optimality", "speedup", "WmnEventSchedule", "oracle_simulate",
    "ClosedLoop", "ErrorBudget", "InvariantStepPlan", "PlanOptions", "compute_invariant_step", "plis_simulate",
    "SolverConfig", "euler_fixed", "rk45_adaptive",
]

__version__ = "0.1.0"
