"""Compiled versus pure-Python kernel timings.

Times the two inner loops (fixed-step Euler on a frozen LTI system and the
discrete LTI recursion) with each available backend, checks that both give
bitwise-identical output, and optionally times one closed-loop PLIS run per
backend in a fresh interpreter.

Usage::

    python benchmarks/bench_kernels.py [--steps 20000] [--reps 7] [--end-to-end]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from plisim import _backend

E2E_SNIPPET = """
from plisim import BACKEND
from plisim.apmodel import generate_cohort, bmm_system
from plisim.controllers import MpcController, meal_schedule_events
from plisim.oracle import WmnEventSchedule
from plisim.plis import ClosedLoop, ErrorBudget, PlanOptions, compute_invariant_step, plis_simulate
p = generate_cohort(0, 1, days=3)[0]
span = (0.0, 2880.0)
sys_ = bmm_system(p, span[1])
sched = WmnEventSchedule(tuple(meal_schedule_events(p, span)))
plan = compute_invariant_step(sys_, ClosedLoop(MpcController(p), sched), span, ErrorBudget(0.03, 0.05),
                              PlanOptions(q_sim={q}), x0=p.x0)
best = min(plis_simulate(sys_, MpcController(p), sched, p.x0, span, plan, {q}).wall_clock_seconds
           for _ in range(3))
print(BACKEND, best)
"""


def _problem(n, seed=0):
    rng = np.random.default_rng(seed)
    A = -np.eye(n) + 0.1 * rng.normal(size=(n, n))
    B = rng.normal(size=(n, 2))
    return A, B, rng.normal(size=2), rng.normal(size=n)


def bench_kernels(steps, reps, sizes=(3, 6, 13)):
    impls = _backend.implementations()
    rows = []
    for n in sizes:
        A, B, u, x0 = _problem(n)
        Ad = np.eye(n) + 0.01 * A
        c = 0.01 * B @ u
        outs = {}
        for name, mod in impls.items():
            t_e = min(timeit.repeat(lambda: _backend.euler_lti(A, B, u, x0, 0.01, steps, impl=mod),
                                    number=1, repeat=reps))
            t_d = min(timeit.repeat(lambda: _backend.discrete_lti(Ad, c, x0, steps, impl=mod),
                                    number=1, repeat=reps))
            outs[name] = (_backend.euler_lti(A, B, u, x0, 0.01, steps, impl=mod)[0],
                          _backend.discrete_lti(Ad, c, x0, steps, impl=mod)[0])
            rows.append((n, name, t_e, t_d))
        if len(outs) == 2:
            same = all(np.array_equal(a, b) for a, b in zip(outs["python"], outs["cython"]))
            rows.append((n, "bitwise-equal", same, same))
    return rows


def bench_end_to_end(q_sim):
    out = []
    for forced in (False, True):
        env = dict(os.environ)
        env.pop("PLISIM_PURE_PYTHON", None)
        if forced:
            env["PLISIM_PURE_PYTHON"] = "1"
        res = subprocess.run([sys.executable, "-c", E2E_SNIPPET.format(q=q_sim)], env=env, check=True,
                             capture_output=True, text=True)
        name, secs = res.stdout.split()
        out.append((name, float(secs)))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--reps", type=int, default=7)
    ap.add_argument("--end-to-end", action="store_true", help="also time a two-day closed-loop PLIS run")
    ap.add_argument("--q-sim", type=float, default=1.0, help="step for the end-to-end run, minutes")
    args = ap.parse_args(argv)
    print(f"default backend: {_backend.BACKEND}")
    print(f"{'n':>3} {'backend':>14} {'euler [ms]':>12} {'discrete [ms]':>14} {'euler gain':>10}")
    base = {}
    for n, name, te, td in bench_kernels(args.steps, args.reps):
        if name == "bitwise-equal":
            print(f"{n:>3} {'bitwise equal':>14} {str(te):>12}")
            continue
        if name == "python":
            base[n] = te
        ratio = base[n] / te if n in base else float("nan")
        print(f"{n:>3} {name:>14} {1e3 * te:>12.3f} {1e3 * td:>14.3f} {ratio:>9.1f}x")
    if args.end_to_end:
        for name, secs in bench_end_to_end(args.q_sim):
            print(f"end-to-end PLIS, two days, q_sim={args.q_sim:g}: {name:>7} {secs:.4f} s")


if __name__ == "__main__":
    main()
