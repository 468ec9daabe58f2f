import contextlib

import numpy as np
import pytest
from hypothesis import settings

from plisim.apmodel import generate_cohort

settings.register_profile("plisim", deadline=None, max_examples=40)
settings.load_profile("plisim")


@pytest.fixture(scope="session")
def cohort():
    return generate_cohort(0, count=12, days=3)


@pytest.fixture(scope="session")
def patient(cohort):
    return cohort[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class AcceptanceLog:
    """Collects per-criterion checks and prints one verdict line per criterion."""

    names = {
        1: "speedup headline", 2: "error-bound soundness", 3: "budget monotonicity",
        4: "zero-variance collapse", 5: "Koopman oracle equivalence", 6: "solver orders",
        7: "controller certificates", 8: "metric identities", 9: "optimality convergence",
        10: "cortisol model fidelity", 11: "end-to-end determinism",
    }

    def __init__(self):
        self.checks = {}

    def check(self, number, label, ok, detail=""):
        self.checks.setdefault(number, []).append((label, bool(ok), detail))
        return bool(ok)

    @contextlib.contextmanager
    def guard(self, number):
        """Record an unexpected exception as a failed check before re-raising it."""
        try:
            yield self
        except Exception as exc:
            self.check(number, "error", False, f"{type(exc).__name__}: {exc}"[:300])
            raise

    def lines(self):
        out = []
        for k, name in self.names.items():
            checks = self.checks.get(k)
            if not checks:
                out.append(f"criterion {k:2d} {name}: NOT RUN (deselected or fixture error)")
                continue
            verdict = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
            parts = [f"{label}{'' if ok else ' [failed]'}{': ' + detail if detail else ''}"
                     for label, ok, detail in checks]
            out.append(f"criterion {k:2d} {name}: {verdict} ({'; '.join(parts)})")
        return out


_ACCEPTANCE = AcceptanceLog()


@pytest.fixture(scope="session")
def acceptance():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE.checks:
        return
    terminalreporter.section("acceptance criteria")
    for line in _ACCEPTANCE.lines():
        terminalreporter.write_line(line)
