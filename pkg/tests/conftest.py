import numpy as np
import pytest

from kzpeps.model import classical_ground, default_schedule, generate_disorder
from kzpeps.oracle import StateVector, exact_evolve
from kzpeps.peps import evolve, product_plus_x


@pytest.fixture(scope="session")
def inst2():
    return generate_disorder(2, 1)


@pytest.fixture(scope="session")
def ground2(inst2):
    return classical_ground(inst2)


@pytest.fixture(scope="session")
def evolved2(inst2):
    """Short anneal on the 2x2x2 lattice with its exact counterpart.

    Returns ``(peps, statevector)``.
    """
    sched = default_schedule()
    st, _ = evolve(product_plus_x(inst2.lattice), sched, inst2, 1.0, 0.01, 4, 0.6)
    sv = exact_evolve(StateVector.plus_x(8), sched, inst2, 1.0, 0.01, 0.6)
    return st, sv


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Record one ``(criterion, passed, detail)`` line for the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def report(n, passed, detail):
        line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append((n, line))
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
