import json
import os
import warnings
from pathlib import Path

import numpy as np
import pytest

os.environ.setdefault("XLA_FLAGS", "--xla_cpu_multi_thread_eigen=false")

FROZEN_PATH = Path(__file__).parent / "oracles" / "frozen.json"

# PASS/FAIL lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def oracle():
    return json.loads(FROZEN_PATH.read_text())


@pytest.fixture(scope="session")
def goddard_reference(oracle):
    """Converged four-arc Goddard extremal, started near the frozen oracle."""
    from octoc.shooting import shoot_goddard

    ref = oracle["goddard_shooting"]
    guess = np.array(ref["p0"]) * 1.01
    t = np.array(ref["times"]) * 1.005
    return shoot_goddard(guess, *t)


@pytest.fixture(scope="session")
def goddard_direct():
    from octoc.direct import solve_direct
    from octoc.problems import make_goddard

    return solve_direct(make_goddard(), 100, "crank_nicolson")


@pytest.fixture(scope="session")
def zermelo_levelset_run():
    from octoc.benchmarks import zermelo_levelset

    return zermelo_levelset((500, 100))


@pytest.fixture(scope="session")
def goddard_hjb_run():
    from octoc.benchmarks import goddard_hjb

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return goddard_hjb(20)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
