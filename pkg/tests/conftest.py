import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from isscohort.survival import CohortDataset  # noqa: E402


def random_cohort(n, p=1, seed=0, event_rate=0.6, ties=False, beta=None):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, p))
    lp = z @ (np.full(p, 0.5) if beta is None else np.asarray(beta))
    t = rng.exponential(np.exp(-lp))
    if ties:
        t = np.ceil(t * 4) / 4
    c = rng.exponential(1 / event_rate * np.mean(t), n)
    time = np.minimum(t, c) + 1e-3
    event = (t <= c).astype(int)
    return CohortDataset.from_arrays(time, event, z, None, [f"z{j + 1}" for j in range(p)])


@pytest.fixture
def cohort_factory():
    return random_cohort


ACCEPTANCE_LINES: dict = {}


def record_acceptance(number, passed, detail):
    """Store the one-line verdict for an acceptance criterion."""
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
