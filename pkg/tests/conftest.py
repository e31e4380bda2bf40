import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from el_opeval import build_dataset  # noqa: E402

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
    print_blob=True,
)
settings.load_profile("default")


@pytest.fixture
def canonical():
    """Two observations on [0, 2]: w = (0.5, 1.5), r = (1, 0)."""
    return build_dataset([[0.5], [1.5]], [1.0, 0.0], [(0.0, 2.0)])


@pytest.fixture
def canonical_pair():
    """Small two-policy dataset on [0, 2]^2 with distinct policies."""
    W = [[0.5, 1.5], [1.5, 0.5], [1.0, 1.0], [0.0, 2.0], [2.0, 0.0]]
    r = [1.0, 0.0, 1.0, 1.0, 0.0]
    return build_dataset(W, r, [(0.0, 2.0), (0.0, 2.0)])


@pytest.fixture(scope="session")
def bernoulli500():
    rng = np.random.default_rng(500)
    r = (rng.random(500) < 0.5).astype(float)
    return build_dataset(np.ones((500, 1)), r, [(1.0, 1.0)])


@st.composite
def micro_datasets(draw, ell=None, n_max=5):
    """Tiny datasets (n <= 5) with weights on a two-decimal lattice."""
    ell = draw(st.integers(1, 2)) if ell is None else ell
    n = draw(st.integers(2, n_max))
    hi = draw(st.sampled_from([2.0, 3.0, 5.0]))
    cells = st.integers(0, int(hi * 100)).map(lambda k: k / 100.0)
    W = np.array([[draw(cells) for _ in range(ell)] for _ in range(n)])
    r = np.array([draw(st.sampled_from([0.0, 0.5, 1.0, 0.3])) for _ in range(n)])
    return W, r, [(0.0, hi)] * ell


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance verdicts, one line per criterion, after the run."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
