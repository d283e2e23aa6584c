import numpy as np
import pytest

from hyperimts.data import Observation, SplitSample


def random_split(rng: np.random.Generator, U: int = 4, n_times: int = 6, p_obs: float = 0.5, n_queries: int = 3):
    """A random split sample with at least one lookback point and ``n_queries`` distinct queries."""
    times = np.sort(rng.choice(np.arange(1, 10 * n_times), size=n_times, replace=False)).astype(float)
    look = [Observation(float(t), int(u), float(rng.normal())) for t in times for u in range(U) if rng.random() < p_obs]
    if not look:
        look = [Observation(float(times[0]), 0, float(rng.normal()))]
    t_end = float(times[-1])
    cells = [(t_end + 1 + k, u) for k in range(3) for u in range(U)]
    pick = rng.choice(len(cells), size=min(n_queries, len(cells)), replace=False)
    queries = tuple(cells[i] for i in sorted(pick))
    return SplitSample(
        lookback=tuple(look),
        queries=queries,
        targets=tuple(rng.normal(size=len(queries)).tolist()),
        t_split=t_end,
        U=U,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
