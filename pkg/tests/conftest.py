import numpy as np
import pytest

from fishmask.model import ModelSpec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_mlp():
    return ModelSpec((4, 5, 3), "tanh")


def away_from_kinks(spec, params, X, margin=1e-3):
    """True when no relu preactivation sits within ``margin`` of zero."""
    from fishmask.model import forward_cache

    cache = forward_cache(spec, params, X)
    return all(np.min(np.abs(z)) > margin for z in cache.preacts)


# Lines recorded by the acceptance suite, echoed after the run so they are
# visible even when pytest captures output.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
