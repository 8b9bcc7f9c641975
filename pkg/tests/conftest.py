import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from fibernf.hamiltonian import builtin, builtin_library  # noqa: E402
from fibernf.homogeneous import homogeneous_pipeline  # noqa: E402
from fibernf.normalform import normal_form_pipeline  # noqa: E402

settings.register_profile(
    "fibernf",
    max_examples=40,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("fibernf")

_STASH = pytest.StashKey[list]()


class _PipelineCache:
    """Session cache of pipeline runs keyed by builtin name."""

    def __init__(self):
        self._runs = {}

    def __call__(self, name, **params):
        key = (name, tuple(sorted(params.items())))
        if key not in self._runs:
            entry = builtin_library()[name]
            H = builtin(name, **params)
            x0 = entry.start.to_array()
            if entry.degree is not None and not entry.convex:
                self._runs[key] = homogeneous_pipeline(H, x0, entry.delta, entry.degree)
            else:
                self._runs[key] = normal_form_pipeline(H, x0, entry.delta)
        return self._runs[key]


@pytest.fixture(scope="session")
def pipeline():
    """Callable returning the cached pipeline result of a builtin field."""
    return _PipelineCache()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def record_criterion(request):
    """Record one pass/fail line for the acceptance summary."""
    lines = request.config.stash.setdefault(_STASH, [])

    def record(number, title, passed, detail=""):
        status = "PASS" if passed else "FAIL"
        lines.append(f"[{status}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_STASH, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
        terminalreporter.write_line(line)
