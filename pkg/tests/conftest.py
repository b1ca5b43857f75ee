import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scrffi.signal_sim import ChannelProfile, DatasetSpec, EmitterProfile, ReceiverProfile

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def two_emitters():
    return (EmitterProfile(0, (0.12, -0.03), 1.05, 0.05, 0.002),
            EmitterProfile(1, (-0.1, 0.04), 0.95, -0.06, -0.003))


@pytest.fixture
def small_spec():
    return DatasetSpec((5, 4), two_emitters(), ReceiverProfile(0, (0.05, 0.02), 0.02 + 0.01j,
                                                               0.1, 1.0, (10, 20)),
                       ChannelProfile((1 + 0j, 0.2 - 0.1j)), length=64, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def report(request):
    """Record one acceptance line for the terminal summary, then assert it."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def _report(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines[n] = line
        assert ok, line
    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
