import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from selectproto.data import GenConfig, generate_synthetic, split_classes  # noqa: E402


@pytest.fixture(scope="session")
def small_ds():
    """30-class synthetic set, 20 informative + 20 irrelevant features, split 18/6/6."""
    ds = generate_synthetic(GenConfig(num_classes=30, samples_per_class=40, irrelevant_dims=20, seed=3))
    return split_classes(ds, (0.6, 0.2, 0.2), 3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def record(number: int, ok: bool, detail: str) -> bool:
        request.config.stash[ACCEPTANCE].append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record
