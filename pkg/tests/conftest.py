import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# criterion number -> (status, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture(scope="session")
def oracle_cache(tmp_path_factory) -> str:
    """Directory for semi-analytic reference statistics shared across tests.

    ``GRADFLOW_CACHE`` points it at a persistent directory instead.
    """
    env = os.environ.get("GRADFLOW_CACHE")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return env
    return str(tmp_path_factory.mktemp("refstats"))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{status}] criterion {k:2d}: {detail}")
    n_pass = sum(s == "PASS" for s, _ in ACCEPTANCE.values())
    terminalreporter.write_line(f"{n_pass}/{len(ACCEPTANCE)} criteria pass")
