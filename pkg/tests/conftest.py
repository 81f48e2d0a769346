import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from iontrap.layout import example_layout

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow], derandomize=True)
settings.load_profile("default")

ORACLES = Path(__file__).parent / "oracles" / "oracles.json"


@pytest.fixture(scope="session")
def oracles():
    return json.loads(ORACLES.read_text())


@pytest.fixture(scope="session")
def ca_layout():
    return example_layout()


@pytest.fixture(scope="session")
def be_layout():
    return example_layout(v_rf=85.0, omega_rf=2 * np.pi * 240e6)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
