import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_ws():
    """A four-speaker toy workspace with a narrow, shallow model."""
    from tsaux.experiment import ExperimentConfig, prepare
    return prepare(ExperimentConfig(num_speakers=4, utts_per_speaker=6, heldout_utts_per_speaker=2,
                                    hidden=16, depth=3))


# one summary line per acceptance criterion, filled in by test_acceptance
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
