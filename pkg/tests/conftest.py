from __future__ import annotations

import pytest

from permafault.campaign import run_golden
from permafault.workloads import SUITE


@pytest.fixture(scope="session")
def goldens():
    """Fault-free, oracle-checked runs of every shipped workload."""
    return {w.name: run_golden(w) for w in SUITE}
