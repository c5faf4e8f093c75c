import time

import pytest

from qussteal import harness


@pytest.fixture(scope="session")
def desk_victim():
    """The default desk-scale victim, trained once per session, with its wall-clock fit time."""
    spec = harness.ExperimentSpec.default("ablation_tf")
    t0 = time.perf_counter()
    victim = harness.victim_for(spec)
    return victim, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_bench(desk_victim):
    """Default two-machine benchmark (victim shared with ``desk_victim``)."""
    return harness.build_benchmark(harness.ExperimentSpec.default("ablation_tf"))
