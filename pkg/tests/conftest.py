import sys
from pathlib import Path

import pytest
from threadpoolctl import threadpool_limits

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True, scope="session")
def single_threaded_blas():
    # The workloads here are dominated by small/skinny BLAS calls, where
    # thread-pool synchronization costs far exceed the arithmetic. One
    # thread per process is also what the benchmark runner uses.
    with threadpool_limits(limits=1):
        yield
