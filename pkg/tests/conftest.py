import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles/checks importable

from papnet.tensor import tune_allocator


@pytest.fixture(scope="session", autouse=True)
def _fast_allocator():
    tune_allocator()
