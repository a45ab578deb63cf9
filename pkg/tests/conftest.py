import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hetgcn import autodiff as ad  # noqa: E402


@pytest.fixture(autouse=True)
def _float64():
    ad.set_default_dtype("float64")
    yield
    ad.set_default_dtype("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
