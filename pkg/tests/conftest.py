import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from signrep import tensor as T


@pytest.fixture(autouse=True)
def clean_tape():
    T.reset_tape()
    T.set_default_dtype("float32")
    yield
    T.reset_tape()
    T.set_default_dtype("float32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
