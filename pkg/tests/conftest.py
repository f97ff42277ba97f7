import json
from pathlib import Path

import numpy as np
import pytest

from funcproc.grid import make_grid
from funcproc.process import CLModel, exponential_kernel

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def derived():
    """Frozen reference values produced by tests/oracles/generate_derived.py."""
    return json.loads((DATA / "derived_values.json").read_text())


def complex_array(entry, key):
    return np.array(entry[f"{key}_re"]) + 1j * np.array(entry[f"{key}_im"])


@pytest.fixture
def grid16():
    return make_grid(0.0, 2.0, 16)


@pytest.fixture
def memory_model16(grid16):
    return CLModel(1.0, 1.0, exponential_kernel(grid16, 0.1, 1.0))
