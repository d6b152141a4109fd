import os
import sys
from pathlib import Path

# single-threaded BLAS so repeated runs reduce in the same order
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    from finegrain.tensor import Rng
    return Rng(1234)


def pytest_configure(config):
    np.seterr(over="raise", invalid="raise", divide="raise")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
