"""Pins BLAS/OpenMP to one thread before numpy loads.

Reduction order inside threaded BLAS kernels is nondeterministic; the
reproducibility tests (bitwise training logs, checkpoint resume) need
single-threaded math. Must run before anything imports numpy, which is
why it lives at the top of conftest.
"""

import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(7)
