"""Shared test setup.

BLAS thread pools are pinned to one thread *before* numpy loads anywhere in
the test process: reduction order inside multi-threaded gemm is
nondeterministic, and the determinism criteria compare byte-identical
artifacts across runs.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
