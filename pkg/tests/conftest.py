import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(__file__))


def assert_within_ulp(actual, expected, n_ulp=1, scale=None):
    """Assert |actual - expected| <= n_ulp spacing units.

    Spacing is evaluated at ``scale`` when given, otherwise at the larger of
    the two operands.  Identities of the form ``a + (x - a) == x`` round at
    the scale of the decomposition operands, so callers pass that scale.
    """
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    assert actual.shape == expected.shape
    if scale is None:
        scale = np.maximum(np.abs(actual), np.abs(expected))
    tol = n_ulp * np.spacing(np.asarray(scale, dtype=np.float64))
    diff = np.abs(actual - expected)
    assert np.all(diff <= tol), f"max diff {diff.max()} exceeds {n_ulp} ulp"
