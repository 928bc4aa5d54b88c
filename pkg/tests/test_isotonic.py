import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regret_audit.isotonic import isotonic_project, pava


def brute_force_floor_isotonic(y, anchor):
    """Constrained least squares by enumeration.

    The optimum of ``min ||x - y||^2`` over non-decreasing ``x >= anchor`` is
    piecewise constant on contiguous blocks, each block sitting either at its
    own mean or at the anchor. Enumerate every partition and every block
    choice, keep the feasible ones, return the smallest error.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    best, best_err = None, np.inf
    for cuts in itertools.product([False, True], repeat=n - 1):
        bounds = [0] + [k + 1 for k, c in enumerate(cuts) if c] + [n]
        blocks = list(zip(bounds[:-1], bounds[1:]))
        for choice in itertools.product([False, True], repeat=len(blocks)):
            x = np.empty(n)
            for (a, b), at_anchor in zip(blocks, choice):
                x[a:b] = anchor if at_anchor else y[a:b].mean()
            if np.any(x < anchor) or np.any(np.diff(x) < 0):
                continue
            err = float(np.sum((x - y) ** 2))
            if err < best_err - 1e-15:
                best, best_err = x, err
    return best


def test_identity_on_sorted_input():
    np.testing.assert_array_equal(isotonic_project([1.0, 2.0, 3.0], 0.0), [1.0, 2.0, 3.0])


def test_pooling_example():
    np.testing.assert_allclose(isotonic_project([3.0, 1.0, 2.0], 0.0), [2.0, 2.0, 2.0], atol=1e-15)


def test_anchor_floor_example():
    np.testing.assert_array_equal(isotonic_project([1.0, 2.0, 3.0], 5.0), [5.0, 5.0, 5.0])
    np.testing.assert_array_equal(brute_force_floor_isotonic([1.0, 2.0, 3.0], 5.0), [5.0, 5.0, 5.0])


def test_pava_weighted():
    np.testing.assert_allclose(pava([2.0, 0.0], [3.0, 1.0]), [1.5, 1.5])


def test_empty():
    assert pava([]).size == 0


@pytest.mark.parametrize("n", range(1, 6))
def test_exhaustive_against_enumeration(n):
    for seq in itertools.product(range(4), repeat=n):
        for anchor in (-1.0, 0.0, 1.5, 2.0, 3.5):
            got = isotonic_project(seq, anchor)
            np.testing.assert_allclose(got, brute_force_floor_isotonic(seq, anchor), atol=1e-12, rtol=0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.floats(-1e3, 1e3))
def test_output_monotone_and_floored(values, anchor):
    out = isotonic_project(values, anchor)
    assert np.all(np.diff(out) >= -1e-9)
    assert np.all(out >= anchor)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30))
def test_pava_preserves_total(values):
    assert pava(values).sum() == pytest.approx(np.sum(values), rel=1e-9, abs=1e-6)
