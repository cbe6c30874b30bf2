import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trojanlab.numcore import Rng


def test_uniform_matches_numpy_double_transform():
    # numpy's Generator.random uses the same 53-bit mapping of PCG64 output
    ours = Rng(42).uniform(1000)
    ref = np.random.Generator(np.random.PCG64(42)).random(1000)
    np.testing.assert_array_equal(ours, ref)


def test_frozen_values():
    np.testing.assert_array_equal(Rng(42).uniform(3), [0.7739560485559633, 0.4388784397520523, 0.8585979199113825])
    np.testing.assert_array_equal(Rng(42).normal(3), [1.0875171856576933, -0.34905600789477786, -1.3384162346977395])
    np.testing.assert_array_equal(Rng(42).integers(10, size=5), [0, 5, 2, 7, 1])
    np.testing.assert_array_equal(Rng(7).permutation(6), [5, 1, 4, 2, 0, 3])
    assert Rng(42).child("a", 1).seed == 12510534540909327856


def test_same_seed_same_stream():
    a, b = Rng(9), Rng(9)
    np.testing.assert_array_equal(a.normal((4, 5)), b.normal((4, 5)))
    assert a.integers(1000) == b.integers(1000)


def test_children_differ_by_label():
    r = Rng(3)
    assert r.child("x").seed != r.child("y").seed
    assert r.child("x", 1).seed != r.child("x", 2).seed
    assert r.child("x").seed == Rng(3).child("x").seed


def test_child_does_not_advance_parent():
    a, b = Rng(5), Rng(5)
    a.child("anything")
    assert a.uniform() == b.uniform()


def test_normal_moments():
    z = Rng(1).normal(200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01
    w = Rng(1).normal(10, mean=3.0, std=0.0)
    np.testing.assert_array_equal(w, 3.0)


def test_integers_chi_square():
    k = 7
    draws = Rng(2).integers(k, size=70_000)
    counts = np.bincount(draws, minlength=k)
    chi2 = ((counts - 10_000) ** 2 / 10_000).sum()
    assert chi2 < 22.5  # 99.9th percentile of chi-square with 6 dof


def test_invalid_arguments():
    with pytest.raises(ValueError):
        Rng(-1)
    with pytest.raises(ValueError):
        Rng(0).integers(0)
    with pytest.raises(ValueError):
        Rng(0).choice(3, 4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(1, 40))
def test_permutation_is_a_permutation(seed, n):
    p = Rng(seed).permutation(n)
    assert sorted(p.tolist()) == list(range(n))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 30), st.data())
def test_choice_distinct_and_in_range(seed, n, data):
    k = data.draw(st.integers(0, n))
    c = Rng(seed).choice(n, k)
    assert len(c) == k == len(set(c.tolist()))
    assert all(0 <= v < n for v in c)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.floats(-5, 5), st.floats(0.1, 5))
def test_uniform_in_half_open_range(seed, low, width):
    u = Rng(seed).uniform(100, low, low + width)
    assert np.all(u >= low) and np.all(u < low + width)
