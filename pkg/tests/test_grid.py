import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from morphkit.grid import (DomainError, WindowShape, gather_taps, mse, scatter_taps, stable_lse, tap_mask,
                           taxicab, window_at)

finite = st.floats(-50, 50, allow_nan=False)


def test_window_interior_zeros():
    win = window_at(np.zeros((3, 3)), (1, 1), WindowShape(3, 3))
    assert len(win.taps) == 9
    assert all(t.in_bounds and t.value == 0 for t in win.taps)


def test_window_corner():
    win = window_at(np.zeros((3, 3)), (0, 0), WindowShape(3, 3))
    assert sum(t.in_bounds for t in win.taps) == 4
    assert sum(not t.in_bounds for t in win.taps) == 5
    assert all(t.value is None for t in win.taps if not t.in_bounds)


def test_window_full_row():
    win = window_at(np.arange(5.0).reshape(1, 5), (0, 2), WindowShape(1, 5))
    assert [t.value for t in win.taps] == [0, 1, 2, 3, 4]


def test_window_outside_raises():
    with pytest.raises(DomainError):
        window_at(np.zeros((3, 3)), (3, 0), WindowShape(3, 3))


def test_even_anchor_is_floor_half():
    assert WindowShape(4, 2).anchor == (2, 1)
    assert WindowShape(4, 2).offsets()[0] == (-2, -1)


@given(st.integers(1, 7), st.integers(1, 7), st.integers(1, 5), st.integers(1, 5), st.data())
def test_window_inbounds_count_is_intersection(rows, cols, kh, kw, data):
    r = data.draw(st.integers(0, rows - 1))
    c = data.draw(st.integers(0, cols - 1))
    shape = WindowShape(kh, kw)
    win = window_at(np.zeros((rows, cols)), (r, c), shape)
    ar, ac = shape.anchor
    overlap_r = min(rows, r - ar + kh) - max(0, r - ar)
    overlap_c = min(cols, c - ac + kw) - max(0, c - ac)
    assert len(win.taps) == shape.n
    assert sum(t.in_bounds for t in win.taps) == overlap_r * overlap_c


def test_gather_matches_window_at():
    rng = np.random.default_rng(3)
    img = rng.random((5, 6))
    shape = WindowShape(3, 2)
    taps = gather_taps(img, shape)
    mask = tap_mask(img.shape, shape)
    for r in range(5):
        for c in range(6):
            win = window_at(img, (r, c), shape)
            for i, t in enumerate(win.taps):
                assert mask[i, r, c] == t.in_bounds
                if t.in_bounds:
                    assert taps[i, r, c] == t.value


def test_scatter_is_adjoint_of_gather():
    rng = np.random.default_rng(4)
    shape = WindowShape(3, 3)
    x = rng.random((2, 4, 5))
    t = rng.random((2, 9, 4, 5)) * tap_mask((4, 5), shape)
    assert np.isclose(np.sum(gather_taps(x, shape) * t), np.sum(x * scatter_taps(t, shape)))


def test_mse_examples():
    a = np.random.default_rng(0).random((4, 4))
    assert mse(a, a) == 0
    assert mse([[1.0]], [[3.0]]) == 4
    assert mse(np.zeros((2, 2)), np.ones((2, 2))) == 1


def test_taxicab_examples():
    assert taxicab(np.eye(2), np.eye(2)) == 0
    assert taxicab([[1, 2], [3, 4]], [[0, 1], [1, 0]]) == 8


def test_distance_shape_mismatch():
    with pytest.raises(DomainError):
        mse(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(DomainError):
        taxicab(np.zeros(3), np.zeros(4))


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_distances_symmetric_and_zero_iff_equal(a, b):
    assert taxicab(a, b) == taxicab(b, a)
    assert mse(a, b) == mse(b, a)
    assert (taxicab(a, b) == 0) == np.array_equal(a, b)
    assert mse(a, b) >= 0
    if np.array_equal(a, b):
        assert mse(a, b) == 0


def test_stable_lse_examples():
    assert stable_lse([3.25]) == 3.25
    # mpmath, 30 digits: ln(1 + e + e^2)
    assert stable_lse([0, 1, 2]) == pytest.approx(2.40760596444438030, abs=1e-12)
    assert stable_lse([1000, 1000]) == pytest.approx(1000 + math.log(2), abs=1e-9)


def test_stable_lse_empty():
    with pytest.raises(DomainError):
        stable_lse([])


@settings(max_examples=200)
@given(st.lists(st.floats(-700, 700, allow_nan=False), min_size=1, max_size=30))
def test_stable_lse_bounds(v):
    out = stable_lse(v)
    assert max(v) <= out + 1e-12
    assert out <= max(v) + math.log(len(v)) + 1e-12
