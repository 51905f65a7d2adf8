import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deform3d.bridge import LevelLayout, TokenSequence, flatten_levels, reference_points, rescale, unflatten
from deform3d.errors import DimensionError

dims3 = st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5))
layouts = st.lists(dims3, min_size=1, max_size=3).map(lambda d: LevelLayout(tuple(d)))


def test_single_voxel_level(rng):
    v = rng.normal(size=(5, 1, 1, 1))
    seq = flatten_levels([v])
    assert seq.tokens.shape == (1, 5)
    assert np.array_equal(seq.tokens[0], v[:, 0, 0, 0])


def test_sequence_length_is_sum_of_levels():
    seq = flatten_levels([np.zeros((3, 2, 4, 4)), np.zeros((3, 1, 2, 2))])
    assert seq.layout.total == 36
    assert seq.layout.offsets == (0, 32)


def test_token_order_is_row_major():
    v = np.arange(2 * 2 * 3 * 4, dtype=float).reshape(2, 2, 3, 4)
    seq = flatten_levels([v])
    # token index (d*H + h)*W + w
    assert np.array_equal(seq.tokens[(1 * 3 + 2) * 4 + 3], v[:, 1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(layouts, st.integers(1, 4))
def test_flatten_unflatten_roundtrip(lay, c):
    rng = np.random.default_rng(0)
    vols = [rng.normal(size=(c,) + d) for d in lay.dims]
    back = unflatten(flatten_levels(vols))
    assert all(np.array_equal(a, b) for a, b in zip(vols, back))


def test_unflatten_inverse_cases(rng):
    v = rng.normal(size=(4, 1, 1, 1))
    assert np.array_equal(unflatten(flatten_levels([v]))[0], v)
    seq = TokenSequence(rng.normal(size=(36, 2)), LevelLayout(((2, 4, 4), (1, 2, 2))))
    shapes = [u.shape for u in unflatten(seq)]
    assert shapes == [(2, 2, 4, 4), (2, 1, 2, 2)]


def test_mismatched_channels():
    with pytest.raises(DimensionError):
        flatten_levels([np.zeros((3, 1, 1, 1)), np.zeros((2, 1, 1, 1))])


def test_sequence_length_checked():
    with pytest.raises(DimensionError):
        TokenSequence(np.zeros((5, 2)), LevelLayout(((1, 2, 2),)))


def test_reference_point_conventions():
    assert np.array_equal(reference_points(LevelLayout(((2, 4, 4),)))[0], [0.25, 0.125, 0.125])
    assert np.array_equal(reference_points(LevelLayout(((1, 1, 1),)))[0], [0.5, 0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(layouts)
def test_reference_points_in_unit_cube(lay):
    r = reference_points(lay)
    assert r.shape == (lay.total, 3)
    assert ((r > 0) & (r < 1)).all()


def test_rescale_examples():
    assert np.array_equal(rescale([0.5, 0.5, 0.5], (4, 8, 8)), [1.5, 3.5, 3.5])
    assert np.array_equal(rescale([0.0, 0.0, 0.0], (4, 8, 8)), [-0.5, -0.5, -0.5])


@settings(max_examples=50, deadline=None)
@given(layouts)
def test_reference_points_rescale_to_integer_indices(lay):
    refs = reference_points(lay)
    for o, n, d in zip(lay.offsets, lay.sizes, lay.dims):
        idx = rescale(refs[o : o + n], d)
        grid = np.stack(np.meshgrid(*(np.arange(s) for s in d), indexing="ij"), -1).reshape(-1, 3)
        assert np.array_equal(idx, grid)


def test_layout_text_roundtrip():
    lay = LevelLayout(((2, 3, 3), (1, 2, 2)))
    assert LevelLayout.parse(lay.to_text()) == lay
    assert LevelLayout.parse("2x3x3/1x2x2") == lay


def test_layout_rejects_bad_dims():
    with pytest.raises(DimensionError):
        LevelLayout(((0, 1, 1),))
    with pytest.raises(DimensionError):
        LevelLayout(())
