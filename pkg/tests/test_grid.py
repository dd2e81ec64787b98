import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from morphreg.grid import (
    DisplacementField,
    GridGeometry,
    GridImage,
    SegmentationMap,
    argmax_labels,
    check_same_geometry,
    coords_of,
    flat_index,
    GeometryError,
    identity_displacement,
    onehot_from_labels,
)


def test_geometry_rejects_bad_dims():
    with pytest.raises(ValueError):
        GridGeometry((4,))
    with pytest.raises(ValueError):
        GridGeometry((4, 1))
    with pytest.raises(ValueError):
        GridGeometry((2, 2, 2, 2))


def test_voxel_count():
    assert GridGeometry((3, 5)).voxel_count == 15
    assert GridGeometry((2, 3, 4)).voxel_count == 24


def test_image_rejects_nan_and_shape_mismatch():
    g = GridGeometry((2, 2))
    with pytest.raises(ValueError):
        GridImage(g, np.array([[0.0, np.nan], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        GridImage(g, np.zeros((3, 2)))


def test_values_are_immutable():
    g = GridGeometry((2, 2))
    img = GridImage(g, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        img.values[0, 0] = 1.0


def test_identity_displacement_is_zero():
    for dims in [(4, 4), (2, 2, 2)]:
        u = identity_displacement(GridGeometry(dims))
        assert u.vectors.shape == dims + (len(dims),)
        assert np.all(u.vectors == 0.0)


def test_onehot_basic():
    g = GridGeometry((2, 2))
    labels = GridImage(g, np.array([[0.0, 1.0], [1.0, 0.0]]))
    seg = onehot_from_labels(labels, 2)
    expected = np.array([[[1, 0], [0, 1]], [[0, 1], [1, 0]]], dtype=float)
    assert np.array_equal(seg.weights, expected)


def test_onehot_single_label_all_ones():
    g = GridGeometry((3, 3))
    seg = onehot_from_labels(GridImage(g, np.zeros((3, 3))), 1)
    assert np.all(seg.weights == 1.0)


def test_onehot_out_of_range_reports_voxel():
    g = GridGeometry((2, 2))
    labels = GridImage(g, np.array([[0.0, 1.0], [3.0, 0.0]]))
    with pytest.raises(ValueError, match="voxel 2"):
        onehot_from_labels(labels, 3)


def test_onehot_argmax_round_trip():
    rng = np.random.default_rng(0)
    g = GridGeometry((4, 5))
    codes = rng.integers(0, 4, (4, 5)).astype(float)
    labels = GridImage(g, codes)
    assert np.array_equal(argmax_labels(onehot_from_labels(labels, 4)).values, codes)


@given(
    st.lists(st.integers(min_value=2, max_value=8), min_size=2, max_size=3).map(tuple)
)
def test_flat_index_bijection(dims):
    geom = GridGeometry(dims)
    for i in range(geom.voxel_count):
        assert flat_index(geom, coords_of(geom, i)) == i


def test_flat_index_last_axis_fastest():
    geom = GridGeometry((3, 4))
    assert flat_index(geom, (0, 1)) == 1
    assert flat_index(geom, (1, 0)) == 4


def test_flat_index_exhaustive_3d():
    geom = GridGeometry((8, 8, 8))
    for coords in itertools.product(range(8), repeat=3):
        assert coords_of(geom, flat_index(geom, coords)) == coords


def test_check_same_geometry():
    a = GridImage(GridGeometry((2, 2)), np.zeros((2, 2)))
    b = GridImage(GridGeometry((2, 3)), np.zeros((2, 3)))
    with pytest.raises(GeometryError):
        check_same_geometry(a, b)


def test_segmentation_weight_range_enforced():
    g = GridGeometry((2, 2))
    with pytest.raises(ValueError):
        SegmentationMap(g, np.full((2, 2, 2), 1.5))


def test_displacement_requires_component_axis():
    g = GridGeometry((2, 2))
    with pytest.raises(ValueError):
        DisplacementField(g, np.zeros((2, 2, 3)))
