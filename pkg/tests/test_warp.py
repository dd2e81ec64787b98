import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphreg.grid import (
    DisplacementField,
    GridGeometry,
    GridImage,
    GeometryError,
    argmax_labels,
    identity_displacement,
    onehot_from_labels,
)
from morphreg.warp import warp_backward, warp_image, warp_segmentation

from util import assert_grad_close, central_fd


def _field(geom, vectors):
    return DisplacementField(geom, np.asarray(vectors, dtype=float))


def _shift_x(geom, amount):
    vecs = np.zeros(geom.dims + (geom.ndim,))
    vecs[..., -1] = amount
    return DisplacementField(geom, vecs)


def test_zero_field_is_identity_bit_exact():
    rng = np.random.default_rng(0)
    for dims in [(5, 7), (3, 4, 5)]:
        g = GridGeometry(dims)
        img = GridImage(g, rng.random(dims))
        out = warp_image(img, identity_displacement(g))
        assert np.array_equal(out.values, img.values)


def test_ramp_half_voxel_shift():
    g = GridGeometry((2, 4))
    ramp = GridImage(g, np.array([[0.0, 1.0, 2.0, 3.0]] * 2))
    out = warp_image(ramp, _shift_x(g, 0.5))
    assert np.allclose(out.values, [[0.5, 1.5, 2.5, 3.0]] * 2)


def test_integer_shift_clamps_at_boundary():
    g = GridGeometry((2, 4))
    ramp = GridImage(g, np.array([[0.0, 1.0, 2.0, 3.0]] * 2))
    out = warp_image(ramp, _shift_x(g, 1.0))
    assert np.allclose(out.values, [[1.0, 2.0, 3.0, 3.0]] * 2)


def test_geometry_mismatch_rejected():
    img = GridImage(GridGeometry((4, 4)), np.zeros((4, 4)))
    u = identity_displacement(GridGeometry((4, 5)))
    with pytest.raises(GeometryError):
        warp_image(img, u)


def test_warped_values_stay_in_input_range():
    rng = np.random.default_rng(1)
    g = GridGeometry((6, 6))
    img = GridImage(g, rng.random((6, 6)))
    u = _field(g, rng.uniform(-10, 10, (6, 6, 2)))
    out = warp_image(img, u)
    assert out.values.min() >= img.values.min() - 1e-12
    assert out.values.max() <= img.values.max() + 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_partition_of_unity(seed):
    rng = np.random.default_rng(seed)
    g = GridGeometry((5, 5))
    const = GridImage(g, np.full((5, 5), 0.37))
    u = _field(g, rng.uniform(-6, 6, (5, 5, 2)))
    assert np.allclose(warp_image(const, u).values, 0.37, atol=1e-12)


def test_locality():
    g = GridGeometry((7, 7))
    base = np.zeros((7, 7))
    img_a = GridImage(g, base)
    bumped = base.copy()
    bumped[3, 3] = 1.0
    img_b = GridImage(g, bumped)
    rng = np.random.default_rng(2)
    u = _field(g, rng.uniform(-0.4, 0.4, (7, 7, 2)))
    diff = warp_image(img_b, u).values - warp_image(img_a, u).values
    changed = np.argwhere(diff != 0)
    # p' = p + u with |u| < 0.5 keeps the neighbor set within one voxel
    assert np.all(np.abs(changed - [3, 3]).max(axis=1) <= 1)


def test_backward_zero_upstream_gives_zero():
    rng = np.random.default_rng(3)
    g = GridGeometry((4, 4))
    img = GridImage(g, rng.random((4, 4)))
    u = _field(g, rng.uniform(-1, 1, (4, 4, 2)))
    gm, gu = warp_backward(img, u, np.zeros((4, 4)))
    assert np.all(gm == 0) and np.all(gu == 0)


@pytest.mark.parametrize("dims", [(5, 5), (7, 7), (5, 5, 5)])
def test_backward_matches_finite_differences(dims):
    rng = np.random.default_rng(sum(dims))
    g = GridGeometry(dims)
    n = len(dims)
    img = GridImage(g, rng.random(dims))
    # keep coordinates away from integer ties
    vecs = rng.uniform(0.1, 0.9, dims + (n,)) * rng.choice([-1, 1], dims + (n,))
    u = _field(g, vecs)
    up = rng.standard_normal(dims)

    gm, gu = warp_backward(img, u, up)
    fd_u = central_fd(
        lambda v: float(np.sum(up * warp_image(img, _field(g, v)).values)), vecs
    )
    assert_grad_close(gu, fd_u, tol=1e-4)
    fd_m = central_fd(
        lambda v: float(np.sum(up * warp_image(GridImage(g, v), u).values)),
        img.values,
    )
    assert_grad_close(gm, fd_m, tol=1e-4)


def test_backward_clamped_axis_gets_zero_field_gradient():
    g = GridGeometry((2, 4))
    img = GridImage(g, np.array([[0.0, 1.0, 2.0, 3.0]] * 2))
    u = _shift_x(g, 5.0)  # every x sample clamps
    _, gu = warp_backward(img, u, np.ones((2, 4)))
    assert np.all(gu[..., 1] == 0.0)


def test_warp_segmentation_identity():
    g = GridGeometry((3, 4))
    labels = GridImage(g, np.array([[0, 1, 1, 0], [1, 0, 0, 1], [0, 0, 1, 1]], dtype=float))
    seg = onehot_from_labels(labels, 2)
    out = warp_segmentation(seg, identity_displacement(g))
    assert np.array_equal(out.weights, seg.weights)


def test_warp_segmentation_half_shift_soft_rows():
    # hand interpolation on a 2x4 grid: [1,0],[0,1],[0,1],[1,0] rows shifted 0.5
    g = GridGeometry((2, 4))
    labels = GridImage(g, np.array([[0.0, 1.0, 1.0, 0.0]] * 2))
    seg = onehot_from_labels(labels, 2)
    out = warp_segmentation(seg, _shift_x(g, 0.5))
    expected_c1 = np.array([[0.5, 1.0, 0.5, 0.0]] * 2)
    assert np.allclose(out.weights[..., 1], expected_c1)
    sums = out.weights.sum(axis=-1)
    assert np.all(sums <= 1.0 + 1e-6)
    assert np.all(sums >= -1e-12)


def test_warp_segmentation_integer_shift_matches_hard_shift():
    rng = np.random.default_rng(4)
    g = GridGeometry((5, 6))
    codes = rng.integers(0, 3, (5, 6)).astype(float)
    seg = onehot_from_labels(GridImage(g, codes), 3)
    out = argmax_labels(warp_segmentation(seg, _shift_x(g, 1.0)))
    shifted = np.concatenate([codes[:, 1:], codes[:, -1:]], axis=1)
    assert np.array_equal(out.values, shifted)
