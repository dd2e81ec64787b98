import numpy as np
import pytest

from morphreg import net as N
from morphreg import tape as T
from morphreg.grid import GridGeometry, GridImage

from util import assert_grad_close, central_fd


def _small_config():
    return N.NetConfig(encoder_filters=(3,), decoder_filters=(3, 2))


def _pair(dims, seed=0):
    rng = np.random.default_rng(seed)
    g = GridGeometry(dims)
    return GridImage(g, rng.random(dims)), GridImage(g, rng.random(dims))


def test_config_validation():
    with pytest.raises(ValueError):
        N.NetConfig(kernel_size=4)
    with pytest.raises(ValueError):
        N.NetConfig(stride=3)
    with pytest.raises(ValueError):
        N.NetConfig(encoder_filters=())
    with pytest.raises(ValueError):
        N.NetConfig(encoder_filters=(8, 8), decoder_filters=(8,))
    with pytest.raises(ValueError):
        N.NetConfig(feature_multiplier=0)


def test_layer_plan_channel_bookkeeping():
    cfg = N.NetConfig(encoder_filters=(16, 32, 32), decoder_filters=(32, 32, 32, 16))
    plan = N.layer_plan(cfg, 2)
    assert [p.role for p in plan] == [
        "encoder", "encoder", "encoder",
        "decoder", "decoder", "decoder",
        "refine", "flow",
    ]
    assert plan[0].in_ch == 2  # fixed + moving channels
    # decoder convs see the previous output plus the matching skip after concat
    assert plan[3].in_ch == 32          # deepest encoder output
    assert plan[4].in_ch == 32 + 32     # dec[0] + skip at level 2
    assert plan[5].in_ch == 32 + 16     # dec[1] + skip at level 1
    assert plan[6].in_ch == 32 + 2      # dec[2] + raw input skip
    assert plan[7].out_ch == 2


def test_feature_multiplier_doubles_widths():
    cfg = N.NetConfig(encoder_filters=(4,), decoder_filters=(4, 4), feature_multiplier=2)
    plan = N.layer_plan(cfg, 2)
    assert plan[0].out_ch == 8


def test_geometry_compatibility_check():
    cfg = N.NetConfig(encoder_filters=(8, 8), decoder_filters=(8, 8))
    N.check_geometry_compatible(cfg, GridGeometry((8, 12)))
    with pytest.raises(ValueError):
        N.check_geometry_compatible(cfg, GridGeometry((8, 10)))


def test_output_shape_and_near_identity_init():
    cfg = _small_config()
    fixed, moving = _pair((8, 8))
    params = N.init_params(cfg, 2, np.random.default_rng(0))
    u = N.predict_displacement(params, fixed, moving)
    assert u.vectors.shape == (8, 8, 2)
    # damped flow kernel keeps the initial field near zero
    assert np.max(np.abs(u.vectors)) < 0.1


def test_output_shape_3d():
    cfg = _small_config()
    fixed, moving = _pair((4, 4, 4))
    params = N.init_params(cfg, 3, np.random.default_rng(1))
    u = N.predict_displacement(params, fixed, moving)
    assert u.vectors.shape == (4, 4, 4, 3)


def test_forward_is_deterministic():
    cfg = _small_config()
    fixed, moving = _pair((8, 8))
    params = N.init_params(cfg, 2, np.random.default_rng(2))
    a = N.predict_displacement(params, fixed, moving)
    b = N.predict_displacement(params, fixed, moving)
    assert np.array_equal(a.vectors, b.vectors)


def test_swapping_inputs_changes_output():
    # the field is predicted for the ordered pair, not a symmetric function
    cfg = _small_config()
    fixed, moving = _pair((8, 8), seed=3)
    params = N.init_params(cfg, 2, np.random.default_rng(3))
    ab = N.predict_displacement(params, fixed, moving)
    ba = N.predict_displacement(params, moving, fixed)
    assert not np.allclose(ab.vectors, ba.vectors)


def test_translation_equivariance_of_interior():
    # convs + nearest upsampling commute with shifts by the encoder stride,
    # up to padding effects near the boundary
    cfg = _small_config()
    g = GridGeometry((24, 24))
    rng = np.random.default_rng(4)
    base_f = rng.random((24, 24))
    base_m = rng.random((24, 24))
    params = N.init_params(cfg, 2, rng)
    u0 = N.predict_displacement(params, GridImage(g, base_f), GridImage(g, base_m))
    shift = 2  # one stride-2 period
    u1 = N.predict_displacement(
        params,
        GridImage(g, np.roll(base_f, shift, axis=0)),
        GridImage(g, np.roll(base_m, shift, axis=0)),
    )
    # keep a margin wider than the receptive field radius on every side
    interior = (slice(10, 14), slice(10, 14))
    assert np.allclose(
        np.roll(u0.vectors, shift, axis=0)[interior], u1.vectors[interior], atol=1e-10
    )


def test_full_parameter_gradient_matches_fd():
    cfg = _small_config()
    fixed, moving = _pair((4, 4), seed=5)
    params = N.init_params(cfg, 2, np.random.default_rng(5))
    arrays = params.arrays()
    rng = np.random.default_rng(6)
    up = rng.standard_normal((4, 4, 2))

    def objective(arrs):
        tp = T.Tape()
        nodes = [tp.leaf(a) for a in arrs]
        out = N.build_forward(tp, nodes, fixed, moving, cfg)
        return float(np.sum(up * out.value))

    tp = T.Tape()
    nodes = [tp.leaf(a) for a in arrays]
    out = N.build_forward(tp, nodes, fixed, moving, cfg)
    proj = tp.record(np.float64(np.sum(up * out.value)), (out,), lambda u: (u * up,))
    tp.backward(proj)

    for i, node in enumerate(nodes):
        def f(v, i=i):
            swapped = list(arrays)
            swapped[i] = v
            return objective(swapped)

        fd = central_fd(f, arrays[i], step=1e-5)
        assert_grad_close(node.grad, fd, tol=5e-4)


def test_params_shape_validation():
    cfg = _small_config()
    params = N.init_params(cfg, 2, np.random.default_rng(7))
    bad_kernels = [k.copy() for k in params.kernels]
    bad_kernels[0] = bad_kernels[0][..., :1]
    with pytest.raises(ValueError):
        N.NetParams(cfg, 2, bad_kernels, params.biases)


def test_save_load_round_trip(tmp_path):
    # slope must be float32-exact to survive the on-disk encoding
    cfg = N.NetConfig(encoder_filters=(4, 6), decoder_filters=(6, 4, 4), leaky_slope=0.25)
    params = N.init_params(cfg, 3, np.random.default_rng(8))
    path = tmp_path / "model.bin"
    N.save_params(path, params)
    loaded = N.load_params(path)
    assert loaded.config == cfg
    assert loaded.ndim == 3
    for a, b in zip(params.arrays(), loaded.arrays()):
        assert a.shape == b.shape
        # storage is float32, so round-tripping quantizes
        assert np.array_equal(b, a.astype("<f4").astype(np.float64))


def test_round_trip_preserves_predictions(tmp_path):
    cfg = _small_config()
    fixed, moving = _pair((8, 8), seed=9)
    params = N.init_params(cfg, 2, np.random.default_rng(9))
    path = tmp_path / "model.bin"
    N.save_params(path, params)
    loaded = N.load_params(path)
    a = N.predict_displacement(params, fixed, moving)
    b = N.predict_displacement(loaded, fixed, moving)
    assert np.allclose(a.vectors, b.vectors, atol=1e-5)


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"XXXX" + b"\0" * 64)
    with pytest.raises(ValueError, match="magic"):
        N.load_params(path)


def test_load_rejects_trailing_bytes(tmp_path):
    cfg = _small_config()
    params = N.init_params(cfg, 2, np.random.default_rng(10))
    path = tmp_path / "model.bin"
    N.save_params(path, params)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        N.load_params(path)
