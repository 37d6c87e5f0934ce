import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vidcap import tensor as T
from vidcap.alignment import (AlignmentSpec, LayerTransform, align, default_spec, init_alignment,
                              transform_layer)
from vidcap.encoder import TAPS, EncoderConfig, encode, init_encoder, pyramid_shapes
from vidcap.errors import ConfigError
from vidcap.gradcheck import grad_check
from vidcap.params import ParameterStore


def random_pyramid(shapes, rng):
    return {k: T.Tensor(rng.random(s)) for k, s in shapes.items()}


SHAPES = {"pool2": (8, 8, 4, 3), "pool3": (4, 4, 2, 5), "pool4": (2, 2, 1, 6)}


def setup(shapes=SHAPES, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    spec = default_spec(shapes)
    ps = ParameterStore()
    init_alignment(ps, spec, shapes, rng, scale=scale)
    return spec, ps, random_pyramid(shapes, rng)


def test_every_layer_lands_on_the_top_shape():
    spec, ps, pyr = setup()
    out = align(pyr, spec, ps)
    assert out.grid == (2, 2, 1)
    assert [m.shape for m in out.maps] == [(2, 2, 1, 6)] * 3
    assert out.stacked.shape == (4, 18)
    assert out.n_layers == 3 and out.n_filters == 6


def test_top_layer_passes_through_and_stacking_order():
    spec, ps, pyr = setup()
    out = align(pyr, spec, ps)
    top = pyr["pool4"].data.reshape(4, 6)
    np.testing.assert_array_equal(out.stacked.data[:, 12:18], top)
    lower = out.maps[0].data.reshape(4, 6)
    np.testing.assert_array_equal(out.stacked.data[:, 0:6], lower)
    # locations are the row-major flattening of (x, y, z)
    np.testing.assert_array_equal(out.location_vector(1)[12:], pyr["pool4"].data[0, 1, 0])


def test_transform_is_conv_relu_pool():
    spec, ps, pyr = setup()
    tf = spec.transform("pool3")
    U, b = ps["align.pool3.U"], ps["align.pool3.b"]
    conv = T.conv3d(pyr["pool3"], U, padding=tf.pad).data + b.data
    ref = np.maximum(conv, 0).reshape(2, 2, 2, 2, 1, 2, 6).max(axis=(1, 3, 5))
    np.testing.assert_array_equal(transform_layer(pyr["pool3"], tf, U, b).data, ref)


def test_scales_standardise_raw_taps():
    spec, ps, pyr = setup()
    rng = np.random.default_rng(2)
    scales = {k: (rng.standard_normal(v.shape[-1]), rng.uniform(0.5, 2, v.shape[-1])) for k, v in pyr.items()}
    a = align(pyr, spec, ps, scales=scales)
    scaled = {k: (v - scales[k][0]) * scales[k][1] for k, v in pyr.items()}
    b = align(scaled, spec, ps)
    np.testing.assert_allclose(a.stacked.data, b.stacked.data, rtol=0, atol=1e-15)


def test_gradients_through_alignment():
    spec, ps, pyr = setup({"pool3": (4, 4, 2, 2), "pool4": (2, 2, 1, 2)}, scale=1.0)
    w = np.random.default_rng(5).standard_normal((4, 4))
    rep = grad_check(lambda p: T.sum_(align(pyr, spec, p).stacked * w), ps)
    assert rep.passed, rep.lines()


def test_non_multiple_extent():
    with pytest.raises(ConfigError, match="axis x"):
        default_spec({"pool3": (6, 4, 2, 3), "pool5": (4, 2, 1, 3)})


def test_check_rejects_a_mis_sized_transform():
    spec = AlignmentSpec((("pool3", LayerTransform((3, 3, 3), (0, 0, 0), (2, 2, 2))),), "pool4", (2, 2, 1, 6))
    with pytest.raises(ConfigError, match="alignment of pool3"):
        spec.check({"pool3": (4, 4, 2, 5), "pool4": (2, 2, 1, 6)})


def test_spec_round_trip():
    spec = default_spec(SHAPES)
    assert AlignmentSpec.from_dict(spec.to_dict()) == spec


CONFIGS = st.builds(
    lambda size, frames, divisor, taps: (EncoderConfig(divisor=divisor, input_size=size, fc_size=4,
                                                       taps=taps), frames),
    st.tuples(st.sampled_from([16, 32]), st.sampled_from([16, 32, 64])),
    st.sampled_from([16, 32]),
    st.sampled_from([32, 64]),
    st.lists(st.sampled_from(TAPS), min_size=2, max_size=4, unique=True).map(
        lambda t: tuple(sorted(t, key=TAPS.index))),
)


@settings(max_examples=15)
@given(CONFIGS, st.integers(0, 1000))
def test_aligned_shapes_equal_top_shape(config, seed):
    cfg, frames = config
    rng = np.random.default_rng(seed)
    ps = ParameterStore()
    init_encoder(ps, cfg, rng)
    with T.no_grad():
        pyr = encode(rng.random((frames,) + cfg.input_size + (1,)), cfg, ps)
    shapes = pyramid_shapes(cfg, frames)
    spec = default_spec(shapes)
    init_alignment(ps, spec, shapes, rng)
    with T.no_grad():
        out = align(pyr, spec, ps)
    top = shapes[cfg.taps[-1]]
    assert all(m.shape == top for m in out.maps)
