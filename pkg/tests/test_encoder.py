import numpy as np
import pytest

from vidcap import tensor as T
from vidcap.encoder import (EncoderConfig, c3d_stack, encode, fc_input_size, init_encoder, pool_extents,
                            pyramid_shapes, temporal_mean_pool, temporal_windows, video_to_xyzc)
from vidcap.errors import ConfigError, ShapeError
from vidcap.params import ParameterStore


def make(cfg, seed=0):
    ps = ParameterStore()
    init_encoder(ps, cfg, np.random.default_rng(seed))
    return ps


def test_stack_has_eight_convolutions_and_five_pools():
    stack = c3d_stack()
    assert sum(1 for l in stack if l.name.startswith("conv")) == 8
    assert [l.name for l in stack if l.name.startswith("pool")] == ["pool1", "pool2", "pool3", "pool4", "pool5"]
    assert stack[1].ratio == (2, 2, 1)


def test_divisor_widths():
    assert EncoderConfig(divisor=8).widths == (8, 16, 32, 32, 64, 64, 64, 64)
    assert EncoderConfig(divisor=1).widths == (64, 128, 256, 256, 512, 512, 512, 512)


@pytest.mark.parametrize("kwargs,match", [
    ({"divisor": 3}, "divisor"), ({"input_size": (40, 64)}, "divisible by 16"),
    ({"taps": ("pool5", "pool2")}, "bottom to top"), ({"taps": ("pool9",)}, "subset"),
    ({"overlap": 16}, "overlap"),
])
def test_config_errors(kwargs, match):
    with pytest.raises(ConfigError, match=match):
        EncoderConfig(**kwargs)


def test_frame_count_must_be_multiple_of_16():
    with pytest.raises(ConfigError, match="multiple of 16"):
        pool_extents(EncoderConfig(), 24)


def test_reference_input_size_top_pool_rounds_up():
    ext = pool_extents(EncoderConfig(input_size=(112, 112)), 16)
    assert ext["pool4"] == (7, 7, 2)
    assert ext["pool5"] == (4, 4, 1)


@pytest.mark.parametrize("size,frames,divisor", [((64, 64), 16, 8), ((32, 48), 32, 16), ((112, 112), 16, 64)])
def test_closed_form_shapes_match_forward_pass(size, frames, divisor):
    cfg = EncoderConfig(divisor=divisor, input_size=size, fc_size=12)
    video = np.random.default_rng(1).random((frames,) + size + (1,))
    with T.no_grad():
        pyr = encode(video, cfg, make(cfg))
    assert pyr.shapes() == pyramid_shapes(cfg, frames)
    assert pyr.top.shape == (12,)
    assert fc_input_size(cfg) == np.prod(pool_extents(cfg, 16)["pool5"][:2]) * cfg.widths[-1]


def test_layout_is_height_width_frame():
    video = np.arange(16 * 32 * 48).reshape(16, 32, 48, 1).astype(float)
    x = video_to_xyzc(video)
    assert x.shape == (32, 48, 16, 1)
    assert x[3, 5, 7, 0] == video[7, 3, 5, 0]


def test_wrong_video_shapes():
    cfg = EncoderConfig(input_size=(32, 32))
    ps = make(cfg)
    with pytest.raises(ConfigError, match="expects"):
        encode(np.zeros((16, 64, 64, 1)), cfg, ps)
    with pytest.raises(ConfigError, match="channels"):
        encode(np.zeros((16, 32, 32, 3)), cfg, ps)
    with pytest.raises(ShapeError):
        encode(np.zeros((16, 32, 32)), cfg, ps)


def test_all_zero_video_gives_zero_features():
    """Zero biases and ReLU: an all-zero video maps to exactly zero everywhere."""
    cfg = EncoderConfig(divisor=32, input_size=(32, 32), fc_size=4)
    with T.no_grad():
        pyr = encode(np.zeros((16, 32, 32, 1)), cfg, make(cfg))
    assert all(np.all(t.data == 0) for t in pyr.taps.values())
    assert np.all(pyr.top.data == 0)


def test_same_seed_same_weights_and_frozen():
    cfg = EncoderConfig(divisor=32, input_size=(32, 32))
    a, b = make(cfg, 3), make(cfg, 3)
    for name in a.names():
        np.testing.assert_array_equal(a[name].data, b[name].data)
        assert a.is_frozen(name)
    assert all(np.all(a[n].data == 0) for n in a.names() if n.endswith(".b"))


def test_temporal_windows():
    x = np.arange(32, dtype=float).reshape(1, 1, 32, 1)
    w = temporal_windows(x, 16, 8, axis=2).data.ravel()
    np.testing.assert_allclose(w, [7.5, 15.5, 23.5])
    assert temporal_mean_pool(x, 16, 8, axis=2).shape == (1, 1, 1, 1)
    with pytest.raises(ConfigError, match="shorter"):
        temporal_windows(np.zeros((1, 1, 8, 1)), 16, 8)
