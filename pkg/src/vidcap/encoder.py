"""Scaled-down C3D feature extractor.

The skeleton is fixed: eight 3x3x3 convolutions (padding 1, stride 1), each
followed by ReLU, and five max-pooling layers. ``pool1`` pools ``(2, 2, 1)``
over ``(x, y, z)`` (no temporal pooling), the rest pool ``(2, 2, 2)``. The
outputs of ``pool2`` through ``pool5`` are tapped as the feature pyramid; a
temporally mean-pooled ``pool5`` feeds one fully-connected layer whose output is
the top-level video vector.

Videos arrive as ``(frame, height, width, channel)`` arrays and are transposed to
``(x, y, z, c) = (height, width, frame, channel)`` internally.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError

C3D_WIDTHS = (64, 128, 256, 256, 512, 512, 512, 512)
C3D_FC = 4096
TAPS = ("pool2", "pool3", "pool4", "pool5")
_BLOCKS = (("conv1a",), ("conv2a",), ("conv3a", "conv3b"), ("conv4a", "conv4b"), ("conv5a", "conv5b"))


@dataclass(frozen=True)
class ConvLayer:
    name: str
    kernel: tuple = (3, 3, 3)
    pad: tuple = (1, 1, 1)
    stride: tuple = (1, 1, 1)


@dataclass(frozen=True)
class PoolLayer:
    name: str
    ratio: tuple = (2, 2, 2)


def c3d_stack():
    """The eight-convolution C3D layer stack, bottom to top."""
    layers = []
    for i, block in enumerate(_BLOCKS, start=1):
        layers.extend(ConvLayer(name) for name in block)
        layers.append(PoolLayer(f"pool{i}", (2, 2, 1) if i == 1 else (2, 2, 2)))
    return layers


@dataclass(frozen=True)
class EncoderConfig:
    """Shape hyperparameters of the extractor.

    ``divisor`` scales every published channel width down (8 gives
    8/16/32/32/64/64/64/64). ``input_size`` is ``(height, width)``.
    """

    divisor: int = 8
    input_size: tuple = (64, 64)
    in_channels: int = 1
    fc_size: int = 64
    window: int = 16
    overlap: int = 8
    taps: tuple = field(default=TAPS)

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "taps", tuple(self.taps))
        if self.divisor < 1 or any(w % self.divisor for w in C3D_WIDTHS):
            raise ConfigError(f"divisor {self.divisor} must divide every C3D width {C3D_WIDTHS}")
        if any(n % 16 for n in self.input_size):
            raise ConfigError(f"input size {self.input_size} must be divisible by 16 on both axes")
        unknown = set(self.taps) - set(TAPS)
        if unknown or not self.taps:
            raise ConfigError(f"taps must be a non-empty subset of {TAPS}, got {self.taps}")
        if list(self.taps) != sorted(self.taps, key=TAPS.index):
            raise ConfigError(f"taps must be listed bottom to top, got {self.taps}")
        if not 0 <= self.overlap < self.window:
            raise ConfigError(f"overlap must lie in [0, window), got {self.overlap}")

    @property
    def widths(self):
        return tuple(w // self.divisor for w in C3D_WIDTHS)

    def conv_widths(self):
        names = [n for block in _BLOCKS for n in block]
        return dict(zip(names, self.widths))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def check_frames(n_frames):
    if n_frames < 16 or n_frames % 16:
        raise ConfigError(f"frame count {n_frames} must be a positive multiple of 16")


def pool_extents(cfg, n_frames):
    """Closed-form ``(n_x, n_y, n_z)`` after every pooling layer."""
    check_frames(n_frames)
    x, y, z = cfg.input_size[0], cfg.input_size[1], n_frames
    out = {}
    for i in range(1, 6):
        if i == 1:
            x, y = x // 2, y // 2
        elif i == 5:
            # the top pool rounds up, as the reference C3D does for 112x112 input
            x, y, z = math.ceil(x / 2), math.ceil(y / 2), z // 2
        else:
            x, y, z = x // 2, y // 2, z // 2
        out[f"pool{i}"] = (x, y, z)
    return out


def pyramid_shapes(cfg, n_frames):
    """Closed-form shape of every tapped map, ``(n_x, n_y, n_z, n_F)``."""
    ext = pool_extents(cfg, n_frames)
    widths = cfg.conv_widths()
    last_conv = {"pool2": "conv2a", "pool3": "conv3b", "pool4": "conv4b", "pool5": "conv5b"}
    return {t: ext[t] + (widths[last_conv[t]],) for t in cfg.taps}


def fc_input_size(cfg):
    x5, y5, _ = pool_extents(cfg, 16)["pool5"]
    return x5 * y5 * cfg.widths[-1]


def init_encoder(params, cfg, rng, scale=0.05, frozen=True):
    """Uniform ``[-scale, scale]`` weights, zero biases."""
    c_in = cfg.in_channels
    for name, width in cfg.conv_widths().items():
        params.add(f"encoder.{name}.w", rng.uniform(-scale, scale, (3, 3, 3, c_in, width)), frozen=frozen)
        params.add(f"encoder.{name}.b", np.zeros(width), frozen=frozen)
        c_in = width
    params.add("encoder.fc.w", rng.uniform(-scale, scale, (cfg.fc_size, fc_input_size(cfg))), frozen=frozen)
    params.add("encoder.fc.b", np.zeros(cfg.fc_size), frozen=frozen)


@dataclass
class FeaturePyramid:
    """Tapped maps ``taps[name] -> Tensor[n_x, n_y, n_z, n_F]`` and the fc vector."""

    taps: dict
    top: T.Tensor

    def shapes(self):
        return {k: v.shape for k, v in self.taps.items()}

    def layer(self, i):
        return list(self.taps.values())[i]


def temporal_windows(x, window=16, overlap=8, axis=2):
    """Window means along ``axis``; windows advance by ``window - overlap``."""
    x = T.as_tensor(x)
    if x.shape[axis] < window:
        raise ConfigError(f"temporal extent {x.shape[axis]} is shorter than the window {window}")
    return T.window_mean(x, window, window - overlap, axis=axis)


def temporal_mean_pool(x, window=16, overlap=8, axis=2):
    """Average of the window means; the pooled axis always has extent 1."""
    return T.mean(temporal_windows(x, window, overlap, axis), axis=axis, keepdims=True)


def video_to_xyzc(video):
    video = np.asarray(video)
    if video.ndim != 4:
        raise ShapeError(f"video must be (frame, height, width, channel), got shape {video.shape}")
    return np.ascontiguousarray(np.transpose(video, (1, 2, 0, 3)))


def encode(video, cfg, params, dtype=np.float64):
    """Run the extractor on one ``(frame, height, width, channel)`` video."""
    video = np.asarray(video)
    if video.ndim != 4:
        raise ShapeError(f"video must be (frame, height, width, channel), got shape {video.shape}")
    n_frames, height, width, channels = video.shape
    check_frames(n_frames)
    if (height, width) != cfg.input_size:
        raise ConfigError(f"video is {height}x{width} but the encoder expects {cfg.input_size}")
    if channels != cfg.in_channels:
        raise ConfigError(f"video has {channels} channels but the encoder expects {cfg.in_channels}")
    h = T.Tensor(video_to_xyzc(video).astype(dtype))
    taps = {}
    for layer in c3d_stack():
        if isinstance(layer, ConvLayer):
            w, b = params[f"encoder.{layer.name}.w"], params[f"encoder.{layer.name}.b"]
            h = T.relu(T.conv3d(h, w, padding=layer.pad, stride=layer.stride) + b)
        else:
            h = T.maxpool3d(h, layer.ratio, ceil_mode=layer.name == "pool5")
            if layer.name in cfg.taps:
                taps[layer.name] = h
    # top vector: pool5 mean-pooled over frame-aligned windows
    stride_z = 16
    upsampled = T.take(h, np.repeat(np.arange(h.shape[2]), stride_z), axis=2)
    pooled = temporal_mean_pool(upsampled, cfg.window, cfg.overlap, axis=2)
    flat = T.reshape(pooled, (-1,))
    top = T.relu(T.linear(flat, params["encoder.fc.w"], params["encoder.fc.b"]))
    return FeaturePyramid(taps=taps, top=top)
