"""Cross-layer alignment of the feature pyramid.

Each lower map ``a_l`` is convolved with a 5-axis kernel ``U_l`` of shape
``(k, k, k, n_F^l, n_F^L)`` (one 3D kernel per input/output filter pair, summed
over input filters), passed through ReLU and max-pooled so that it lands on the
grid and channel count of the top tapped map ``a_L``. The top map passes
through unchanged.

Stacking order of the per-location vector is fixed: layers in ascending order,
each contributing a contiguous block of ``n_F^L`` entries. Locations are the
row-major flattening of ``(x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError

DEFAULT_KERNELS = {"pool2": (7, 3), "pool3": (5, 2), "pool4": (3, 1)}


@dataclass(frozen=True)
class LayerTransform:
    kernel: tuple
    pad: tuple
    ratio: tuple

    def output_shape(self, shape, n_filters):
        conv = tuple(n + 2 * p - k + 1 for n, k, p in zip(shape[:3], self.kernel, self.pad))
        return tuple(c // r for c, r in zip(conv, self.ratio)) + (n_filters,), conv


@dataclass(frozen=True)
class AlignmentSpec:
    """Per-source-layer transforms mapping onto ``target_shape``.

    ``transforms`` is a tuple of ``(layer_name, LayerTransform)`` pairs for every
    tap below the top one.
    """

    transforms: tuple
    target: str
    target_shape: tuple

    @property
    def layers(self):
        return tuple(name for name, _ in self.transforms) + (self.target,)

    def transform(self, name):
        return dict(self.transforms)[name]

    def check(self, shapes):
        """Raise ConfigError unless every transform lands exactly on the target shape."""
        if tuple(shapes[self.target]) != tuple(self.target_shape):
            raise ConfigError(f"target {self.target} has shape {shapes[self.target]}, spec expects {self.target_shape}")
        for name, tf in self.transforms:
            shape = shapes[name]
            out, conv = tf.output_shape(shape, self.target_shape[3])
            if any(c <= 0 for c in conv) or any(c % r for c, r in zip(conv, tf.ratio)) or out != tuple(self.target_shape):
                raise ConfigError(
                    f"alignment of {name}: input {tuple(shape)} maps to {out} (conv extents {conv}, "
                    f"pool {tf.ratio}) but the target shape is {tuple(self.target_shape)}")

    def to_dict(self):
        return {
            "target": self.target,
            "target_shape": list(self.target_shape),
            "transforms": [{"layer": n, "kernel": list(t.kernel), "pad": list(t.pad), "ratio": list(t.ratio)}
                           for n, t in self.transforms],
        }

    @classmethod
    def from_dict(cls, d):
        transforms = tuple((t["layer"], LayerTransform(tuple(t["kernel"]), tuple(t["pad"]), tuple(t["ratio"])))
                           for t in d["transforms"])
        return cls(transforms, d["target"], tuple(d["target_shape"]))


def default_spec(shapes, kernels=None):
    """Spec with the default kernel/padding per layer and ratios read off the shapes.

    ``shapes`` maps tap names (bottom to top) to ``(n_x, n_y, n_z, n_F)``.
    """
    kernels = DEFAULT_KERNELS if kernels is None else kernels
    names = list(shapes)
    target = names[-1]
    tshape = tuple(shapes[target])
    transforms = []
    for name in names[:-1]:
        shape = shapes[name]
        ratio = []
        for axis in range(3):
            if shape[axis] % tshape[axis]:
                raise ConfigError(f"{name} extent {shape[axis]} on axis {'xyz'[axis]} is not a multiple of "
                                  f"the target extent {tshape[axis]}")
            ratio.append(shape[axis] // tshape[axis])
        k, p = kernels.get(name, (3, 1))
        transforms.append((name, LayerTransform((k,) * 3, (p,) * 3, tuple(ratio))))
    spec = AlignmentSpec(tuple(transforms), target, tshape)
    spec.check(shapes)
    return spec


def init_alignment(params, spec, shapes, rng, scale=0.01):
    n_out = spec.target_shape[3]
    for name, tf in spec.transforms:
        n_in = shapes[name][3]
        params.add(f"align.{name}.U", rng.uniform(-scale, scale, tf.kernel + (n_in, n_out)))
        params.add(f"align.{name}.b", np.zeros(n_out))


@dataclass
class AlignedPyramid:
    """Aligned maps (bottom to top) and the stacked ``(n_locations, L * n_F)`` matrix."""

    maps: list
    stacked: T.Tensor
    grid: tuple

    @property
    def n_layers(self):
        return len(self.maps)

    @property
    def n_filters(self):
        return self.maps[0].shape[3]

    def location_vector(self, i):
        return self.stacked.data[i]


def transform_layer(a, tf, U, b):
    """``maxpool(relu(conv3d(a, U) + b))`` for one source layer."""
    return T.maxpool3d(T.relu(T.conv3d(a, U, padding=tf.pad) + b), tf.ratio)


def align(pyramid, spec, params, scales=None):
    """Map every tapped layer onto the top layer's grid and channel space.

    ``scales`` optionally maps each layer to a per-channel ``(shift, scale)``
    pair applied to the raw tap before the transform (feature standardisation
    fitted on training data).
    """
    taps = pyramid.taps if hasattr(pyramid, "taps") else pyramid
    spec.check({k: v.shape for k, v in taps.items()})
    maps = []
    for name in spec.layers:
        a = taps[name]
        if scales is not None:
            shift, scale = scales[name]
            a = (a - shift) * scale
        if name == spec.target:
            maps.append(a)
        else:
            tf = spec.transform(name)
            maps.append(transform_layer(a, tf, params[f"align.{name}.U"], params[f"align.{name}.b"]))
    grid = tuple(spec.target_shape[:3])
    stacked = T.reshape(T.concat(maps, axis=3), (int(np.prod(grid)), -1))
    return AlignedPyramid(maps=maps, stacked=stacked, grid=grid)
