"""Exact receptive-field arithmetic for stacks of 3D conv and pooling layers.

A cell with 1-based index ``i`` on one axis of some layer sees the closed
interval ``[m*i + p, m*i + q]`` of the input, with integer ``(m, p, q)``. Each
layer maps an output index to an interval of its input:

* convolution (kernel ``k``, padding ``pad``, stride ``s``):
  ``[s*i + 1 - s - pad, s*i + k - s - pad]``
* pooling with ratio ``r``: ``[r*i - r + 1, r*i]``

and stacks compose affinely from the top layer down. Indices outside
``[1, n]`` denote zero padding. ``origin`` shifts the input coordinates, e.g.
``origin=0`` reports input positions counted from zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .alignment import AlignmentSpec, LayerTransform
from .encoder import ConvLayer, PoolLayer, c3d_stack
from .errors import ConfigError


@dataclass(frozen=True)
class AxisField:
    m: int
    p: int
    q: int

    def at(self, i):
        return (self.m * i + self.p, self.m * i + self.q)

    @property
    def width(self):
        return self.q - self.p + 1

    @property
    def center2(self):
        """Twice the interval centre offset (kept integral)."""
        return self.p + self.q

    def then(self, inner):
        """Compose with ``inner``, the field of this axis's coordinates in a lower layer."""
        return AxisField(inner.m * self.m, inner.m * self.p + inner.p, inner.m * self.q + inner.q)

    def shifted(self, d):
        return AxisField(self.m, self.p + d, self.q + d)

    def __str__(self):
        def term(v):
            return f"+{v}" if v > 0 else (f"{v}" if v < 0 else "")
        mi = "i" if self.m == 1 else f"{self.m}i"
        return f"[{mi}{term(self.p)}, {mi}{term(self.q)}]"


IDENTITY_AXIS = AxisField(1, 0, 0)


@dataclass(frozen=True)
class ReceptiveField:
    axes: tuple = (IDENTITY_AXIS,) * 3

    def at(self, index):
        return tuple(ax.at(i) for ax, i in zip(self.axes, index))

    def then(self, inner):
        return ReceptiveField(tuple(a.then(b) for a, b in zip(self.axes, inner.axes)))

    def shifted(self, d):
        return ReceptiveField(tuple(a.shifted(d) for a in self.axes))

    def coefficients(self):
        return tuple((a.m, a.p, a.q) for a in self.axes)

    def __str__(self):
        return " x ".join(str(a) for a in self.axes)


def layer_field(layer):
    if isinstance(layer, ConvLayer):
        return ReceptiveField(tuple(AxisField(s, 1 - s - p, k - s - p)
                                    for k, p, s in zip(layer.kernel, layer.pad, layer.stride)))
    if isinstance(layer, PoolLayer):
        return ReceptiveField(tuple(AxisField(r, 1 - r, 0) for r in layer.ratio))
    raise TypeError(f"unsupported layer {layer!r}")


def transform_field(tf):
    """Field of an aligned cell in the coordinates of its source map."""
    conv = ConvLayer("transform", kernel=tuple(tf.kernel), pad=tuple(tf.pad))
    return compose([conv, PoolLayer("transform_pool", tuple(tf.ratio))])


def compose(layers):
    """Field of the top of ``layers`` (listed bottom to top) in the bottom input."""
    rf = ReceptiveField()
    for layer in reversed(layers):
        rf = rf.then(layer_field(layer))
    return rf


def receptive_field(arch, layer, index=None, origin=1):
    """Field of ``layer`` in ``arch`` (bottom-to-top list), or its intervals at ``index``.

    With no layers below the target (``layer=None`` on an empty stack) the
    field is the identity ``[i, i]``.
    """
    names = [l.name for l in arch]
    if layer is None:
        upto = []
    elif layer not in names:
        raise ConfigError(f"unknown layer {layer!r}; known layers: {names}")
    else:
        upto = arch[: names.index(layer) + 1]
    rf = compose(upto).shifted(origin - 1)
    return rf if index is None else rf.at(index)


def condensed_c3d_stack():
    """C3D with one convolution per block: the stack the reference tables assume."""
    layers = []
    for i in range(1, 6):
        layers.append(ConvLayer(f"conv{i}"))
        layers.append(PoolLayer(f"pool{i}", (2, 2, 1) if i == 1 else (2, 2, 2)))
    return layers


# Published full-scale values, as (m, p, q) per (x, y, z) axis.
REFERENCE_INPUT_FIELDS = {
    "pool2": ((4, -7, 2), (4, -7, 2), (2, -4, 1)),
    "pool3": ((8, -15, 6), (8, -15, 6), (4, -8, 3)),
    "pool4": ((16, -31, 14), (16, -31, 14), (8, -16, 7)),
    "pool5": ((32, -63, 30), (32, -63, 30), (16, -32, 15)),
}
REFERENCE_TRANSFORM_FIELDS = {
    "pool2": ((8, -14, 7),) * 3,
    "pool3": ((4, -6, 4),) * 3,
    "pool4": ((2, -2, 1),) * 3,
}
REFERENCE_COMMON_FIELD = ((32, -63, 30), (32, -63, 30), (16, -32, 15))
# the reference tables count input positions from zero
REFERENCE_ORIGIN = 0

FULL_SCALE_TRANSFORMS = {"pool2": (7, 3, 8), "pool3": (5, 2, 4), "pool4": (3, 1, 2)}


def spec_from_kernels(kernels, target="pool5", target_shape=(4, 4, 1, 512)):
    """``kernels``: ``{layer: (k, pad, ratio)}`` with cubic extents."""
    transforms = tuple((name, LayerTransform((k,) * 3, (p,) * 3, (r,) * 3)) for name, (k, p, r) in kernels.items())
    return AlignmentSpec(transforms, target, tuple(target_shape))


@dataclass
class AlignmentReport:
    fields: dict = field(default_factory=dict)
    transform_fields: dict = field(default_factory=dict)
    common: ReceptiveField = None
    passed: bool = False
    centers_aligned: bool = False
    mismatched: list = field(default_factory=list)

    def lines(self):
        out = []
        for name, rf in self.fields.items():
            mark = "" if name not in self.mismatched else "   <-- differs"
            out.append(f"{name:<6} {rf}{mark}")
        out.append(f"aligned: {'PASS' if self.passed else 'FAIL'}"
                   + ("" if self.passed else f" (centres {'aligned' if self.centers_aligned else 'misaligned'})"))
        return out


def verify_alignment(arch, spec, origin=1):
    """Check that every aligned layer sees the identical input interval.

    Returns the per-layer input fields of the aligned maps; the top layer's
    field (untransformed) is the reference.
    """
    names = [l.name for l in arch]
    report = AlignmentReport()
    for name in spec.layers:
        if name not in names:
            raise ConfigError(f"alignment layer {name!r} is not in the architecture")
        base = receptive_field(arch, name, origin=origin)
        if name == spec.target:
            rf = base
        else:
            local = transform_field(spec.transform(name))
            report.transform_fields[name] = local
            rf = local.then(base)
        report.fields[name] = rf
    report.common = report.fields[spec.target]
    report.mismatched = [n for n, rf in report.fields.items() if rf != report.common]
    report.passed = not report.mismatched
    report.centers_aligned = all(
        a.m == b.m and a.center2 == b.center2
        for rf in report.fields.values() for a, b in zip(rf.axes, report.common.axes))
    return report


def solve_alignment(arch, layers, target_shape=None):
    """Cubic-or-not kernels and paddings that make every aligned field identical.

    ``layers`` lists tap names bottom to top; the last one is the target. The
    solution is unique given the pooling ratio; a ConfigError is raised when no
    shape-preserving (``k = 2*pad + 1``) integer solution exists.
    """
    target = layers[-1]
    top = receptive_field(arch, target)
    transforms = []
    for name in layers[:-1]:
        src = receptive_field(arch, name)
        kernel, pad, ratio = [], [], []
        for ax_src, ax_top in zip(src.axes, top.axes):
            if ax_top.m % ax_src.m:
                raise ConfigError(f"{name}: scale {ax_src.m} does not divide target scale {ax_top.m}")
            r = ax_top.m // ax_src.m
            dp, dq = ax_top.p - ax_src.p, ax_top.q - ax_src.q
            if dp % ax_src.m or dq % ax_src.m:
                raise ConfigError(f"{name}: target offsets are not reachable on the source grid")
            p = 1 - r - dp // ax_src.m
            k = 1 + p + dq // ax_src.m
            if p < 0 or k != 2 * p + 1:
                raise ConfigError(f"{name}: no shape-preserving transform (kernel {k}, pad {p})")
            kernel.append(k)
            pad.append(p)
            ratio.append(r)
        transforms.append((name, LayerTransform(tuple(kernel), tuple(pad), tuple(ratio))))
    return AlignmentSpec(tuple(transforms), target, tuple(target_shape) if target_shape else (0, 0, 0, 0))


@dataclass
class TableCheck:
    rows: list = field(default_factory=list)   # (table, layer, axis, computed, reference)

    @property
    def mismatches(self):
        return [r for r in self.rows if r[3] != r[4]]

    @property
    def passed(self):
        return not self.mismatches


def _axis_str(coeffs):
    return str(AxisField(*coeffs))


def reference_table_check():
    """Reproduce the full-scale receptive-field tables and common interval.

    Input fields come from the condensed C3D stack with zero-based input
    coordinates; transform fields from the aligning transforms solved on that
    stack. Every entry is compared with the published value.
    """
    arch = condensed_c3d_stack()
    check = TableCheck()
    for name, ref in REFERENCE_INPUT_FIELDS.items():
        rf = receptive_field(arch, name, origin=REFERENCE_ORIGIN)
        for axis, (got, want) in enumerate(zip(rf.coefficients(), ref)):
            check.rows.append(("input", name, "xyz"[axis], got, want))
    solved = solve_alignment(arch, list(REFERENCE_INPUT_FIELDS))
    for name, ref in REFERENCE_TRANSFORM_FIELDS.items():
        rf = transform_field(solved.transform(name))
        for axis, (got, want) in enumerate(zip(rf.coefficients(), ref)):
            check.rows.append(("transform", name, "xyz"[axis], got, want))
    report = verify_alignment(arch, solved, origin=REFERENCE_ORIGIN)
    for name, rf in report.fields.items():
        for axis, (got, want) in enumerate(zip(rf.coefficients(), REFERENCE_COMMON_FIELD)):
            check.rows.append(("common", name, "xyz"[axis], got, want))
    return check, solved, report


def format_table_check(check):
    lines = []
    titles = {"input": "tapped maps in the input video",
              "transform": "aligned maps in their source map",
              "common": "aligned maps in the input video"}
    for table in ("input", "transform", "common"):
        lines.append(f"== receptive field of {titles[table]} ==")
        rows = [r for r in check.rows if r[0] == table]
        for layer in dict.fromkeys(r[1] for r in rows):
            cells = [r for r in rows if r[1] == layer]
            got = " x ".join(_axis_str(r[3]) for r in cells)
            bad = [r for r in cells if r[3] != r[4]]
            status = "ok" if not bad else "MISMATCH: reference " + " x ".join(_axis_str(r[4]) for r in cells)
            lines.append(f"{layer:<6} {got}  {status}")
    lines.append(f"result: {'PASS' if check.passed else 'FAIL'} ({len(check.mismatches)} mismatched entries)")
    return lines


def full_c3d_report(kernels=None):
    """Alignment of the eight-convolution stack under the given transforms."""
    kernels = FULL_SCALE_TRANSFORMS if kernels is None else kernels
    return verify_alignment(c3d_stack(), spec_from_kernels(kernels))
