"""Candidate operations, named operation spaces, cell topology, macro layout.

Operation index order inside each space is fixed: it is the position in the
``operations`` tuple and is what architecture-parameter columns refer to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


class OperationKind(Enum):
    SEP_CONV_3 = "SepConv3x3"
    SEP_CONV_5 = "SepConv5x5"
    DIL_CONV_3 = "DilSepConv3x3"
    DIL_CONV_5 = "DilSepConv5x5"
    MAX_POOL_3 = "MaxPool3x3"
    AVG_POOL_3 = "AvgPool3x3"
    SKIP = "SkipConnect"
    ZERO = "Zero"

    @property
    def parametric(self):
        return self in _CONV_SPEC

    def __str__(self):
        return self.value


# (kernel, dilation) of the separable-convolution kinds
_CONV_SPEC = {
    OperationKind.SEP_CONV_3: (3, 1),
    OperationKind.SEP_CONV_5: (5, 1),
    OperationKind.DIL_CONV_3: (3, 2),
    OperationKind.DIL_CONV_5: (5, 2),
}

_CONVS = (OperationKind.SEP_CONV_3, OperationKind.SEP_CONV_5,
          OperationKind.DIL_CONV_3, OperationKind.DIL_CONV_5)

_SPACES = {
    "S": _CONVS + (OperationKind.MAX_POOL_3, OperationKind.AVG_POOL_3,
                   OperationKind.SKIP, OperationKind.ZERO),
    "S5": _CONVS + (OperationKind.MAX_POOL_3, OperationKind.AVG_POOL_3,
                    OperationKind.ZERO),
    "S6": _CONVS,
    "S7": _CONVS + (OperationKind.SKIP,),
}


@dataclass(frozen=True)
class SearchSpace:
    id: str
    operations: tuple

    @property
    def size(self):
        return len(self.operations)

    @property
    def has_skip(self):
        return OperationKind.SKIP in self.operations

    def index_of(self, kind):
        return self.operations.index(kind)


def ops_for_space(space_id):
    """The fixed, ordered candidate-operation list of a named space."""
    try:
        return list(_SPACES[space_id])
    except KeyError:
        raise ConfigError(f"unknown operation space {space_id!r}; expected one of "
                          f"{sorted(_SPACES)}") from None


def get_space(space_id):
    return SearchSpace(space_id, tuple(ops_for_space(space_id)))


def op_from_name(name):
    for kind in OperationKind:
        if kind.value == name:
            return kind
    raise ConfigError(f"unknown operation name {name!r}")


@dataclass(frozen=True)
class CellTopology:
    """All-pairs DAG: nodes 0,1 are cell inputs, nodes 2..B+1 intermediate."""
    num_input_nodes: int
    num_intermediate: int
    edges: tuple

    @property
    def num_edges(self):
        return len(self.edges)

    def intermediate_nodes(self):
        return range(self.num_input_nodes, self.num_input_nodes + self.num_intermediate)

    def edges_into(self, node):
        return [(e, (i, j)) for e, (i, j) in enumerate(self.edges) if j == node]


def build_topology(num_intermediate):
    if num_intermediate < 1:
        raise ConfigError(f"need at least one intermediate node, got {num_intermediate}")
    edges = tuple((i, j) for j in range(2, num_intermediate + 2) for i in range(j))
    return CellTopology(2, num_intermediate, edges)


@dataclass(frozen=True)
class NetworkLayout:
    """Macro structure: n repeated normal cells per segment, two reduction cells."""
    n: int
    cell_sequence: tuple
    depth: int
    init_channels: int
    num_classes: int

    def reduction_positions(self):
        return [i for i, k in enumerate(self.cell_sequence) if k == "reduce"]


def network_layout(n, init_channels, num_classes):
    if n < 1:
        raise ConfigError(f"need n >= 1 repeated normal cells, got {n}")
    if init_channels < 1 or num_classes < 2:
        raise ConfigError("init_channels must be >= 1 and num_classes >= 2")
    seq = (["normal"] * n + ["reduce"]) * 2 + ["normal"] * n
    return NetworkLayout(n, tuple(seq), 3 * n + 2, init_channels, num_classes)


# ---------------------------------------------------------------------------
# operation blocks
# ---------------------------------------------------------------------------

def _conv_param(store, name, shape, rng):
    if rng is None:
        return store[name]
    fan_in = shape[1] * shape[2] * shape[3]
    return store.create(name, rng.normal(0.0, math.sqrt(2.0 / fan_in), shape))


def _norm_params(store, prefix, channels, affine, rng):
    if not affine:
        return None, None
    if rng is None:
        return store[f"{prefix}.scale"], store[f"{prefix}.shift"]
    scale = store.create(f"{prefix}.scale", np.ones(channels))
    shift = store.create(f"{prefix}.shift", np.zeros(channels))
    return scale, shift


class SepConvBlock:
    """relu -> depthwise kxk -> pointwise 1x1 -> normalize, ``repeats`` times.

    The stride applies to the first depthwise convolution; only the last
    pointwise convolution changes the channel count.
    """

    def __init__(self, store, prefix, c_in, c_out, kernel, dilation, stride,
                 affine, rng=None, repeats=1):
        if repeats not in (1, 2):
            raise ConfigError(f"sepconv repeats must be 1 or 2, got {repeats}")
        self.stages = []
        for r in range(repeats):
            s = stride if r == 0 else 1
            cout_r = c_out if r == repeats - 1 else c_in
            dw = _conv_param(store, f"{prefix}.dw{r}", (c_in, 1, kernel, kernel), rng)
            pw = _conv_param(store, f"{prefix}.pw{r}", (cout_r, c_in, 1, 1), rng)
            scale, shift = _norm_params(store, f"{prefix}.norm{r}", cout_r, affine, rng)
            self.stages.append((dw, pw, s, scale, shift))
        self.kernel = kernel
        self.dilation = dilation
        self.affine = affine
        self.c_in = c_in

    def __call__(self, x):
        pad = self.dilation * (self.kernel - 1) // 2
        for dw, pw, stride, scale, shift in self.stages:
            y = ad.relu(x)
            y = ad.conv2d(y, dw, stride=stride, dilation=self.dilation,
                          padding=pad, groups=self.c_in)
            y = ad.conv2d(y, pw)
            x = ad.normalize(y, affine=self.affine, scale=scale, shift=shift)
        return x


class PoolBlock:
    def __init__(self, mode, stride):
        self.mode = mode
        self.stride = stride

    def __call__(self, x):
        return ad.pool2d(x, self.mode, window=3, stride=self.stride, padding=1)


class Identity:
    def __call__(self, x):
        return x


class FactorizedReduce:
    """Channel-preserving spatial halving: two offset strided 1x1 paths, concatenated."""

    def __init__(self, store, prefix, c_in, c_out, affine, rng=None):
        c2 = c_out // 2
        c1 = c_out - c2
        self.pw1 = _conv_param(store, f"{prefix}.fr1", (c1, c_in, 1, 1), rng)
        self.pw2 = _conv_param(store, f"{prefix}.fr2", (c2, c_in, 1, 1), rng) if c2 else None
        self.scale, self.shift = _norm_params(store, f"{prefix}.norm", c_out, affine, rng)
        self.affine = affine

    def __call__(self, x):
        y = ad.relu(x)
        parts = [ad.conv2d(y, self.pw1, stride=2)]
        if self.pw2 is not None:
            parts.append(ad.conv2d(ad.shift_spatial(y, 1, 1), self.pw2, stride=2))
        out = ad.concat_channels(parts) if len(parts) > 1 else parts[0]
        return ad.normalize(out, affine=self.affine, scale=self.scale, shift=self.shift)


class ZeroBlock:
    def __init__(self, stride):
        self.stride = stride

    def __call__(self, x):
        return ad.zeros_like_strided(x, self.stride)


def make_op(kind, store, prefix, channels, stride, out_channels=None,
            affine=False, rng=None, sepconv_repeats=1):
    """Build (rng given) or rebind (rng None) one candidate operation.

    Returns a callable mapping a (b, channels, h, w) tensor to
    (b, out_channels, ceil(h/stride), ceil(w/stride)). Rebinding with missing
    weights raises ConfigError.
    """
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")
    c_out = channels if out_channels is None else out_channels
    if kind in _CONV_SPEC:
        kernel, dilation = _CONV_SPEC[kind]
        return SepConvBlock(store, prefix, channels, c_out, kernel, dilation,
                            stride, affine, rng=rng, repeats=sepconv_repeats)
    if c_out != channels and kind is not OperationKind.SKIP:
        raise ConfigError(f"{kind} cannot change channel count {channels} -> {c_out}")
    if kind is OperationKind.MAX_POOL_3:
        return PoolBlock("max", stride)
    if kind is OperationKind.AVG_POOL_3:
        return PoolBlock("average", stride)
    if kind is OperationKind.ZERO:
        return ZeroBlock(stride)
    if kind is OperationKind.SKIP:
        if stride == 1:
            if c_out != channels:
                # a width-limited skip keeps the first c_out channels
                return lambda x: ad.slice_channels(x, 0, c_out)
            return Identity()
        return FactorizedReduce(store, prefix, channels, c_out, affine, rng=rng)
    raise ConfigError(f"unknown operation kind {kind!r}")


def apply_operation(kind, x, stride, store, prefix, affine=False, rng=None,
                    sepconv_repeats=1):
    """One-shot forward of a candidate operation (see ``make_op``)."""
    op = make_op(kind, store, prefix, x.data.shape[1], stride,
                 affine=affine, rng=rng, sepconv_repeats=sepconv_repeats)
    return op(x)
