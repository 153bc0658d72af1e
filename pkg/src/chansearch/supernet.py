"""The over-parameterized search network.

Every edge carries all candidate operations of the space, blended by the
softmax of the architecture parameters. The two cell types (normal, reduce)
share one architecture matrix each across all cells of that type; operation
weights are private per cell.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .spaces import (FactorizedReduce, OperationKind, build_topology, make_op,
                     network_layout)

ALPHA_INIT_STD = 1e-3

CELL_TYPES = ("normal", "reduce")


class ArchParams:
    """Architecture parameters: one (edges x operations) matrix per cell type."""

    def __init__(self, topology, space, rng=None, normal=None, reduce=None):
        shape = (topology.num_edges, space.size)
        if normal is None:
            if rng is None:
                raise ConfigError("ArchParams needs either an rng or explicit matrices")
            normal = rng.normal(0.0, ALPHA_INIT_STD, shape)
            reduce = rng.normal(0.0, ALPHA_INIT_STD, shape)
        for name, mat in (("normal", normal), ("reduce", reduce)):
            mat = np.asarray(mat)
            if mat.shape != shape:
                raise ConfigError(f"{name} arch matrix has shape {mat.shape}, expected {shape}")
            if not np.all(np.isfinite(mat)):
                raise ConfigError(f"{name} arch matrix has non-finite entries")
        self.topology = topology
        self.space = space
        self.normal = ad.Tensor(np.asarray(normal), requires_grad=True,
                                dtype=np.float32, name="arch.normal")
        self.reduce = ad.Tensor(np.asarray(reduce), requires_grad=True,
                                dtype=np.float32, name="arch.reduce")

    def tensor(self, cell_type):
        if cell_type not in CELL_TYPES:
            raise ConfigError(f"unknown cell type {cell_type!r}")
        return self.normal if cell_type == "normal" else self.reduce

    def tensors(self):
        return [self.normal, self.reduce]

    def strengths(self, cell_type, edge):
        """Softmax operation strengths of one edge (plain numpy, float64)."""
        mat = self.tensor(cell_type)
        if not (0 <= edge < self.topology.num_edges):
            raise ConfigError(f"edge {edge} invalid for topology with "
                              f"{self.topology.num_edges} edges")
        return ad.softmax_values(mat.data[edge])

    def strength_matrix(self, cell_type):
        mat = self.tensor(cell_type).data
        return np.stack([ad.softmax_values(row) for row in mat])


def strengths(arch, cell_type, edge):
    return arch.strengths(cell_type, edge)


class _ReluConvNorm:
    """relu -> 1x1 conv -> normalize; width-matching cell preprocessing."""

    def __init__(self, store, prefix, c_in, c_out, affine, rng=None):
        from .spaces import _conv_param, _norm_params
        self.pw = _conv_param(store, f"{prefix}.pw", (c_out, c_in, 1, 1), rng)
        self.scale, self.shift = _norm_params(store, f"{prefix}.norm", c_out, affine, rng)
        self.affine = affine

    def __call__(self, x):
        y = ad.conv2d(ad.relu(x), self.pw)
        return ad.normalize(y, affine=self.affine, scale=self.scale, shift=self.shift)


class MixedCell:
    """One cell of the super-net: every edge holds all candidate operations."""

    def __init__(self, store, prefix, space, topology, cell_type, c_pp, c_p, c_node,
                 reduction_prev, affine=False, rng=None, sepconv_repeats=1):
        self.cell_type = cell_type
        self.topology = topology
        if reduction_prev:
            self.pre0 = FactorizedReduce(store, f"{prefix}.pre0", c_pp, c_node,
                                         affine, rng=rng)
        else:
            self.pre0 = _ReluConvNorm(store, f"{prefix}.pre0", c_pp, c_node, affine, rng=rng)
        self.pre1 = _ReluConvNorm(store, f"{prefix}.pre1", c_p, c_node, affine, rng=rng)
        self.edge_ops = []
        for e, (i, j) in enumerate(topology.edges):
            stride = 2 if cell_type == "reduce" and i < 2 else 1
            ops = [make_op(kind, store, f"{prefix}.edge{e}.op{k}", c_node, stride,
                           affine=affine, rng=rng, sepconv_repeats=sepconv_repeats)
                   for k, kind in enumerate(space.operations)]
            self.edge_ops.append(ops)
        self.out_channels = topology.num_intermediate * c_node

    def mixed_edge(self, x, edge_index, strength_rows):
        outs = [op(x) for op in self.edge_ops[edge_index]]
        return ad.weighted_sum(outs, ad.take_row(strength_rows, edge_index))

    def forward(self, s0, s1, strength_rows):
        states = [self.pre0(s0), self.pre1(s1)]
        for j in self.topology.intermediate_nodes():
            acc = None
            for e, (i, _) in self.topology.edges_into(j):
                y = self.mixed_edge(states[i], e, strength_rows)
                acc = y if acc is None else ad.add(acc, y)
            states.append(acc)
        return ad.concat_channels(states[self.topology.num_input_nodes:])


class SuperNet:
    """Stem -> mixed cells per layout -> global average pool -> classifier."""

    def __init__(self, layout, space, topology, in_channels=1, rng=None,
                 arch=None, sepconv_repeats=1):
        if rng is None:
            rng = np.random.default_rng(0)
        self.layout = layout
        self.space = space
        self.topology = topology
        self.in_channels = in_channels
        self.sepconv_repeats = sepconv_repeats
        self.arch = arch if arch is not None else ArchParams(topology, space, rng=rng)
        self.store = ad.ParamStore()

        c = layout.init_channels
        from .spaces import _conv_param, _norm_params
        self.stem_kernel = _conv_param(self.store, "stem.conv", (c, in_channels, 3, 3), rng)
        self.cells = []
        c_pp, c_p = c, c
        c_node = c
        reduction_prev = False
        for idx, kind in enumerate(layout.cell_sequence):
            if kind == "reduce":
                c_node *= 2
            cell = MixedCell(self.store, f"cell{idx}", space, topology, kind,
                             c_pp, c_p, c_node, reduction_prev,
                             affine=False, rng=rng, sepconv_repeats=sepconv_repeats)
            self.cells.append(cell)
            reduction_prev = kind == "reduce"
            c_pp, c_p = c_p, cell.out_channels
        self.classifier_w = self.store.create(
            "classifier.w", rng.normal(0.0, 0.01, (layout.num_classes, c_p)))
        self.classifier_b = self.store.create(
            "classifier.b", np.zeros(layout.num_classes))

    def stem(self, images):
        y = ad.conv2d(images, self.stem_kernel, padding=1)
        return ad.normalize(y)

    def forward(self, images):
        if images.data.ndim != 4 or images.data.shape[1] != self.in_channels:
            raise ConfigError(f"expected (b, {self.in_channels}, h, w) images, "
                              f"got {images.data.shape}")
        h, w = images.data.shape[2:]
        if h % 4 or w % 4 or h < 4 or w < 4:
            raise ConfigError(f"spatial size {h}x{w} too small for two reductions "
                              "(needs h, w divisible by 4)")
        rows = {ct: ad.softmax_rows(self.arch.tensor(ct)) for ct in CELL_TYPES}
        s0 = s1 = self.stem(images)
        for cell in self.cells:
            s0, s1 = s1, cell.forward(s0, s1, rows[cell.cell_type])
        pooled = ad.global_avg_pool(s1)
        return ad.linear(pooled, self.classifier_w, self.classifier_b)

    def parameters(self):
        return self.store.tensors()

    def named_arrays(self):
        """All tensors (weights + architecture) for checkpointing."""
        out = {name: t.data for name, t in self.store.items()}
        out["arch.normal"] = self.arch.normal.data
        out["arch.reduce"] = self.arch.reduce.data
        return out

    def load_arrays(self, arrays):
        for name, t in self.store.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint missing tensor {name!r}")
            if arrays[name].shape != t.data.shape:
                raise ConfigError(f"checkpoint tensor {name!r} has shape "
                                  f"{arrays[name].shape}, expected {t.data.shape}")
            t.data = arrays[name].astype(t.data.dtype)
        for ct in CELL_TYPES:
            name = f"arch.{ct}"
            if name not in arrays:
                raise ConfigError(f"checkpoint missing tensor {name!r}")
            self.arch.tensor(ct).data = arrays[name].astype(np.float32)


def mixed_edge_forward(x, edge, cell_type, net, cell_index=None):
    """Mixed-operation forward of one edge, using the first cell of the type."""
    cell = _pick_cell(net, cell_type, cell_index)
    rows = ad.softmax_rows(net.arch.tensor(cell_type))
    return cell.mixed_edge(x, edge, rows)


def cell_forward(inputs, cell_type, net, cell_index=None):
    cell = _pick_cell(net, cell_type, cell_index)
    rows = ad.softmax_rows(net.arch.tensor(cell_type))
    return cell.forward(inputs[0], inputs[1], rows)


def supernet_forward(images, net):
    return net.forward(images)


def _pick_cell(net, cell_type, cell_index):
    if cell_index is not None:
        return net.cells[cell_index]
    for cell in net.cells:
        if cell.cell_type == cell_type:
            return cell
    raise ConfigError(f"no cell of type {cell_type!r} in this layout")


def build_supernet(space, n=1, num_intermediate=4, init_channels=8, num_classes=3,
                   in_channels=1, rng=None, sepconv_repeats=1):
    layout = network_layout(n, init_channels, num_classes)
    topology = build_topology(num_intermediate)
    return SuperNet(layout, space, topology, in_channels=in_channels, rng=rng,
                    sepconv_repeats=sepconv_repeats)
