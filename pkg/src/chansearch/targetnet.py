"""The discrete evaluation network derived from a genotype.

Each retained operation produces its allocated channel count and is topped up
to the node's full width by an identity path carrying the first remaining
channels of its source (a strided reduction on reduction edges). Node inputs
are summed at full width; the cell output concatenates the intermediate
nodes, as in the search network.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import norm_stats, normalized_images, split
from .errors import ConfigError, DivergenceError
from .genotype import (allocate_channels, darts_s_allocation,
                       full_width_allocation)
from .search import SGD, cosine_lr, evaluate_net
from .spaces import FactorizedReduce, make_op
from .supernet import _ReluConvNorm

ABLATION_MODES = ("full", "no_skip", "no_channel")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 3e-4
    seed: int = 0
    split_fraction: float = 0.8

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not (0.0 < self.split_fraction < 1.0):
            raise ConfigError("split fraction must be in (0, 1)")


@dataclass
class TrainRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float


class TrainTrace:
    def __init__(self):
        self.records = []

    def to_csv(self):
        lines = ["epoch,train_loss,train_acc,val_loss,val_acc,seconds"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_loss:.6f},{r.train_acc:.6f},"
                         f"{r.val_loss:.6f},{r.val_acc:.6f},{r.seconds:.6f}")
        return "\n".join(lines) + "\n"


def _cell_allocation(genotype, allocation, c_node, ablation_mode):
    """Per-instance channel split at this cell's width."""
    if ablation_mode == "no_skip" or allocation.mode == "darts_baseline":
        return full_width_allocation(genotype, c_node)
    if ablation_mode == "no_channel" or allocation.mode == "darts_s":
        return darts_s_allocation(genotype, c_node, fixed=allocation.fixed or 8)
    return allocate_channels(genotype, c_node)


class _Entry:
    def __init__(self, store, prefix, kind, source, stride, c_node, c_op, c_skip,
                 rng, sepconv_repeats):
        self.source = source
        self.c_skip = c_skip
        self.op = make_op(kind, store, f"{prefix}.op", c_node, stride,
                          out_channels=c_op, affine=True, rng=rng,
                          sepconv_repeats=sepconv_repeats)
        if c_skip > 0 and stride == 2:
            self.refill = FactorizedReduce(store, f"{prefix}.refill", c_skip, c_skip,
                                           affine=True, rng=rng)
        else:
            self.refill = None

    def __call__(self, x):
        y = self.op(x)
        if self.c_skip == 0:
            return y
        tail = ad.slice_channels(x, 0, self.c_skip)
        if self.refill is not None:
            tail = self.refill(tail)
        return ad.concat_channels([y, tail])


class TargetCell:
    def __init__(self, store, prefix, genotype, allocation, cell_type,
                 c_pp, c_p, c_node, reduction_prev, ablation_mode,
                 rng=None, sepconv_repeats=1):
        self.cell_type = cell_type
        if reduction_prev:
            self.pre0 = FactorizedReduce(store, f"{prefix}.pre0", c_pp, c_node,
                                         affine=True, rng=rng)
        else:
            self.pre0 = _ReluConvNorm(store, f"{prefix}.pre0", c_pp, c_node,
                                      affine=True, rng=rng)
        self.pre1 = _ReluConvNorm(store, f"{prefix}.pre1", c_p, c_node,
                                  affine=True, rng=rng)
        alloc = _cell_allocation(genotype, allocation, c_node, ablation_mode)
        self.nodes = []
        by_node = {}
        for a in alloc.entries:
            if a.cell_type == cell_type:
                by_node.setdefault(a.node, []).append(a)
        for node in sorted(by_node):
            entries = []
            for idx, a in enumerate(by_node[node]):
                stride = 2 if cell_type == "reduce" and a.source < 2 else 1
                entries.append(_Entry(store, f"{prefix}.n{node}e{idx}", a.kind,
                                      a.source, stride, c_node, a.op_channels,
                                      a.skip_channels, rng, sepconv_repeats))
            self.nodes.append(entries)
        self.num_inputs = 2
        self.out_channels = len(self.nodes) * c_node

    def forward(self, s0, s1):
        states = [self.pre0(s0), self.pre1(s1)]
        for entries in self.nodes:
            acc = None
            for entry in entries:
                y = entry(states[entry.source])
                acc = y if acc is None else ad.add(acc, y)
            states.append(acc)
        return ad.concat_channels(states[self.num_inputs:])


class TargetNet:
    def __init__(self, genotype, allocation, layout, in_channels=1,
                 ablation_mode="full", rng=None, sepconv_repeats=1):
        if ablation_mode not in ABLATION_MODES:
            raise ConfigError(f"unknown ablation mode {ablation_mode!r}; "
                              f"expected one of {ABLATION_MODES}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.genotype = genotype
        self.allocation = allocation
        self.layout = layout
        self.ablation_mode = ablation_mode
        self.in_channels = in_channels
        self.store = ad.ParamStore()

        from .spaces import _conv_param
        c = layout.init_channels
        self.stem_kernel = _conv_param(self.store, "stem.conv", (c, in_channels, 3, 3), rng)
        self.stem_scale = self.store.create("stem.norm.scale", np.ones(c))
        self.stem_shift = self.store.create("stem.norm.shift", np.zeros(c))

        self.cells = []
        c_pp, c_p = c, c
        c_node = c
        reduction_prev = False
        for idx, kind in enumerate(layout.cell_sequence):
            if kind == "reduce":
                c_node *= 2
            cell = TargetCell(self.store, f"cell{idx}", genotype, allocation, kind,
                              c_pp, c_p, c_node, reduction_prev, ablation_mode,
                              rng=rng, sepconv_repeats=sepconv_repeats)
            self.cells.append(cell)
            reduction_prev = kind == "reduce"
            c_pp, c_p = c_p, cell.out_channels
        self.classifier_w = self.store.create(
            "classifier.w", rng.normal(0.0, 0.01, (layout.num_classes, c_p)))
        self.classifier_b = self.store.create(
            "classifier.b", np.zeros(layout.num_classes))

    def forward(self, images):
        if images.data.ndim != 4 or images.data.shape[1] != self.in_channels:
            raise ConfigError(f"expected (b, {self.in_channels}, h, w) images, "
                              f"got {images.data.shape}")
        h, w = images.data.shape[2:]
        if h % 4 or w % 4 or h < 4 or w < 4:
            raise ConfigError(f"spatial size {h}x{w} too small for two reductions")
        y = ad.conv2d(images, self.stem_kernel, padding=1)
        s0 = s1 = ad.normalize(y, affine=True, scale=self.stem_scale,
                               shift=self.stem_shift)
        for cell in self.cells:
            s0, s1 = s1, cell.forward(s0, s1)
        pooled = ad.global_avg_pool(s1)
        return ad.linear(pooled, self.classifier_w, self.classifier_b)

    def parameters(self):
        return self.store.tensors()

    def named_arrays(self):
        return {name: t.data for name, t in self.store.items()}

    def load_arrays(self, arrays):
        for name, t in self.store.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint missing tensor {name!r}")
            if arrays[name].shape != t.data.shape:
                raise ConfigError(f"checkpoint tensor {name!r} has shape "
                                  f"{arrays[name].shape}, expected {t.data.shape}")
            t.data = arrays[name].astype(t.data.dtype)


def build_target(genotype, allocation, layout, ablation_mode="full",
                 in_channels=1, rng=None, sepconv_repeats=1):
    return TargetNet(genotype, allocation, layout, in_channels=in_channels,
                     ablation_mode=ablation_mode, rng=rng,
                     sepconv_repeats=sepconv_repeats)


def train_target(net, dataset, config, clock=time.perf_counter):
    """Train the target network; returns (trace, (mean, std) normalization stats)."""
    config.validate()
    if dataset.class_count != net.layout.num_classes:
        raise ConfigError(f"dataset has {dataset.class_count} classes, network "
                          f"expects {net.layout.num_classes}")
    ss = np.random.SeedSequence(config.seed)
    shuffle_ss, split_ss = ss.spawn(2)
    rng_shuffle = np.random.default_rng(shuffle_ss)

    train_part, val_part = split(dataset, config.split_fraction, split_ss)
    mean, std = norm_stats(train_part)
    tr_images = normalized_images(train_part, mean, std)
    va_images = normalized_images(val_part, mean, std)
    tr_labels, va_labels = train_part.labels, val_part.labels

    opt = SGD(net.parameters(), momentum=config.momentum,
              weight_decay=config.weight_decay)
    trace = TrainTrace()
    start = clock()
    for epoch in range(config.epochs):
        lr = cosine_lr(config.lr, epoch, config.epochs)
        order = rng_shuffle.permutation(len(tr_labels))
        losses, correct, seen = [], 0, 0
        for lo in range(0, len(order) - config.batch_size + 1, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            net.store.zero_grads()
            logits = net.forward(ad.Tensor(tr_images[idx]))
            loss = ad.cross_entropy(logits, tr_labels[idx])
            if not np.isfinite(float(loss.data)):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            ad.backward(loss)
            opt.step(lr)
            losses.append(float(loss.data))
            flat = logits.data.reshape(len(idx), -1)
            correct += int((flat.argmax(axis=1) == tr_labels[idx]).sum())
            seen += len(idx)
        val_loss, val_acc = evaluate_net(net, va_images, va_labels)
        trace.records.append(TrainRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            train_acc=correct / seen if seen else float("nan"),
            val_loss=val_loss,
            val_acc=val_acc,
            seconds=clock() - start,
        ))
    return trace, (mean, std)


def held_out_metrics(net, dataset, config):
    """(accuracy, loss) on the same validation part train_target used."""
    _shuffle_ss, split_ss = np.random.SeedSequence(config.seed).spawn(2)
    train_part, val_part = split(dataset, config.split_fraction, split_ss)
    mean, std = norm_stats(train_part)
    loss, acc = evaluate_net(net, normalized_images(val_part, mean, std),
                             val_part.labels)
    return acc, loss


def evaluate(net, dataset, stats=None):
    """Top-1 accuracy and mean loss; ``stats`` are the training-part
    normalization statistics (recomputed from ``dataset`` if omitted)."""
    if stats is None:
        stats = norm_stats(dataset)
    images = normalized_images(dataset, *stats)
    loss, acc = evaluate_net(net, images, dataset.labels)
    return acc, loss


def count_params_flops(net, image_size):
    """Exact parameter count and one-image multiply-add count."""
    h, w = (image_size, image_size) if isinstance(image_size, int) else image_size
    dummy = ad.Tensor(np.zeros((1, net.in_channels, h, w), dtype=np.float32))
    with ad.count_macs() as counter:
        net.forward(dummy)
    return net.store.num_params(), counter.macs
