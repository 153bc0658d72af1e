"""Alternating first-order bilevel optimization of weights and architecture.

Each step updates the architecture parameters on a validation batch (weights
frozen), then the network weights on a training batch (architecture frozen).
Weights use SGD with momentum and a cosine-decayed learning rate; the
architecture uses Adam, both with decoupled-from-loss L2 weight decay added
to the gradient.
"""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import norm_stats, normalized_images, split
from .errors import ConfigError, DivergenceError
from .genotype import derive_genotype, skip_fraction
from .spaces import build_topology, get_space, network_layout
from .supernet import SuperNet


@dataclass
class SearchConfig:
    epochs: int = 50
    batch_size: int = 32
    w_lr: float = 0.05
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    alpha_lr: float = 3e-4
    alpha_weight_decay: float = 1e-3
    seed: int = 0
    split_fraction: float = 0.5
    n: int = 1
    num_intermediate: int = 4
    init_channels: int = 8
    sepconv_repeats: int = 1

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not (0.0 < self.split_fraction < 1.0):
            raise ConfigError(f"split fraction must be in (0,1), got {self.split_fraction}")
        for name in ("w_lr", "alpha_lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    skip_fraction: float
    seconds: float


@dataclass
class SearchTrace:
    records: list = field(default_factory=list)

    def to_csv(self):
        lines = ["epoch,train_loss,val_loss,val_acc,skip_fraction,seconds"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_loss:.6f},{r.val_loss:.6f},"
                         f"{r.val_acc:.6f},{r.skip_fraction:.6f},{r.seconds:.6f}")
        return "\n".join(lines) + "\n"


def cosine_lr(base, epoch, total_epochs):
    """Cosine decay from ``base`` at epoch 0 to 0 at the final epoch."""
    if total_epochs <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / (total_epochs - 1)))


class SGD:
    """Momentum SGD with L2 decay folded into the gradient (v = mu*v + g + wd*w)."""

    def __init__(self, params, momentum=0.0, weight_decay=0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        if lr == 0.0:
            return
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - lr * v


class Adam:
    def __init__(self, params, lr, betas=(0.5, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        if self.lr == 0.0:
            return
        self.t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _check_finite(loss, what):
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite {what} loss ({loss}); aborting run")


@contextmanager
def _frozen(params):
    """Temporarily drop ``requires_grad`` so backward skips these leaves."""
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


def alternating_step(net, train_batch, val_batch, w_opt, a_opt, w_lr):
    """One bilevel step: architecture on the val batch, weights on the train batch.

    The inactive parameter group is frozen during each half-step, which both
    prunes the recorded tape and skips its gradient computation.
    """
    vx, vy = val_batch
    tx, ty = train_batch
    if len(ty) == 0 or len(vy) == 0:
        raise ConfigError("empty batch")

    for t in net.arch.tensors():
        t.zero_grad()
    with _frozen(net.store.tensors()):
        val_loss = ad.cross_entropy(net.forward(ad.Tensor(vx)), vy)
        _check_finite(float(val_loss.data), "validation")
        ad.backward(val_loss)
    a_opt.step()

    net.store.zero_grads()
    with _frozen(net.arch.tensors()):
        train_loss = ad.cross_entropy(net.forward(ad.Tensor(tx)), ty)
        _check_finite(float(train_loss.data), "training")
        ad.backward(train_loss)
    w_opt.step(w_lr)

    return float(train_loss.data), float(val_loss.data)


def _batches(images, labels, batch_size, order):
    for lo in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[lo:lo + batch_size]
        yield images[idx], labels[idx]


def evaluate_net(net, images, labels, batch_size=64):
    """Mean loss and top-1 accuracy over fixed-order batches."""
    frozen = list(net.parameters())
    if hasattr(net, "arch"):
        frozen += net.arch.tensors()
    with _frozen(frozen):
        return _evaluate_batches(net, images, labels, batch_size)


def _evaluate_batches(net, images, labels, batch_size):
    total_loss, correct, seen = 0.0, 0, 0
    for lo in range(0, len(labels), batch_size):
        x = images[lo:lo + batch_size]
        y = labels[lo:lo + batch_size]
        logits = net.forward(ad.Tensor(x))
        loss = ad.cross_entropy(logits, y)
        flat = logits.data.reshape(len(y), -1)
        correct += int((flat.argmax(axis=1) == y).sum())
        total_loss += float(loss.data) * len(y)
        seen += len(y)
    return total_loss / seen, correct / seen


def run_search(dataset, space_id, config, clock=time.perf_counter):
    """Search the super-net on ``dataset``; returns (ArchParams, trace, net).

    Deterministic given ``config.seed``; ``clock`` exists so callers needing
    byte-stable traces can inject a fixed time source.
    """
    config.validate()
    space = get_space(space_id)
    if dataset.class_count < 2:
        raise ConfigError("dataset needs at least 2 classes")
    if len(dataset) < 2 * config.batch_size:
        raise ConfigError(f"dataset of {len(dataset)} samples is too small for "
                          f"batch size {config.batch_size}")

    ss = np.random.SeedSequence(config.seed)
    init_ss, shuffle_ss, split_seed = ss.spawn(3)
    rng_init = np.random.default_rng(init_ss)
    rng_shuffle = np.random.default_rng(shuffle_ss)

    w_part, a_part = split(dataset, config.split_fraction, split_seed)
    mean, std = norm_stats(w_part)
    w_images = normalized_images(w_part, mean, std)
    a_images = normalized_images(a_part, mean, std)
    w_labels, a_labels = w_part.labels, a_part.labels

    layout = network_layout(config.n, config.init_channels, dataset.class_count)
    topology = build_topology(config.num_intermediate)
    net = SuperNet(layout, space, topology, in_channels=dataset.image_shape[0],
                   rng=rng_init, sepconv_repeats=config.sepconv_repeats)

    w_opt = SGD(net.parameters(), momentum=config.w_momentum,
                weight_decay=config.w_weight_decay)
    a_opt = Adam(net.arch.tensors(), lr=config.alpha_lr,
                 weight_decay=config.alpha_weight_decay)

    trace = SearchTrace()
    start = clock()
    for epoch in range(config.epochs):
        w_lr = cosine_lr(config.w_lr, epoch, config.epochs)
        w_order = rng_shuffle.permutation(len(w_labels))
        a_order = rng_shuffle.permutation(len(a_labels))
        train_losses = []
        a_iter = _batches(a_images, a_labels, config.batch_size, a_order)
        for tb in _batches(w_images, w_labels, config.batch_size, w_order):
            try:
                vb = next(a_iter)
            except StopIteration:
                a_order = rng_shuffle.permutation(len(a_labels))
                a_iter = _batches(a_images, a_labels, config.batch_size, a_order)
                vb = next(a_iter)
            t_loss, _ = alternating_step(net, tb, vb, w_opt, a_opt, w_lr)
            train_losses.append(t_loss)
        val_loss, val_acc = evaluate_net(net, a_images, a_labels)
        geno = derive_genotype(net.arch, space, topology, exclude_skip=False)
        trace.records.append(EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(train_losses)) if train_losses else float("nan"),
            val_loss=val_loss,
            val_acc=val_acc,
            skip_fraction=skip_fraction(geno) if space.has_skip else 0.0,
            seconds=clock() - start,
        ))
    return net.arch, trace, net
