"""Derived evaluation network: wiring, channel refill, ablations, training."""

from __future__ import annotations

import numpy as np
import pytest

from chansearch import autodiff as ad
from chansearch.data import generate_synthetic
from chansearch.errors import ConfigError
from chansearch.genotype import (Genotype, GenotypeEntry, allocate_channels,
                                 darts_s_allocation, full_width_allocation)
from chansearch.spaces import OperationKind, network_layout
from chansearch.targetnet import (TrainConfig, build_target, count_params_flops,
                                  evaluate, held_out_metrics, train_target)

from .oracles import count_conv_macs, rel_err


def _simple_genotype(strengths=(0.5, 0.5), space_id="S6",
                     kinds=(OperationKind.SEP_CONV_3, OperationKind.SEP_CONV_3)):
    """B=2 genotype: node 2 from inputs 0/1, node 3 from input 0 and node 2."""
    entries = (GenotypeEntry(2, 0, kinds[0], strengths[0]),
               GenotypeEntry(2, 1, kinds[1], strengths[1]),
               GenotypeEntry(3, 0, kinds[0], strengths[0]),
               GenotypeEntry(3, 2, kinds[1], strengths[1]))
    return Genotype(space_id, entries, entries)


def test_degenerate_equivalence_with_full_wiring():
    """Equal strengths allocate every entry the full budget, so the adaptive
    net and the no-refill ablation are the same network bit for bit."""
    geno = _simple_genotype((0.5, 0.5))
    layout = network_layout(1, 8, 3)
    alloc = allocate_channels(geno, 8)
    assert all(a.skip_channels == 0 for a in alloc.entries)
    a = build_target(geno, alloc, layout, ablation_mode="full",
                     rng=np.random.default_rng(21))
    b = build_target(geno, alloc, layout, ablation_mode="no_skip",
                     rng=np.random.default_rng(21))
    assert a.store.names() == b.store.names()
    for (_, ta), (_, tb) in zip(a.store.items(), b.store.items()):
        assert np.array_equal(ta.data, tb.data)
    x = np.random.default_rng(22).normal(size=(2, 1, 16, 16)).astype(np.float32)
    ya = a.forward(ad.Tensor(x)).data
    yb = b.forward(ad.Tensor(x)).data
    assert np.array_equal(ya, yb)
    assert float(np.abs(ya - yb).max()) == 0.0


def test_identity_refill_carries_source_channels():
    """With a refill, the entry output's tail channels are a pure copy of the
    source's leading channels (before the node sum touches them)."""
    geno = _simple_genotype((0.8, 0.4))
    layout = network_layout(1, 8, 3)
    alloc = allocate_channels(geno, 8)
    weak = [a for a in alloc.entries if a.cell_type == "normal" and a.node == 2][1]
    assert weak.skip_channels == 4  # ceil(0.5 * 8) = 4 op channels
    net = build_target(geno, alloc, layout, rng=np.random.default_rng(23))
    cell = net.cells[0]
    entry = cell.nodes[0][1]  # node 2, second entry (source 1)
    rng = np.random.default_rng(24)
    x = ad.Tensor(rng.normal(size=(2, 8, 16, 16)).astype(np.float32))
    y = entry(x)
    assert y.data.shape == (2, 8, 16, 16)
    tail = y.data[:, -weak.skip_channels:]
    assert np.array_equal(tail, x.data[:, :weak.skip_channels])


def test_strided_refill_uses_factorized_reduce():
    geno = _simple_genotype((0.9, 0.3))
    layout = network_layout(1, 8, 3)
    alloc = allocate_channels(geno, 8)
    net = build_target(geno, alloc, layout, rng=np.random.default_rng(25))
    reduce_cell = next(c for c in net.cells if c.cell_type == "reduce")
    strided_weak = reduce_cell.nodes[0][1]
    assert strided_weak.refill is not None
    x = ad.Tensor(np.random.default_rng(26)
                  .normal(size=(2, 16, 16, 16)).astype(np.float32))
    y = strided_weak(x)
    assert y.data.shape == (2, 16, 8, 8)


def test_node_width_conserved_for_all_modes():
    geno = _simple_genotype((0.7, 0.2))
    layout = network_layout(1, 8, 3)
    x = np.random.default_rng(27).normal(size=(2, 1, 16, 16)).astype(np.float32)
    for mode, alloc in (("full", allocate_channels(geno, 8)),
                        ("no_skip", full_width_allocation(geno, 8)),
                        ("no_channel", darts_s_allocation(geno, 8, fixed=8))):
        net = build_target(geno, alloc, layout, ablation_mode=mode,
                           rng=np.random.default_rng(28))
        y = net.forward(ad.Tensor(x))
        assert y.data.shape == (2, 3, 1, 1)


def test_ablation_modes_differ_when_allocation_is_uneven():
    geno = _simple_genotype((0.9, 0.2))
    layout = network_layout(1, 8, 3)
    alloc = allocate_channels(geno, 8)
    x = np.random.default_rng(29).normal(size=(2, 1, 16, 16)).astype(np.float32)
    outs = {}
    for mode in ("full", "no_skip", "no_channel"):
        net = build_target(geno, alloc, layout, ablation_mode=mode,
                           rng=np.random.default_rng(30))
        outs[mode] = net.forward(ad.Tensor(x)).data
    assert not np.array_equal(outs["full"], outs["no_skip"])
    assert not np.array_equal(outs["full"], outs["no_channel"])


def test_unknown_ablation_mode_rejected():
    geno = _simple_genotype()
    layout = network_layout(1, 8, 3)
    with pytest.raises(ConfigError):
        build_target(geno, allocate_channels(geno, 8), layout,
                     ablation_mode="bogus")


def test_allocation_recomputed_at_each_cell_width():
    """Reduction cells double the node width; the refill scales with it."""
    geno = _simple_genotype((0.8, 0.4))
    layout = network_layout(1, 8, 3)
    alloc = allocate_channels(geno, 8)
    net = build_target(geno, alloc, layout, rng=np.random.default_rng(31))
    normal0 = net.cells[0].nodes[0][1]
    reduce0 = next(c for c in net.cells if c.cell_type == "reduce").nodes[0][1]
    assert normal0.c_skip == 4   # C=8: 8 - ceil(0.5*8)
    assert reduce0.c_skip == 8   # C=16: 16 - ceil(0.5*16)
    last = net.cells[-1].nodes[0][1]
    assert last.c_skip == 16     # C=32 after two reductions


def test_params_and_flops_counted_exactly():
    geno = _simple_genotype((0.5, 0.5))
    layout = network_layout(1, 8, 3)
    net = build_target(geno, full_width_allocation(geno, 8), layout,
                       ablation_mode="no_skip", rng=np.random.default_rng(32))
    params, macs = count_params_flops(net, 16)
    assert params == sum(t.data.size for t in net.parameters())
    assert params > 0 and macs > 0
    # the stem alone contributes a known mac count
    assert macs > count_conv_macs(1, 8, 16, 16, 1, 3, 3)
    # macs scale with the square of the image side
    _, macs_small = count_params_flops(net, 8)
    assert macs_small < macs


def test_gradient_reaches_every_parameter():
    geno = _simple_genotype((0.8, 0.3))
    layout = network_layout(1, 8, 3)
    net = build_target(geno, allocate_channels(geno, 8), layout,
                       rng=np.random.default_rng(33))
    x = np.random.default_rng(34).normal(size=(4, 1, 16, 16)).astype(np.float32)
    loss = ad.cross_entropy(net.forward(ad.Tensor(x)), np.array([0, 1, 2, 0]))
    ad.backward(loss)
    missing = [name for name, t in net.store.items() if t.grad is None]
    assert missing == []


def test_train_target_improves_and_reports_metrics():
    ds = generate_synthetic(seed=40, num_samples=120, classes=3, size=8)
    geno = _simple_genotype((0.6, 0.4))
    layout = network_layout(1, 8, 3)
    net = build_target(geno, allocate_channels(geno, 8), layout,
                       rng=np.random.default_rng(41))
    cfg = TrainConfig(epochs=3, batch_size=16, seed=0)
    trace, stats = train_target(net, ds, cfg, clock=lambda: 0.0)
    assert len(trace.records) == 3
    assert trace.records[-1].train_loss < trace.records[0].train_loss
    csv = trace.to_csv()
    assert csv.splitlines()[0] == "epoch,train_loss,train_acc,val_loss,val_acc,seconds"
    acc, loss = held_out_metrics(net, ds, cfg)
    assert acc == pytest.approx(trace.records[-1].val_acc)
    assert loss == pytest.approx(trace.records[-1].val_loss, rel=1e-5)
    acc_all, _ = evaluate(net, ds, stats)
    assert 0.0 <= acc_all <= 1.0


def test_train_target_validates_inputs():
    ds = generate_synthetic(seed=42, num_samples=40, classes=2, size=8)
    geno = _simple_genotype()
    layout = network_layout(1, 8, 3)  # expects 3 classes
    net = build_target(geno, allocate_channels(geno, 8), layout,
                       rng=np.random.default_rng(43))
    with pytest.raises(ConfigError):
        train_target(net, ds, TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()


def test_target_checkpoint_roundtrip(tmp_path):
    from chansearch.checkpoint import load_checkpoint, save_checkpoint
    geno = _simple_genotype((0.7, 0.5))
    layout = network_layout(1, 8, 3)
    alloc = allocate_channels(geno, 8)
    net = build_target(geno, alloc, layout, rng=np.random.default_rng(44))
    path = tmp_path / "t.bin"
    save_checkpoint(path, net.named_arrays())
    other = build_target(geno, alloc, layout, rng=np.random.default_rng(45))
    other.load_arrays(load_checkpoint(path))
    x = np.random.default_rng(46).normal(size=(2, 1, 16, 16)).astype(np.float32)
    assert np.array_equal(net.forward(ad.Tensor(x)).data,
                          other.forward(ad.Tensor(x)).data)
