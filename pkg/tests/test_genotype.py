"""Discrete derivation, channel allocation, and the text formats."""

from __future__ import annotations

import math

import numpy as np
import pytest

from chansearch.errors import ConfigError, ParseError
from chansearch.genotype import (Genotype, GenotypeEntry, allocate_channels,
                                 darts_s_allocation, derive_genotype,
                                 deserialize_allocation, deserialize_genotype,
                                 export_dot, full_width_allocation,
                                 serialize_allocation, serialize_genotype,
                                 skip_fraction)
from chansearch.spaces import OperationKind, build_topology, get_space
from chansearch.supernet import ArchParams

from .oracles import allocate_naive, top2_distinct_sources_naive


def _random_arch(space, topology, rng, scale=2.0):
    shape = (topology.num_edges, space.size)
    return ArchParams(topology, space,
                      normal=rng.normal(0.0, scale, shape),
                      reduce=rng.normal(0.0, scale, shape))


def _genotype_one_node(strengths, kind=OperationKind.SEP_CONV_3, space_id="S6"):
    entries = tuple(GenotypeEntry(2, src, kind, p) for src, p in enumerate(strengths))
    return Genotype(space_id, entries, entries)


# ---------------------------------------------------------------------------
# derivation
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("space_id", ["S", "S5", "S6", "S7"])
def test_derivation_matches_bruteforce(space_id):
    space = get_space(space_id)
    topology = build_topology(4)
    rng = np.random.default_rng(42)
    for _ in range(100):
        arch = _random_arch(space, topology, rng)
        geno = derive_genotype(arch, space, topology, exclude_skip=True)
        for cell_type in ("normal", "reduce"):
            strength = arch.strength_matrix(cell_type)
            allowed = [(k, kind) for k, kind in enumerate(space.operations)
                       if kind not in (OperationKind.ZERO, OperationKind.SKIP)]
            got = {(e.node, e.source, e.kind) for e in geno.entries(cell_type)}
            want = set()
            for j in topology.intermediate_nodes():
                edge_best = {}
                node_edges = []
                for e, (i, _) in topology.edges_into(j):
                    ps = [(float(strength[e, k]), k) for k, _ in allowed]
                    p, k = max(ps, key=lambda t: (t[0], -t[1]))
                    edge_best[e] = (p, k, i)
                    node_edges.append(e)
                for p, k, src in top2_distinct_sources_naive(edge_best, node_edges):
                    want.add((j, src, space.operations[k]))
            assert got == want


def test_derivation_never_selects_zero_or_skip():
    space = get_space("S")
    topology = build_topology(4)
    rng = np.random.default_rng(7)
    # bias hard toward the Zero and SkipConnect columns
    shape = (topology.num_edges, space.size)
    mat = rng.normal(0.0, 0.1, shape)
    mat[:, space.index_of(OperationKind.ZERO)] = 10.0
    mat[:, space.index_of(OperationKind.SKIP)] = 9.0
    arch = ArchParams(topology, space, normal=mat, reduce=mat.copy())
    geno = derive_genotype(arch, space, topology, exclude_skip=True)
    kinds = {e.kind for e in geno.all_entries()}
    assert OperationKind.ZERO not in kinds
    assert OperationKind.SKIP not in kinds


def test_derivation_keeps_skip_when_asked():
    space = get_space("S")
    topology = build_topology(4)
    shape = (topology.num_edges, space.size)
    mat = np.zeros(shape)
    mat[:, space.index_of(OperationKind.SKIP)] = 5.0
    arch = ArchParams(topology, space, normal=mat, reduce=mat.copy())
    geno = derive_genotype(arch, space, topology, exclude_skip=False)
    assert all(e.kind is OperationKind.SKIP for e in geno.all_entries())
    assert skip_fraction(geno) == 1.0


def test_derivation_strengths_are_softmax_values():
    space = get_space("S6")
    topology = build_topology(4)
    rng = np.random.default_rng(8)
    arch = _random_arch(space, topology, rng)
    geno = derive_genotype(arch, space, topology)
    strength = arch.strength_matrix("normal")
    for e in geno.entries("normal"):
        edge = next(en for en, (i, j) in enumerate(topology.edges)
                    if i == e.source and j == e.node)
        k = space.index_of(e.kind)
        assert math.isclose(e.strength, float(strength[edge, k]), rel_tol=1e-12)
        assert 0.0 < e.strength <= 1.0


def test_derivation_tie_breaks_low_op_then_low_source():
    space = get_space("S6")
    topology = build_topology(1)  # one node, edges (0,2) and (1,2)
    mat = np.zeros((topology.num_edges, space.size))  # all strengths equal
    arch = ArchParams(topology, space, normal=mat, reduce=mat.copy())
    geno = derive_genotype(arch, space, topology)
    for e in geno.all_entries():
        assert e.kind is space.operations[0]  # lowest op index wins the edge
    assert [e.source for e in geno.entries("normal")] == [0, 1]


def test_derivation_shift_invariance():
    space = get_space("S6")
    topology = build_topology(4)
    rng = np.random.default_rng(9)
    base = rng.normal(0.0, 2.0, (topology.num_edges, space.size))
    a1 = ArchParams(topology, space, normal=base, reduce=base.copy())
    a2 = ArchParams(topology, space, normal=base + 57.0, reduce=base + 57.0)
    g1 = derive_genotype(a1, space, topology)
    g2 = derive_genotype(a2, space, topology)
    pick = lambda g: [(e.node, e.source, e.kind) for e in g.all_entries()]
    assert pick(g1) == pick(g2)


def test_distinct_sources_per_node():
    space = get_space("S6")
    topology = build_topology(4)
    rng = np.random.default_rng(10)
    for _ in range(20):
        geno = derive_genotype(_random_arch(space, topology, rng), space, topology)
        for cell_type in ("normal", "reduce"):
            by_node = {}
            for e in geno.entries(cell_type):
                by_node.setdefault(e.node, []).append(e.source)
            for node, sources in by_node.items():
                assert len(sources) == 2
                assert sources[0] != sources[1]
                assert all(s < node for s in sources)


# ---------------------------------------------------------------------------
# channel allocation
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("total", [4, 8, 16, 36])
def test_allocation_matches_ceiling_oracle_exhaustively(total):
    for r in range(1, 101):
        ratio = r / 100.0
        p_max = 0.5
        geno = _genotype_one_node([p_max, p_max * ratio])
        alloc = allocate_channels(geno, total)
        want = allocate_naive([p_max, p_max * ratio], total)
        for cell_type in ("normal", "reduce"):
            got = [(a.op_channels, a.skip_channels) for a in alloc.entries
                   if a.cell_type == cell_type]
            assert got == want
            assert all(op + skip == total for op, skip in got)
            # the strongest entry owns the whole budget
            assert got[0] == (total, 0)


def test_allocation_worked_case():
    geno = _genotype_one_node([0.4, 0.3])
    alloc = allocate_channels(geno, 16)
    normal = [(a.op_channels, a.skip_channels) for a in alloc.entries
              if a.cell_type == "normal"]
    assert normal == [(16, 0), (12, 4)]


def test_allocation_monotone_in_strength():
    for total in (4, 8, 16, 36):
        prev = 0
        for r in range(1, 101):
            geno = _genotype_one_node([0.9, 0.9 * r / 100.0])
            weak = [a for a in allocate_channels(geno, total).entries
                    if a.cell_type == "normal"][1]
            assert weak.op_channels >= prev
            prev = weak.op_channels


def test_allocation_strengths_not_renormalized():
    # identical ratios with different absolute strengths allocate identically
    a1 = allocate_channels(_genotype_one_node([0.8, 0.4]), 16)
    a2 = allocate_channels(_genotype_one_node([0.2, 0.1]), 16)
    split = lambda a: [(x.op_channels, x.skip_channels) for x in a.entries]
    assert split(a1) == split(a2)


def test_allocation_per_node_budgets():
    entries = (GenotypeEntry(2, 0, OperationKind.SEP_CONV_3, 0.4),
               GenotypeEntry(2, 1, OperationKind.SEP_CONV_5, 0.2),
               GenotypeEntry(3, 0, OperationKind.DIL_CONV_3, 0.5),
               GenotypeEntry(3, 2, OperationKind.DIL_CONV_5, 0.5))
    geno = Genotype("S6", entries, entries)
    alloc = allocate_channels(geno, {2: 8, 3: 16})
    normal = [a for a in alloc.entries if a.cell_type == "normal"]
    assert [(a.node, a.op_channels, a.skip_channels) for a in normal] == [
        (2, 8, 0), (2, 4, 4), (3, 16, 0), (3, 16, 0)]


def test_allocation_rejects_bad_strength():
    with pytest.raises(ConfigError):
        allocate_channels(_genotype_one_node([0.5, 0.0]), 8)
    with pytest.raises(ConfigError):
        allocate_channels(_genotype_one_node([0.5, 1.5]), 8)


def test_darts_s_allocation_fixed_and_clamped():
    geno = _genotype_one_node([0.4, 0.3])
    alloc = darts_s_allocation(geno, 16, fixed=8)
    assert alloc.mode == "darts_s" and alloc.fixed == 8
    assert all(a.skip_channels == 8 and a.op_channels == 8 for a in alloc.entries)
    # at C=4 the fixed hand-off clamps to C//2
    clamped = darts_s_allocation(geno, 4, fixed=8)
    assert all(a.skip_channels == 2 and a.op_channels == 2 for a in clamped.entries)


def test_full_width_allocation_has_no_refill():
    alloc = full_width_allocation(_genotype_one_node([0.4, 0.3]), 16)
    assert alloc.mode == "darts_baseline"
    assert all(a.op_channels == 16 and a.skip_channels == 0 for a in alloc.entries)


def test_skip_fraction_counts_both_cells():
    entries = (GenotypeEntry(2, 0, OperationKind.SKIP, 0.5),
               GenotypeEntry(2, 1, OperationKind.SEP_CONV_3, 0.5))
    geno = Genotype("S", entries, entries)
    assert skip_fraction(geno) == 0.5


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _random_genotype(rng, space_id="S6"):
    space = get_space(space_id)
    topology = build_topology(4)
    return derive_genotype(_random_arch(space, topology, rng), space, topology)


def test_genotype_roundtrip_50_random():
    rng = np.random.default_rng(77)
    for _ in range(50):
        geno = _random_genotype(rng)
        text = serialize_genotype(geno)
        back = deserialize_genotype(text)
        assert back.space_id == geno.space_id
        for cell_type in ("normal", "reduce"):
            got = [(e.node, e.source, e.kind, round(e.strength, 6))
                   for e in back.entries(cell_type)]
            want = [(e.node, e.source, e.kind, round(e.strength, 6))
                    for e in geno.entries(cell_type)]
            assert got == want
        # serialization is a fixed point after one round trip
        assert serialize_genotype(back) == text


def test_genotype_format_shape():
    text = serialize_genotype(_random_genotype(np.random.default_rng(3)))
    lines = text.splitlines()
    assert lines[0] == "genotype v1"
    assert lines[1] == "space S6"
    assert "normal:" in lines and "reduce:" in lines
    entry_lines = [l for l in lines if l.startswith("node=")]
    assert len(entry_lines) == 16  # 2 entries x 4 nodes x 2 cell types
    assert all(" p=0." in l or " p=1." in l for l in entry_lines)


@pytest.mark.parametrize("mutate,err_line", [
    (lambda t: t.replace("genotype v1", "genotype v9"), 1),
    (lambda t: t.replace("space S6", "space S99"), None),
    (lambda t: t.replace("op=SepConv3x3", "op=Zero", 1), None),
    (lambda t: t.replace("node=2 src=0", "node=2 src=2", 1), None),
])
def test_genotype_parse_rejections(mutate, err_line):
    rng = np.random.default_rng(5)
    space = get_space("S6")
    topology = build_topology(4)
    arch = ArchParams(topology, space,
                      normal=np.zeros((14, 4)), reduce=np.zeros((14, 4)))
    text = serialize_genotype(derive_genotype(arch, space, topology))
    with pytest.raises((ParseError, ConfigError)) as exc:
        deserialize_genotype(mutate(text))
    if err_line is not None:
        assert getattr(exc.value, "line", err_line) == err_line


def test_genotype_parse_duplicate_source_rejected():
    text = ("genotype v1\nspace S6\nnormal:\n"
            "node=2 src=0 op=SepConv3x3 p=0.500000\n"
            "node=2 src=0 op=SepConv5x5 p=0.400000\n"
            "reduce:\n"
            "node=2 src=0 op=SepConv3x3 p=0.500000\n"
            "node=2 src=1 op=SepConv5x5 p=0.400000\n")
    with pytest.raises(ParseError):
        deserialize_genotype(text)


def test_allocation_roundtrip_and_modes():
    rng = np.random.default_rng(11)
    geno = _random_genotype(rng)
    for alloc in (allocate_channels(geno, 16),
                  darts_s_allocation(geno, 16, fixed=8),
                  full_width_allocation(geno, 16)):
        text = serialize_allocation(alloc, geno)
        back = deserialize_allocation(text)
        assert back.mode == alloc.mode
        assert back.fixed == alloc.fixed
        assert back.entries == alloc.entries
    assert "mode darts_s fixed=8" in serialize_allocation(
        darts_s_allocation(geno, 16, fixed=8), geno)


def test_allocation_parse_rejects_inconsistent_split():
    geno = _random_genotype(np.random.default_rng(12))
    text = serialize_allocation(allocate_channels(geno, 16), geno)
    bad = text.replace("c=16/16 skip=0", "c=16/16 skip=1", 1)
    with pytest.raises(ParseError):
        deserialize_allocation(bad)


# ---------------------------------------------------------------------------
# DOT export
# ---------------------------------------------------------------------------

def test_export_dot_structure():
    geno = _random_genotype(np.random.default_rng(13))
    alloc = allocate_channels(geno, 16)
    graphs = export_dot(geno, alloc)
    assert set(graphs) == {"normal", "reduce"}
    for cell_type, text in graphs.items():
        assert text.startswith(f"digraph {cell_type} {{")
        assert text.rstrip().endswith("}")
        labeled = [l for l in text.splitlines() if "label=" in l]
        assert len(labeled) == len(geno.entries(cell_type))
        for e in geno.entries(cell_type):
            a = alloc.for_entry(cell_type, e.node, e.source, e.kind)
            assert f"{e.kind.value} p={e.strength:.6f} c={a.op_channels}/{a.total}" in text
        # every intermediate node feeds the concatenated output
        for j in {e.node for e in geno.entries(cell_type)}:
            assert f"n{j} -> out;" in text
