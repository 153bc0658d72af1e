"""Discrete architecture derivation and channel allocation.

After search, each intermediate node keeps its two strongest incoming
operations (from distinct source nodes), carrying the softmax strength along
verbatim. Channel allocation then gives each retained operation
ceil((p / p_max_of_node) * C) of the node's C channels, with the remainder
refilled by an identity path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError
from .spaces import OperationKind, get_space, op_from_name

CELL_TYPES = ("normal", "reduce")

GENOTYPE_MAGIC = "genotype v1"
ALLOCATION_MAGIC = "allocation v1"


@dataclass(frozen=True)
class GenotypeEntry:
    node: int
    source: int
    kind: OperationKind
    strength: float


@dataclass(frozen=True)
class Genotype:
    space_id: str
    normal: tuple
    reduce: tuple

    def entries(self, cell_type):
        if cell_type not in CELL_TYPES:
            raise ConfigError(f"unknown cell type {cell_type!r}")
        return self.normal if cell_type == "normal" else self.reduce

    def all_entries(self):
        return list(self.normal) + list(self.reduce)

    def nodes(self):
        return sorted({e.node for e in self.normal})


@dataclass(frozen=True)
class AllocationEntry:
    cell_type: str
    node: int
    source: int
    kind: OperationKind
    total: int
    op_channels: int
    skip_channels: int


@dataclass(frozen=True)
class ChannelAllocation:
    mode: str  # "aca" | "darts_s" | "darts_baseline"
    fixed: int
    entries: tuple

    def for_entry(self, cell_type, node, source, kind):
        for a in self.entries:
            if (a.cell_type, a.node, a.source, a.kind) == (cell_type, node, source, kind):
                return a
        raise ConfigError(f"no allocation for {cell_type} node={node} src={source} op={kind}")


def derive_genotype(arch, space, topology, exclude_skip=True):
    """Top-2 distinct-source selection per node from trained architecture params.

    Zero is never a candidate. SkipConnect is excluded when ``exclude_skip``
    (channel-allocation regime); the plain baseline keeps it. Ties break on
    lower operation index, then lower source index.
    """
    candidates_ok = [k for k in space.operations
                     if k is not OperationKind.ZERO
                     and not (exclude_skip and k is OperationKind.SKIP)]
    if not candidates_ok:
        raise ConfigError(f"space {space.id} has no derivable operations")

    cells = {}
    for cell_type in CELL_TYPES:
        strength = arch.strength_matrix(cell_type)
        entries = []
        for j in topology.intermediate_nodes():
            best = []  # (strength, source, op_index, kind) per incoming edge
            for e, (i, _) in topology.edges_into(j):
                edge_best = None
                for k, kind in enumerate(space.operations):
                    if kind not in candidates_ok:
                        continue
                    p = float(strength[e, k])
                    if edge_best is None or p > edge_best[0]:
                        edge_best = (p, i, k, kind)
                best.append(edge_best)
            if len(best) < 2:
                raise ConfigError(f"node {j} has fewer than two incoming edges")
            # top-2 by strength; ties prefer lower source index (stable sort on -p)
            best.sort(key=lambda t: (-t[0], t[1]))
            chosen = sorted(best[:2], key=lambda t: t[1])
            entries.extend(GenotypeEntry(j, src, kind, p) for p, src, _, kind in chosen)
        cells[cell_type] = tuple(entries)
    return Genotype(space.id, cells["normal"], cells["reduce"])


def allocate_channels(genotype, channels_per_node):
    """Strength-proportional split of each node's channel budget.

    ``channels_per_node`` maps intermediate node index to its total channel
    count C (an int applies to every node). Each retained entry gets
    ceil((p / p_max) * C) operation channels; the rest is the identity refill.
    """
    entries = []
    for cell_type in CELL_TYPES:
        cell_entries = genotype.entries(cell_type)
        by_node = {}
        for e in cell_entries:
            by_node.setdefault(e.node, []).append(e)
        for node in sorted(by_node):
            group = by_node[node]
            c_total = channels_per_node[node] if hasattr(channels_per_node, "__getitem__") \
                else int(channels_per_node)
            if c_total < 1:
                raise ConfigError(f"node {node} needs at least one channel")
            p_max = max(e.strength for e in group)
            for e in group:
                if not (0.0 < e.strength <= 1.0):
                    raise ConfigError(f"strength {e.strength} outside (0, 1]")
                c_op = math.ceil((float(e.strength) / float(p_max)) * c_total)
                c_op = min(max(c_op, 1), c_total)
                entries.append(AllocationEntry(cell_type, e.node, e.source, e.kind,
                                               c_total, c_op, c_total - c_op))
    return ChannelAllocation("aca", 0, tuple(entries))


def darts_s_allocation(genotype, channels_per_node, fixed=8):
    """The non-adaptive baseline: every entry cedes ``fixed`` channels to the
    refill path, clamped to half the budget so the operation keeps >= C/2."""
    entries = []
    for cell_type in CELL_TYPES:
        for e in genotype.entries(cell_type):
            c_total = channels_per_node[e.node] if hasattr(channels_per_node, "__getitem__") \
                else int(channels_per_node)
            if c_total < 2:
                raise ConfigError(f"node {e.node} needs at least two channels")
            c_skip = min(int(fixed), c_total // 2)
            entries.append(AllocationEntry(cell_type, e.node, e.source, e.kind,
                                           c_total, c_total - c_skip, c_skip))
    return ChannelAllocation("darts_s", int(fixed), tuple(entries))


def full_width_allocation(genotype, channels_per_node):
    """Plain wiring: every retained operation gets the full budget, no refill."""
    entries = []
    for cell_type in CELL_TYPES:
        for e in genotype.entries(cell_type):
            c_total = channels_per_node[e.node] if hasattr(channels_per_node, "__getitem__") \
                else int(channels_per_node)
            entries.append(AllocationEntry(cell_type, e.node, e.source, e.kind,
                                           c_total, c_total, 0))
    return ChannelAllocation("darts_baseline", 0, tuple(entries))


def skip_fraction(genotype):
    """Share of retained entries that are skip connections, both cell types."""
    entries = genotype.all_entries()
    skips = sum(1 for e in entries if e.kind is OperationKind.SKIP)
    return skips / len(entries)


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------

def serialize_genotype(genotype):
    lines = [GENOTYPE_MAGIC, f"space {genotype.space_id}"]
    for cell_type, header in (("normal", "normal:"), ("reduce", "reduce:")):
        lines.append(header)
        for e in genotype.entries(cell_type):
            lines.append(f"node={e.node} src={e.source} op={e.kind.value} "
                         f"p={e.strength:.6f}")
    return "\n".join(lines) + "\n"


def deserialize_genotype(text):
    lines = text.splitlines()
    if not lines or lines[0] != GENOTYPE_MAGIC:
        raise ParseError(f"expected header {GENOTYPE_MAGIC!r}", line=1)
    if len(lines) < 2 or not lines[1].startswith("space "):
        raise ParseError("expected 'space <id>'", line=2)
    space_id = lines[1][len("space "):].strip()
    space = get_space(space_id)  # validates the id
    cells = {"normal": [], "reduce": []}
    current = None
    for ln, raw in enumerate(lines[2:], start=3):
        line = raw.strip()
        if not line:
            continue
        if line in ("normal:", "reduce:"):
            current = line[:-1]
            continue
        if current is None:
            raise ParseError("entry before any cell-type header", line=ln)
        fields = {}
        for tok in line.split():
            if "=" not in tok:
                raise ParseError(f"malformed token {tok!r}", line=ln)
            key, val = tok.split("=", 1)
            fields[key] = val
        try:
            node = int(fields["node"])
            src = int(fields["src"])
            kind = op_from_name(fields["op"])
            strength = float(fields["p"])
        except (KeyError, ValueError, ConfigError) as exc:
            raise ParseError(str(exc), line=ln) from None
        if kind not in space.operations:
            raise ParseError(f"operation {kind.value} not in space {space_id}", line=ln)
        if kind is OperationKind.ZERO:
            raise ParseError("Zero cannot be a retained operation", line=ln)
        if not (0.0 < strength <= 1.0):
            raise ParseError(f"strength {strength} outside (0, 1]", line=ln)
        if src >= node:
            raise ParseError(f"source {src} must precede node {node}", line=ln)
        cells[current].append(GenotypeEntry(node, src, kind, strength))

    for cell_type, entries in cells.items():
        by_node = {}
        for e in entries:
            by_node.setdefault(e.node, []).append(e)
        for node, group in by_node.items():
            if len(group) != 2:
                raise ParseError(f"{cell_type} node {node} has {len(group)} entries, "
                                 "expected 2")
            if group[0].source == group[1].source:
                raise ParseError(f"{cell_type} node {node} entries share source "
                                 f"{group[0].source}")
    return Genotype(space_id, tuple(cells["normal"]), tuple(cells["reduce"]))


def serialize_allocation(allocation, genotype):
    lines = [ALLOCATION_MAGIC, f"space {genotype.space_id}",
             f"mode {allocation.mode}" + (f" fixed={allocation.fixed}"
                                          if allocation.mode == "darts_s" else "")]
    for cell_type in CELL_TYPES:
        lines.append(f"{cell_type}:")
        for a in allocation.entries:
            if a.cell_type != cell_type:
                continue
            lines.append(f"node={a.node} src={a.source} op={a.kind.value} "
                         f"c={a.op_channels}/{a.total} skip={a.skip_channels}")
    return "\n".join(lines) + "\n"


def deserialize_allocation(text):
    lines = text.splitlines()
    if not lines or lines[0] != ALLOCATION_MAGIC:
        raise ParseError(f"expected header {ALLOCATION_MAGIC!r}", line=1)
    if len(lines) < 3 or not lines[1].startswith("space ") or not lines[2].startswith("mode "):
        raise ParseError("expected 'space <id>' then 'mode <mode>'", line=2)
    mode_fields = lines[2][len("mode "):].split()
    mode = mode_fields[0]
    fixed = 0
    for tok in mode_fields[1:]:
        if tok.startswith("fixed="):
            fixed = int(tok[len("fixed="):])
    if mode not in ("aca", "darts_s", "darts_baseline"):
        raise ParseError(f"unknown allocation mode {mode!r}", line=3)
    entries = []
    current = None
    for ln, raw in enumerate(lines[3:], start=4):
        line = raw.strip()
        if not line:
            continue
        if line in ("normal:", "reduce:"):
            current = line[:-1]
            continue
        if current is None:
            raise ParseError("entry before any cell-type header", line=ln)
        fields = dict(tok.split("=", 1) for tok in line.split() if "=" in tok)
        try:
            node, src = int(fields["node"]), int(fields["src"])
            kind = op_from_name(fields["op"])
            c_op, total = (int(v) for v in fields["c"].split("/"))
            c_skip = int(fields["skip"])
        except (KeyError, ValueError, ConfigError) as exc:
            raise ParseError(str(exc), line=ln) from None
        if c_op + c_skip != total or not (1 <= c_op <= total):
            raise ParseError(f"inconsistent channel split {c_op}+{c_skip}!={total}", line=ln)
        entries.append(AllocationEntry(current, node, src, kind, total, c_op, c_skip))
    return ChannelAllocation(mode, fixed, tuple(entries))


# ---------------------------------------------------------------------------
# DOT export
# ---------------------------------------------------------------------------

def export_dot(genotype, allocation):
    """One digraph text per cell type; only retained entries appear as
    labeled edges, plus unlabeled concat edges into the output node."""
    graphs = {}
    for cell_type in CELL_TYPES:
        lines = [f"digraph {cell_type} {{", "  rankdir=LR;",
                 '  in0 [shape=box]; in1 [shape=box]; out [shape=box];']
        nodes = sorted({e.node for e in genotype.entries(cell_type)})
        for j in nodes:
            lines.append(f"  n{j} [shape=circle];")
        for e in genotype.entries(cell_type):
            a = allocation.for_entry(cell_type, e.node, e.source, e.kind)
            src = f"in{e.source}" if e.source < 2 else f"n{e.source}"
            label = f"{e.kind.value} p={e.strength:.6f} c={a.op_channels}/{a.total}"
            lines.append(f'  {src} -> n{e.node} [label="{label}"];')
        for j in nodes:
            lines.append(f"  n{j} -> out;")
        lines.append("}")
        graphs[cell_type] = "\n".join(lines) + "\n"
    return graphs
