"""Cell and fusion-cell templates, network topology, and the discrete Genotype."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .primitives import CELL_OPS, FUSION_OPS, UP_OPS, PrimitiveKind

GENOTYPE_VERSION = 1
FUSION_CHANNELS = 48


@dataclass(frozen=True)
class CellTemplate:
    """Two input nodes, ``N`` intermediate nodes, output = concat of intermediates.

    Node ids: 0, 1 are the inputs i1, i2; 2.. are x1, x2, ...  Every
    intermediate node receives one edge from each earlier node.
    """
    is_reduction: bool = False
    num_nodes: int = 2
    num_inputs: int = 2

    @property
    def edges(self):
        out = []
        for dst in range(self.num_inputs, self.num_inputs + self.num_nodes):
            out.extend((src, dst) for src in range(dst))
        return tuple(out)

    @property
    def p(self):
        return len(self.edges)

    @property
    def q(self):
        return len(CELL_OPS)

    def edge_stride(self, e):
        src, _ = self.edges[e]
        return 2 if self.is_reduction and src < self.num_inputs else 1

    def node_name(self, n):
        return f"i{n + 1}" if n < self.num_inputs else f"x{n - self.num_inputs + 1}"

    def edge_name(self, e):
        src, dst = self.edges[e]
        return f"{self.node_name(src)}->{self.node_name(dst)}"


@dataclass(frozen=True)
class FusionEdge:
    src: int
    dst: int
    up: bool = False


@dataclass(frozen=True)
class FusionTemplate:
    """Dense multi-scale aggregation DAG over the stride-16/8/4 taps.

    Nodes 0-2 are the ``channels``-wide reductions of the stride-16, stride-8 and
    stride-4 taps.  Nodes 3-11 are the nine searched nodes:

        branch 16:  a1 = op(t16)            a2 = up(a1)          a3 = up(a2)
        branch 8:   b1 = op(t8) | op(a2)    b2 = op(b1)          b3 = up(b2)
        branch 4:   c1 = op(t4) | op(a3) | op(b3)
                    c2 = op(c1) | op(t4)    c3 = op(c2)

    ``|`` is channel concatenation of the incoming edge outputs; every edge
    emits ``channels`` maps.  Output is a3 + b3 + c3 at stride 4.
    """
    edges: tuple = (
        FusionEdge(0, 3), FusionEdge(3, 4, up=True), FusionEdge(4, 5, up=True),
        FusionEdge(1, 6), FusionEdge(4, 6), FusionEdge(6, 7), FusionEdge(7, 8, up=True),
        FusionEdge(2, 9), FusionEdge(5, 9), FusionEdge(8, 9),
        FusionEdge(9, 10), FusionEdge(2, 10), FusionEdge(10, 11),
    )
    node_strides: tuple = (16, 8, 4, 16, 8, 4, 8, 8, 4, 4, 4, 4)
    outputs: tuple = (5, 8, 11)
    num_inputs: int = 3
    channels: int = FUSION_CHANNELS
    node_names: tuple = ("t16", "t8", "t4", "a1", "a2", "a3", "b1", "b2", "b3", "c1", "c2", "c3")

    @property
    def num_nodes(self):
        return len(self.node_strides) - self.num_inputs

    @property
    def E(self):
        return len(self.edges)

    @property
    def q(self):
        return len(FUSION_OPS)

    def candidates(self, e):
        return UP_OPS if self.edges[e].up else FUSION_OPS

    def valid_mask(self):
        """(E, q) boolean matrix of columns that name a real candidate."""
        m = np.zeros((self.E, self.q), dtype=bool)
        for e in range(self.E):
            m[e, :len(self.candidates(e))] = True
        return m

    def in_edges(self, node):
        return [e for e, ed in enumerate(self.edges) if ed.dst == node]

    def node_width(self, node):
        if node < self.num_inputs:
            return self.channels
        return self.channels * len(self.in_edges(node))

    def edge_name(self, e):
        ed = self.edges[e]
        return f"{self.node_names[ed.src]}->{self.node_names[ed.dst]}"

    def check(self):
        for e, ed in enumerate(self.edges):
            if ed.src >= ed.dst:
                raise ValueError(f"fusion edge {e} breaks topological order")
            s_src, s_dst = self.node_strides[ed.src], self.node_strides[ed.dst]
            if ed.up != (s_src == 2 * s_dst):
                raise ValueError(f"fusion edge {e}: up flag inconsistent with strides")
            if not ed.up and s_src != s_dst:
                raise ValueError(f"fusion edge {e}: stride mismatch")
            if ed.up and self.node_width(ed.src) != self.channels:
                raise ValueError(f"fusion up-edge {e} must read a single-edge node")
        for n in self.outputs:
            if self.node_strides[n] != 4 or self.node_width(n) != self.channels:
                raise ValueError("fusion outputs must be single-width stride-4 maps")


@dataclass(frozen=True)
class NetworkTopology:
    cells: int = 14
    reduction_indices: tuple = (1, 8)
    initial_channels: int = 8
    fusion_taps: tuple | None = (0, 7, 13)
    num_classes: int = 4
    stem_strides: tuple = (2, 2, 1)

    def __post_init__(self):
        object.__setattr__(self, "reduction_indices", tuple(sorted(self.reduction_indices)))
        if self.fusion_taps is not None:
            object.__setattr__(self, "fusion_taps", tuple(self.fusion_taps))
        self.validate()

    def validate(self):
        if self.cells < 1:
            raise ValueError("need at least one cell")
        if any(not 0 <= r < self.cells for r in self.reduction_indices):
            raise ValueError(f"reduction index out of range: {self.reduction_indices}")
        if self.initial_channels < 1 or self.num_classes < 2:
            raise ValueError("initial_channels >= 1 and num_classes >= 2 required")
        if self.fusion_taps is not None:
            if len(self.fusion_taps) != 3:
                raise ValueError("fusion needs exactly three taps")
            if any(not 0 <= t < self.cells for t in self.fusion_taps):
                raise ValueError(f"fusion tap out of range: {self.fusion_taps}")
            strides = tuple(self.cell_stride(t) for t in self.fusion_taps)
            if strides != (4, 8, 16):
                raise ValueError(f"fusion taps {self.fusion_taps} sit at strides {strides}, "
                                 "expected (4, 8, 16)")

    @property
    def stem_stride(self):
        return int(np.prod(self.stem_strides))

    def template(self, k):
        return CellTemplate(is_reduction=k in self.reduction_indices)

    def cell_stride(self, k):
        """Output stride of cell ``k`` relative to the input image."""
        n = sum(1 for r in self.reduction_indices if r <= k)
        return self.stem_stride * 2 ** n

    def cell_channels(self, k):
        """Per-node channel count of cell ``k`` (doubles at each reduction)."""
        n = sum(1 for r in self.reduction_indices if r <= k)
        return self.initial_channels * 2 ** n

    def echo(self):
        return {"cells": self.cells, "reduction_indices": list(self.reduction_indices),
                "fusion_taps": None if self.fusion_taps is None else list(self.fusion_taps),
                "initial_channels": self.initial_channels}

    @classmethod
    def from_echo(cls, echo, num_classes=4):
        taps = echo.get("fusion_taps")
        return cls(cells=echo["cells"], reduction_indices=tuple(echo["reduction_indices"]),
                   initial_channels=echo["initial_channels"],
                   fusion_taps=None if taps is None else tuple(taps), num_classes=num_classes)


class GenotypeError(ValueError):
    pass


@dataclass(frozen=True)
class Genotype:
    """Discrete architecture: one op name per edge of every cell and the fusion cell."""
    cells: tuple
    fusion: tuple | None
    topology: dict = field(compare=True, hash=False)
    version: int = GENOTYPE_VERSION

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(tuple(PrimitiveKind(o).value for o in c)
                                                for c in self.cells))
        if self.fusion is not None:
            object.__setattr__(self, "fusion",
                               tuple(PrimitiveKind(o).value for o in self.fusion))

    def pruned_edges(self):
        """(cell, edge) pairs whose chosen op is the zero operation."""
        return [(k, e) for k, c in enumerate(self.cells) for e, o in enumerate(c) if o == "zero"]

    def to_dict(self):
        return {"version": self.version, "topology": self.topology,
                "cells": [list(c) for c in self.cells],
                "fusion": None if self.fusion is None else list(self.fusion)}

    def matches(self, topology: NetworkTopology):
        return self.topology == topology.echo()


def genotype_serialize(g: Genotype) -> str:
    """Canonical JSON text: sorted keys, LF endings, trailing newline."""
    return json.dumps(g.to_dict(), sort_keys=True, indent=2) + "\n"


def genotype_parse(text: str) -> Genotype:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenotypeError(f"genotype is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise GenotypeError("genotype must be a JSON object")
    missing = {"version", "topology", "cells", "fusion"} - set(obj)
    if missing:
        raise GenotypeError(f"genotype missing keys: {sorted(missing)}")
    if obj["version"] != GENOTYPE_VERSION:
        raise GenotypeError(f"genotype version {obj['version']} != {GENOTYPE_VERSION}")
    topo = NetworkTopology.from_echo(obj["topology"])
    cells = obj["cells"]
    if len(cells) != topo.cells:
        raise GenotypeError(f"expected {topo.cells} cells, found {len(cells)}")
    for k, ops in enumerate(cells):
        tpl = topo.template(k)
        if len(ops) != tpl.p:
            raise GenotypeError(f"cell {k}: expected {tpl.p} edges, found {len(ops)} "
                                f"(missing edge {tpl.edge_name(min(len(ops), tpl.p - 1))})")
        for e, name in enumerate(ops):
            if name not in {o.value for o in CELL_OPS}:
                raise GenotypeError(f"cell {k} edge {e} ({tpl.edge_name(e)}): unknown op {name!r}")
    fusion = obj["fusion"]
    if (fusion is None) != (topo.fusion_taps is None):
        raise GenotypeError("fusion choices present iff the topology has fusion taps")
    if fusion is not None:
        ft = FusionTemplate()
        if len(fusion) != ft.E:
            raise GenotypeError(f"fusion: expected {ft.E} edges, found {len(fusion)}")
        for e, name in enumerate(fusion):
            if name not in {o.value for o in ft.candidates(e)}:
                raise GenotypeError(f"fusion edge {e} ({ft.edge_name(e)}): unknown op {name!r}")
    return Genotype(cells=tuple(tuple(c) for c in cells),
                    fusion=None if fusion is None else tuple(fusion),
                    topology=obj["topology"])


def random_genotype(topology: NetworkTopology, rng) -> Genotype:
    """Uniform op choice on every edge (candidate set of that edge)."""
    cells = []
    for k in range(topology.cells):
        tpl = topology.template(k)
        cells.append(tuple(CELL_OPS[i].value for i in rng.integers(0, tpl.q, tpl.p)))
    fusion = None
    if topology.fusion_taps is not None:
        ft = FusionTemplate()
        fusion = tuple(ft.candidates(e)[rng.integers(0, len(ft.candidates(e)))].value
                       for e in range(ft.E))
    return Genotype(cells=tuple(cells), fusion=fusion, topology=topology.echo())


def uniform_genotype(topology: NetworkTopology, cell_op, fusion_op="conv1x1",
                     up_op="bilinear_upsample_x2") -> Genotype:
    cells = tuple((cell_op,) * topology.template(k).p for k in range(topology.cells))
    fusion = None
    if topology.fusion_taps is not None:
        ft = FusionTemplate()
        fusion = tuple(up_op if ed.up else fusion_op for ed in ft.edges)
    return Genotype(cells=cells, fusion=fusion, topology=topology.echo())


def _cell_connected(tpl: CellTemplate, ops):
    live = [True] * tpl.num_inputs + [False] * tpl.num_nodes
    for e, (src, dst) in enumerate(tpl.edges):
        if ops[e] != "zero" and live[src]:
            live[dst] = True
    return any(live[tpl.num_inputs:])


def decode(arch, ggm=None, mode="edge_similarity", cascade=False) -> Genotype:
    """Per-edge argmax (lowest index wins ties) of the GGM-updated cell logits.

    Cells whose output would not depend on their inputs get a skip on the
    input edge with the highest zero-op score.  The fusion cell decodes from
    its own logits over each edge's valid candidates.
    """
    from .ggm import updated_cell_logits

    topo = arch.topology
    mats = updated_cell_logits(arch, ggm, mode=mode, cascade=cascade)
    zero_col = CELL_OPS.index(PrimitiveKind.ZERO)
    skip_col = CELL_OPS.index(PrimitiveKind.SKIP)
    cells = []
    for k, m in enumerate(mats):
        m = np.asarray(m.data if hasattr(m, "data") else m)
        choice = [int(np.argmax(row)) for row in m]
        tpl = topo.template(k)
        ops = [CELL_OPS[i].value for i in choice]
        if not _cell_connected(tpl, ops):
            cand = [e for e, (src, _) in enumerate(tpl.edges) if src < tpl.num_inputs]
            best = max(cand, key=lambda e: (m[e, zero_col], -e))
            ops[best] = CELL_OPS[skip_col].value
        cells.append(tuple(ops))
    fusion = None
    if arch.fusion_logits is not None:
        ft = FusionTemplate()
        f = arch.fusion_logits.data
        fusion = tuple(ft.candidates(e)[int(np.argmax(f[e, :len(ft.candidates(e))]))].value
                       for e in range(ft.E))
    return Genotype(cells=tuple(cells), fusion=fusion, topology=topo.echo())
