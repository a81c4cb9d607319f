"""Supernet and discrete networks built from the cell / fusion templates.

Both share one forward implementation: an edge either holds the full candidate
list (mixed by a row of Z) or a single chosen op.  A discrete network derived
from a supernet reuses the supernet's weight objects, so a one-hot mask and
the derived network compute identical values.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .primitives import CELL_OPS, ConvBN, Op, PrimitiveKind, output_shape
from .searchspace import FusionTemplate, Genotype, NetworkTopology
from .tensor import Tensor

ZERO = PrimitiveKind.ZERO


def _node_sum(terms, shape):
    out = None
    for t in terms:
        out = t if out is None else T.add(out, t)
    return Tensor(np.zeros(shape)) if out is None else out


def _mix(z_row, ops, x, training):
    act = T.relu(x) if any(op.weights for op in ops) else None
    outs = [None if op.kind is ZERO else op(x, training, act) for op in ops]
    if all(o is None for o in outs):
        op = ops[0]
        return Tensor(np.zeros(output_shape(op.kind, x.shape, op.c_out, op.stride)))
    return T.weighted_sum(z_row, outs)


def _edge(ops, x, z, e, training):
    """Output of one edge, or None for a pruned (zero) discrete edge."""
    if len(ops) == 1:
        op = ops[0]
        return None if op.kind is ZERO else op(x, training)
    if z is None:
        raise ValueError("mixed edge needs a mask")
    return _mix(T.getrow(z, e), ops, x, training)


class Cell:
    def __init__(self, topology: NetworkTopology, k, c_pp, c_p, reduce_prev, rng, choice=None):
        self.k = k
        self.template = tpl = topology.template(k)
        c = self.channels = topology.cell_channels(k)
        self.pre0 = ConvBN(c_pp, c, 1, 2 if reduce_prev else 1, rng)
        self.pre1 = ConvBN(c_p, c, 1, 1, rng)
        self.edges = []
        for e in range(tpl.p):
            kinds = CELL_OPS if choice is None else (PrimitiveKind(choice[e]),)
            self.edges.append([Op(kind, c, c, tpl.edge_stride(e), rng) for kind in kinds])
        # discrete cells skip preprocessing whose input feeds only zero edges
        self.uses_input = [any(any(op.kind is not ZERO for op in self.edges[e])
                               for e, (src, _) in enumerate(tpl.edges) if src == i)
                           for i in range(tpl.num_inputs)]

    @property
    def mixed(self):
        return len(self.edges[0]) > 1

    def forward(self, s0, s1, z=None, training=True):
        tpl = self.template
        if z is not None and tuple(z.shape) != (tpl.p, len(CELL_OPS)):
            raise ValueError(f"cell {self.k}: mask shape {z.shape} != {(tpl.p, len(CELL_OPS))}")
        b, _, h, w = s1.shape
        s = 2 if tpl.is_reduction else 1
        states = [self.pre0(s0, training) if self.uses_input[0] else None,
                  self.pre1(s1, training) if self.uses_input[1] else None]
        for dst in range(tpl.num_inputs, tpl.num_inputs + tpl.num_nodes):
            terms = []
            for e, (src, d) in enumerate(tpl.edges):
                if d != dst:
                    continue
                x = states[src]
                if x is None:
                    continue
                y = _edge(self.edges[e], x, z, e, training)
                if y is not None:
                    terms.append(y)
            states.append(_node_sum(terms, (b, self.channels, h // s, w // s)))
        return T.concat(states[tpl.num_inputs:], axis=1)

    def parameters(self):
        out = []
        if self.uses_input[0]:
            out += self.pre0.parameters()
        if self.uses_input[1]:
            out += self.pre1.parameters()
        for ops in self.edges:
            for op in ops:
                out += op.parameters()
        return out


class FusionCell:
    def __init__(self, tap_channels, rng, choice=None):
        self.template = ft = FusionTemplate()
        ft.check()
        c = ft.channels
        self.reduce = [ConvBN(ch, c, 1, 1, rng) for ch in tap_channels]
        self.edges = []
        for e, ed in enumerate(ft.edges):
            kinds = ft.candidates(e) if choice is None else (PrimitiveKind(choice[e]),)
            c_in = ft.node_width(ed.src)
            self.edges.append([Op(kind, c_in, c, 1, rng) for kind in kinds])

    def forward(self, taps, z=None, training=True):
        """``taps`` ordered stride 4, 8, 16; returns the fused stride-4 map."""
        ft = self.template
        t4, t8, t16 = taps
        if not (t8.shape[2] * 2 == t4.shape[2] and t16.shape[2] * 2 == t8.shape[2]
                and t8.shape[3] * 2 == t4.shape[3] and t16.shape[3] * 2 == t8.shape[3]):
            raise ValueError(f"fusion taps are not at strides 4/8/16: "
                             f"{[t.shape for t in taps]}")
        if z is not None and tuple(z.shape) != (ft.E, ft.q):
            raise ValueError(f"fusion mask shape {z.shape} != {(ft.E, ft.q)}")
        nodes = [self.reduce[2](t16, training), self.reduce[1](t8, training),
                 self.reduce[0](t4, training)]
        for n in range(ft.num_inputs, len(ft.node_strides)):
            parts = [_edge(self.edges[e], nodes[ft.edges[e].src], z, e, training)
                     for e in ft.in_edges(n)]
            nodes.append(parts[0] if len(parts) == 1 else T.concat(parts, axis=1))
        out = nodes[ft.outputs[0]]
        for n in ft.outputs[1:]:
            out = T.add(out, nodes[n])
        return out

    def parameters(self):
        out = []
        for r in self.reduce:
            out += r.parameters()
        for ops in self.edges:
            for op in ops:
                out += op.parameters()
        return out


class Network:
    """Stem + cells + (fusion cell) + 1x1 classifier upsampled to input size.

    With ``genotype=None`` every edge carries all candidates (the supernet).
    """

    def __init__(self, topology: NetworkTopology, genotype: Genotype | None = None, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        if genotype is not None and not genotype.matches(topology):
            raise ValueError("genotype topology does not match the network topology")
        self.topology = topology
        self.genotype = genotype
        c0 = topology.initial_channels
        s = topology.stem_strides
        self.stem = [ConvBN(3, c0, 3, s[0], rng, relu_first=False, relu_after=True),
                     ConvBN(c0, c0, 3, s[1], rng, relu_first=False, relu_after=True),
                     ConvBN(c0, c0, 3, s[2], rng, relu_first=False, relu_after=True)]
        self.cells = []
        c_pp, c_p, st_pp, st_p = c0, c0, s[0] * s[1], s[0] * s[1] * s[2]
        for k in range(topology.cells):
            choice = None if genotype is None else genotype.cells[k]
            cell = Cell(topology, k, c_pp, c_p, st_p == 2 * st_pp, rng, choice)
            self.cells.append(cell)
            c_pp, c_p = c_p, cell.template.num_nodes * cell.channels
            st_pp, st_p = st_p, topology.cell_stride(k)
        self.fusion = None
        if topology.fusion_taps is not None:
            tap_ch = [self.cells[t].template.num_nodes * self.cells[t].channels
                      for t in topology.fusion_taps]
            self.fusion = FusionCell(tap_ch, rng, None if genotype is None else genotype.fusion)
            head_in = self.fusion.template.channels
        else:
            head_in = c_p
        n_cls = topology.num_classes
        self.head_w = Tensor(rng.normal(0, np.sqrt(1.0 / head_in), (n_cls, head_in, 1, 1)),
                             requires_grad=True, name="head_w")
        self.head_b = Tensor(np.zeros(n_cls), requires_grad=True, name="head_b")

    @property
    def is_supernet(self):
        return self.genotype is None

    def features(self, x, cell_masks=None, fusion_mask=None, training=True):
        x = T.as_tensor(x)
        h, w = x.shape[2:]
        if h % 16 or w % 16:
            raise ValueError(f"input extents {(h, w)} must be divisible by 16")
        a = self.stem[0](x, training)
        a = self.stem[1](a, training)
        s0, s1 = a, self.stem[2](a, training)
        outs = []
        for k, cell in enumerate(self.cells):
            z = None if cell_masks is None else cell_masks[k]
            s0, s1 = s1, cell.forward(s0, s1, z, training)
            outs.append(s1)
        if self.fusion is None:
            return s1
        taps = [outs[t] for t in self.topology.fusion_taps]
        return self.fusion.forward(taps, fusion_mask, training)

    def forward(self, x, cell_masks=None, fusion_mask=None, training=True):
        """Per-pixel class logits at input resolution."""
        if self.is_supernet and cell_masks is None:
            raise ValueError("supernet forward needs cell masks")
        f = self.features(x, cell_masks, fusion_mask, training)
        logits = T.conv2d(T.relu(f), self.head_w, self.head_b)
        return T.resize_bilinear(logits, T.as_tensor(x).shape[2:])

    __call__ = forward

    def parameters(self):
        out = []
        for s in self.stem:
            out += s.parameters()
        for c in self.cells:
            out += c.parameters()
        if self.fusion is not None:
            out += self.fusion.parameters()
        return out + [self.head_w, self.head_b]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def derive(self, genotype: Genotype) -> "Network":
        """Discrete network for ``genotype`` that shares this supernet's weights."""
        if not self.is_supernet:
            raise ValueError("derive() needs a supernet")
        net = Network(self.topology, genotype, rng=np.random.default_rng(0))
        net.stem, net.head_w, net.head_b = self.stem, self.head_w, self.head_b
        for k, (dc, sc) in enumerate(zip(net.cells, self.cells)):
            dc.pre0, dc.pre1 = sc.pre0, sc.pre1
            for e, ops in enumerate(dc.edges):
                kind = ops[0].kind
                dc.edges[e] = [next(op for op in sc.edges[e] if op.kind is kind)]
        if net.fusion is not None:
            net.fusion.reduce = self.fusion.reduce
            for e, ops in enumerate(net.fusion.edges):
                kind = ops[0].kind
                net.fusion.edges[e] = [next(op for op in self.fusion.edges[e] if op.kind is kind)]
        return net

    def state(self):
        """Snapshot of all weights and running statistics (numpy copies)."""
        arrays = [p.data.copy() for p in self.parameters()]
        return arrays, [b.copy() for b in self._buffers()]

    def load_state(self, state):
        arrays, bufs = state
        for p, a in zip(self.parameters(), arrays):
            p.data[...] = a
        for b, a in zip(self._buffers(), bufs):
            b[...] = a

    def _buffers(self):
        out = []

        def add_bn(bn):
            out.extend([bn["running_mean"], bn["running_var"]])

        for s in self.stem:
            add_bn(s.bn)
        blocks = list(self.cells) + ([self.fusion] if self.fusion is not None else [])
        for blk in blocks:
            fixed = [blk.pre0, blk.pre1] if isinstance(blk, Cell) else blk.reduce
            for f in fixed:
                add_bn(f.bn)
            for ops in blk.edges:
                for op in ops:
                    if op.weights and "running_mean" in op.weights:
                        add_bn(op.weights)
        return out


def build_supernet(topology: NetworkTopology, rng=None) -> Network:
    return Network(topology, None, rng)


def count_params(genotype: Genotype, topology: NetworkTopology | None = None) -> int:
    """Exact trainable-parameter count of the discrete network for ``genotype``."""
    if topology is None:
        topology = NetworkTopology.from_echo(genotype.topology)
    return Network(topology, genotype, rng=np.random.default_rng(0)).num_parameters()
