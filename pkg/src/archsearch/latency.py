"""Latency lookup tables, the differentiable expected latency, and the joint loss.

A table holds one cost (microseconds) per (cell or fusion, edge, op) plus a
fixed term for the parts that are never searched: stem, input
preprocessing, fusion tap reductions and the classifier head.  Expected
latency is linear in the soft masks, so a one-hot mask reproduces the
discrete network's cost.
"""
from __future__ import annotations

import json
import math
import os
import platform
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .primitives import CELL_OPS, DILATION, POOL_SIZE, Op, PrimitiveKind
from .searchspace import FusionTemplate, Genotype, NetworkTopology
from .tensor import Tensor

P = PrimitiveKind

ANALYTIC_MAC_US = 1e-4
ANALYTIC_ELEM_US = 1e-4
ANALYTIC_OVERHEAD_US = 5.0
WARMUP_RUNS = 10
TIMED_RUNS = 50
DEFAULT_RESOLUTION = (64, 128)
LUT_VERSION = 1


class LatencyTableError(ValueError):
    """Malformed, incomplete or mismatched latency table."""


@dataclass(frozen=True)
class EdgeShape:
    """Geometry of one searched edge at batch size 1."""
    c_in: int
    c_out: int
    h_in: int
    w_in: int
    stride: int
    up: bool = False

    @property
    def h_out(self):
        return self.h_in * 2 if self.up else self.h_in // self.stride

    @property
    def w_out(self):
        return self.w_in * 2 if self.up else self.w_in // self.stride

    def key(self):
        return (self.c_in, self.c_out, self.h_in, self.w_in, self.stride, self.up)


def cell_edge_shapes(topology: NetworkTopology, k, resolution=DEFAULT_RESOLUTION):
    tpl = topology.template(k)
    c = topology.cell_channels(k)
    s = topology.cell_stride(k)
    h, w = resolution[0] // s, resolution[1] // s
    out = []
    for e in range(tpl.p):
        st = tpl.edge_stride(e)
        out.append(EdgeShape(c, c, h * st, w * st, st))
    return out


def fusion_edge_shapes(resolution=DEFAULT_RESOLUTION):
    ft = FusionTemplate()
    out = []
    for ed in ft.edges:
        s = ft.node_strides[ed.src]
        out.append(EdgeShape(ft.node_width(ed.src), ft.channels,
                             resolution[0] // s, resolution[1] // s, 1, ed.up))
    return out


def op_macs(kind, shape: EdgeShape) -> int:
    """Multiply-accumulate count of one forward pass (comparisons count as MACs)."""
    kind = P(kind)
    px = shape.h_out * shape.w_out
    ci, co = shape.c_in, shape.c_out
    if kind is P.ZERO:
        return 0
    if kind is P.SKIP:
        return 0 if shape.stride == 1 else px * ci * co
    if kind is P.CONV1X1:
        return px * ci * co
    if kind is P.CONV3X3:
        return 9 * px * ci * co
    if kind in DILATION:
        return 9 * px * ci + px * ci * co
    if kind is P.MAX_POOL3X3:
        return 9 * px * ci
    if kind in POOL_SIZE:
        k = POOL_SIZE[kind]
        return shape.h_in * shape.w_in * ci + k * k * ci * co + 4 * px * co
    if kind is P.BILINEAR_UPSAMPLE_X2:
        return 4 * px * ci
    if kind is P.TRANSPOSED_CONV_X2:
        return px * ci * co
    raise ValueError(f"no cost model for {kind}")


def analytic_cost(kind, shape: EdgeShape, mac_us=ANALYTIC_MAC_US, elem_us=ANALYTIC_ELEM_US,
                  overhead_us=ANALYTIC_OVERHEAD_US) -> float:
    """mac_us * MACs + elem_us * output elements + overhead; ``zero`` is overhead only."""
    if P(kind) is P.ZERO:
        return overhead_us
    elems = shape.h_out * shape.w_out * shape.c_out
    return mac_us * op_macs(kind, shape) + elem_us * elems + overhead_us


def _fixed_shapes(topology: NetworkTopology, resolution):
    """(kind, shape) pairs of the unsearched convolutions."""
    h, w = resolution
    c0 = topology.initial_channels
    out = []
    c_in = 3
    for s in topology.stem_strides:
        out.append((P.CONV3X3, EdgeShape(c_in, c0, h, w, s)))
        h, w, c_in = h // s, w // s, c0
    c_pp, c_p, r_pp, r_p = c0, c0, topology.stem_strides[0] * topology.stem_strides[1], \
        topology.stem_stride
    for k in range(topology.cells):
        c = topology.cell_channels(k)
        hp, wp = resolution[0] // r_p, resolution[1] // r_p
        red = 2 if r_p == 2 * r_pp else 1
        out.append((P.CONV1X1, EdgeShape(c_pp, c, hp * red, wp * red, red)))
        out.append((P.CONV1X1, EdgeShape(c_p, c, hp, wp, 1)))
        c_pp, c_p = c_p, topology.template(k).num_nodes * c
        r_pp, r_p = r_p, topology.cell_stride(k)
    if topology.fusion_taps is not None:
        ft = FusionTemplate()
        for t in topology.fusion_taps:
            s = topology.cell_stride(t)
            ch = topology.template(t).num_nodes * topology.cell_channels(t)
            out.append((P.CONV1X1, EdgeShape(ch, ft.channels, resolution[0] // s,
                                             resolution[1] // s, 1)))
        head_in, head_s = ft.channels, 4
    else:
        head_in, head_s = c_p, topology.cell_stride(topology.cells - 1)
    out.append((P.CONV1X1, EdgeShape(head_in, topology.num_classes, resolution[0] // head_s,
                                     resolution[1] // head_s, 1)))
    return out


class LatencyTable:
    """Per-(cell, edge, op) costs in microseconds plus a fixed term.

    ``cells[k]`` is a (p, q) array in candidate order; ``fusion`` is (E, q_f)
    with ``nan`` in the columns an up-edge cannot use.
    """

    def __init__(self, cells, fusion, fixed_us, metadata):
        self.cells = [np.asarray(c, dtype=float) for c in cells]
        self.fusion = None if fusion is None else np.asarray(fusion, dtype=float)
        self.fixed_us = float(fixed_us)
        self.metadata = dict(metadata)
        self.validate()

    @property
    def topology_echo(self):
        return self.metadata["topology"]

    def validate(self):
        for k, c in enumerate(self.cells):
            if c.ndim != 2 or c.shape[1] != len(CELL_OPS):
                raise LatencyTableError(f"cell {k}: table shape {c.shape}")
            if not (np.isfinite(c).all() and (c > 0).all()):
                raise LatencyTableError(f"cell {k}: entries must be finite and positive")
        if self.fusion is not None:
            ft = FusionTemplate()
            valid = ft.valid_mask()
            if self.fusion.shape != valid.shape:
                raise LatencyTableError(f"fusion table shape {self.fusion.shape}")
            v = self.fusion[valid]
            if not (np.isfinite(v).all() and (v > 0).all()):
                raise LatencyTableError("fusion entries must be finite and positive")
        if not (math.isfinite(self.fixed_us) and self.fixed_us >= 0):
            raise LatencyTableError("fixed cost must be finite and non-negative")

    def entry(self, k, e, op):
        """Cost of ``op`` on edge ``e`` of cell ``k`` (``k == "fusion"`` for the fusion cell)."""
        op = P(op)
        if k == "fusion":
            if self.fusion is None:
                raise LatencyTableError("table has no fusion cell")
            cands = FusionTemplate().candidates(e)
            if op not in cands:
                raise LatencyTableError(f"fusion edge {e} has no entry for {op.value}")
            return float(self.fusion[e, cands.index(op)])
        if not 0 <= k < len(self.cells):
            raise LatencyTableError(f"no entry for cell {k}")
        return float(self.cells[k][e, CELL_OPS.index(op)])

    # ---------------------------------------------------------------- JSON
    def to_dict(self):
        entries = {}
        for k, c in enumerate(self.cells):
            entries[f"{k:02d}"] = {f"{e:02d}": {op.value: float(c[e, i]) for i, op in enumerate(CELL_OPS)}
                                   for e in range(c.shape[0])}
        if self.fusion is not None:
            ft = FusionTemplate()
            entries["fusion"] = {f"{e:02d}": {op.value: float(self.fusion[e, i])
                                              for i, op in enumerate(ft.candidates(e))}
                                 for e in range(ft.E)}
        return {"version": LUT_VERSION, "metadata": self.metadata, "fixed_us": self.fixed_us,
                "entries": entries}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.dumps())

    @classmethod
    def loads(cls, text) -> "LatencyTable":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise LatencyTableError(f"latency table is not valid JSON: {exc}") from None
        for key in ("version", "metadata", "fixed_us", "entries"):
            if key not in obj:
                raise LatencyTableError(f"latency table missing {key!r}")
        if obj["version"] != LUT_VERSION:
            raise LatencyTableError(f"latency table version {obj['version']} != {LUT_VERSION}")
        meta = obj["metadata"]
        if "topology" not in meta:
            raise LatencyTableError("latency table metadata lacks the topology echo")
        topo = NetworkTopology.from_echo(meta["topology"])
        entries = obj["entries"]
        cells = []
        for k in range(topo.cells):
            tpl = topo.template(k)
            cell = entries.get(f"{k:02d}")
            if cell is None:
                raise LatencyTableError(f"no entries for cell {k}")
            arr = np.empty((tpl.p, tpl.q))
            for e in range(tpl.p):
                row = cell.get(f"{e:02d}", {})
                for i, op in enumerate(CELL_OPS):
                    if op.value not in row:
                        raise LatencyTableError(f"missing entry: cell {k} edge {e} op {op.value}")
                    arr[e, i] = row[op.value]
            cells.append(arr)
        fusion = None
        if topo.fusion_taps is not None:
            ft = FusionTemplate()
            fus = entries.get("fusion")
            if fus is None:
                raise LatencyTableError("no entries for the fusion cell")
            fusion = np.full((ft.E, ft.q), np.nan)
            for e in range(ft.E):
                row = fus.get(f"{e:02d}", {})
                for i, op in enumerate(ft.candidates(e)):
                    if op.value not in row:
                        raise LatencyTableError(f"missing entry: fusion edge {e} op {op.value}")
                    fusion[e, i] = row[op.value]
        return cls(cells, fusion, obj["fixed_us"], meta)

    @classmethod
    def load(cls, path) -> "LatencyTable":
        try:
            with open(path, encoding="utf-8") as f:
                return cls.loads(f.read())
        except OSError as exc:
            raise LatencyTableError(f"cannot read latency table {path}: {exc}") from None


# ------------------------------------------------------------------ building

@dataclass(frozen=True)
class TimerPolicy:
    warmup: int = WARMUP_RUNS
    runs: int = TIMED_RUNS
    batch: int = 1


def host_fingerprint():
    return {"machine": platform.machine(), "processor": platform.processor(),
            "system": platform.system(), "release": platform.release(),
            "python": platform.python_version(), "numpy": np.__version__,
            "cpu_count": os.cpu_count()}


def check_timer_resolution(clock="perf_counter"):
    res = time.get_clock_info(clock).resolution
    if res > 1e-6:
        raise LatencyTableError(f"timer resolution {res:g}s is coarser than 1 µs")
    return res


def time_op(kind, shape: EdgeShape, policy: TimerPolicy = TimerPolicy(), rng=None):
    """Median wall time (µs) of an inference-mode forward pass of ``kind`` at ``shape``."""
    rng = np.random.default_rng(0) if rng is None else rng
    if shape.up:
        op = Op(kind, shape.c_in, shape.c_out, 1, rng)
    else:
        op = Op(kind, shape.c_in, shape.c_out, shape.stride, rng)
    x = Tensor(rng.standard_normal((policy.batch, shape.c_in, shape.h_in, shape.w_in)))
    samples = []
    with T.no_grad():
        for i in range(policy.warmup + policy.runs):
            t0 = time.perf_counter_ns()
            op(x, training=False)
            dt = time.perf_counter_ns() - t0
            if i >= policy.warmup:
                samples.append(dt / 1000.0)
    # a sub-resolution reading would put a zero into a table that must stay positive
    return max(statistics.median(samples), 1e-3)


def _conv_time(shape: EdgeShape, k, policy, rng):
    from .primitives import ConvBN
    blk = ConvBN(shape.c_in, shape.c_out, k, shape.stride, rng)
    x = Tensor(rng.standard_normal((policy.batch, shape.c_in, shape.h_in, shape.w_in)))
    samples = []
    with T.no_grad():
        for i in range(policy.warmup + policy.runs):
            t0 = time.perf_counter_ns()
            blk(x, training=False)
            dt = time.perf_counter_ns() - t0
            if i >= policy.warmup:
                samples.append(dt / 1000.0)
    return statistics.median(samples)


def build_lut(topology: NetworkTopology, mode="analytic", policy: TimerPolicy | None = None,
              resolution=DEFAULT_RESOLUTION) -> LatencyTable:
    """Latency table for ``topology``.

    ``analytic``: closed-form MAC proxy, reproducible bit-for-bit.
    ``measured``: 10 warm-up runs then the median of 50 timed forward passes,
    shared across edges with identical geometry.  Run on an idle host.
    """
    if mode not in ("analytic", "measured"):
        raise ValueError(f"unknown latency mode {mode!r}")
    policy = TimerPolicy() if policy is None else policy
    if resolution[0] % 16 or resolution[1] % 16:
        raise ValueError(f"resolution {resolution} must be divisible by 16")
    meta = {"mode": mode, "resolution": list(resolution), "topology": topology.echo(),
            "num_classes": topology.num_classes, "unit": "microseconds"}
    if mode == "measured":
        check_timer_resolution()
        meta["timing_policy"] = {"warmup": policy.warmup, "runs": policy.runs,
                                 "statistic": "median", "batch": policy.batch,
                                 "clock": "perf_counter_ns"}
        meta["host"] = host_fingerprint()
        rng = np.random.default_rng(0)
        cache = {}

        def cost(kind, shape):
            if P(kind) is P.ZERO:
                # the zero op still allocates its output
                key = ("zero",) + shape.key()
            else:
                key = (P(kind).value,) + shape.key()
            if key not in cache:
                cache[key] = time_op(kind, shape, policy, rng)
            return cache[key]
    else:
        meta["cost_model"] = {"mac_us": ANALYTIC_MAC_US, "elem_us": ANALYTIC_ELEM_US,
                              "overhead_us": ANALYTIC_OVERHEAD_US}
        cost = analytic_cost

    cells = []
    for k in range(topology.cells):
        shapes = cell_edge_shapes(topology, k, resolution)
        cells.append(np.array([[cost(op, sh) for op in CELL_OPS] for sh in shapes]))
    fusion = None
    if topology.fusion_taps is not None:
        ft = FusionTemplate()
        fusion = np.full((ft.E, ft.q), np.nan)
        for e, sh in enumerate(fusion_edge_shapes(resolution)):
            for i, op in enumerate(ft.candidates(e)):
                fusion[e, i] = cost(op, sh)
    fixed = 0.0
    for kind, sh in _fixed_shapes(topology, resolution):
        if mode == "measured":
            fixed += _conv_time(sh, 3 if kind is P.CONV3X3 else 1, policy, np.random.default_rng(1))
        else:
            fixed += analytic_cost(kind, sh)
    return LatencyTable(cells, fusion, fixed, meta)


# ----------------------------------------------------------- expected latency

def expected_cell_latency(z, lut: LatencyTable, k):
    """Sum over edges and ops of Z[e, m] * LUT[k, e, m] (differentiable in Z)."""
    z = T.as_tensor(z)
    if not 0 <= k < len(lut.cells):
        raise LatencyTableError(f"no entries for cell {k}")
    table = lut.cells[k]
    if tuple(z.shape) != table.shape:
        raise ValueError(f"mask shape {z.shape} != table shape {table.shape}")
    return T.tsum(T.mul(z, Tensor(table)))


def expected_fusion_latency(z, lut: LatencyTable):
    z = T.as_tensor(z)
    if lut.fusion is None:
        raise LatencyTableError("table has no fusion cell")
    if tuple(z.shape) != lut.fusion.shape:
        raise ValueError(f"fusion mask shape {z.shape} != {lut.fusion.shape}")
    # invalid columns carry exactly zero mask weight; count them as zero cost
    return T.tsum(T.mul(z, Tensor(np.nan_to_num(lut.fusion, nan=0.0))))


def expected_total_latency(cell_masks, fusion_mask, lut: LatencyTable):
    """Cells + fusion cell + fixed term, in microseconds."""
    if len(cell_masks) != len(lut.cells):
        raise LatencyTableError(f"{len(cell_masks)} masks for {len(lut.cells)} table cells")
    total = None
    for k, z in enumerate(cell_masks):
        lk = expected_cell_latency(z, lut, k)
        total = lk if total is None else T.add(total, lk)
    if lut.fusion is not None:
        if fusion_mask is None:
            raise ValueError("fusion mask required by this table")
        total = T.add(total, expected_fusion_latency(fusion_mask, lut))
    return T.add(total, lut.fixed_us)


def genotype_latency(g: Genotype, lut: LatencyTable) -> float:
    """Table cost of a discrete architecture; pruned edges pay the zero-op entry."""
    if g.topology != lut.topology_echo:
        raise LatencyTableError("genotype topology does not match the latency table")
    total = 0.0
    for k, ops in enumerate(g.cells):
        for e, op in enumerate(ops):
            total += lut.entry(k, e, op)
    if g.fusion is not None:
        for e, op in enumerate(g.fusion):
            total += lut.entry("fusion", e, op)
    return total + lut.fixed_us


def one_hot_masks(g: Genotype):
    """Cell and fusion masks that select exactly the genotype's ops."""
    cells = []
    for ops in g.cells:
        z = np.zeros((len(ops), len(CELL_OPS)))
        for e, op in enumerate(ops):
            z[e, CELL_OPS.index(P(op))] = 1.0
        cells.append(z)
    fusion = None
    if g.fusion is not None:
        ft = FusionTemplate()
        fusion = np.zeros((ft.E, ft.q))
        for e, op in enumerate(g.fusion):
            fusion[e, ft.candidates(e).index(P(op))] = 1.0
    return cells, fusion


# ---------------------------------------------------------------- total loss

@dataclass(frozen=True)
class LossTerms:
    ce: float
    lat: float
    beta: float
    total: float

    @classmethod
    def of(cls, ce, lat, beta):
        ce, lat = float(ce), float(lat)
        if lat <= 0:
            raise ValueError(f"latency must be positive, got {lat}")
        return cls(ce, lat, beta, ce + beta * math.log(lat))


def total_loss(ce, lat, beta):
    """ce + beta * ln(lat), lat in microseconds."""
    ce, lat = T.as_tensor(ce), T.as_tensor(lat)
    if (lat.data <= 0).any():
        raise ValueError(f"latency must be positive, got {lat.data}")
    if beta == 0:
        return ce
    return T.add(ce, T.mul(T.log(lat), beta))
