"""Finite-difference gradient cases shared by the unit and acceptance suites.

Each case builds fresh random inputs from an rng and returns ``(fn, params)``:
``fn()`` recomputes the output from the current values of ``params``.  The
checker contracts the output with a fixed random tensor so no gradient
cancels by symmetry.
"""
from __future__ import annotations

import numpy as np

from archsearch import tensor as T
from archsearch.ggm import GgmWeights, adjacency, gcn_propagate, ggm_update, \
    operation_identity_adjacency
from archsearch.latency import build_lut, expected_cell_latency, expected_total_latency, \
    total_loss
from archsearch.primitives import CELL_OPS, FUSION_OPS, UP_OPS, Op
from archsearch.relax import ArchParams, gumbel_softmax, gumbel_softmax_logits, sample_gumbel
from archsearch.searchspace import NetworkTopology
from archsearch.tensor import Tensor

EPS = 1e-5
RTOL = 1e-4


def leaf(rng, *shape, scale=1.0, positive=False):
    a = rng.normal(0.0, scale, shape)
    if positive:
        a = np.abs(a) + 0.5
    return Tensor(a, requires_grad=True)


def check(fn, params, rng, eps=EPS):
    """Max relative error between tape gradients and central differences."""
    with T.no_grad():
        out = fn()
    proj = rng.normal(size=out.shape)
    for p in params:
        p.grad = np.zeros_like(p.data)
    T.backward(T.tsum(T.mul(fn(), proj)))
    worst = 0.0
    for p in params:
        def f():
            with T.no_grad():
                return float(np.sum(fn().data * proj))
        num = T.numerical_gradient(f, p.data, eps)
        worst = max(worst, T.relative_error(p.grad, num))
    return worst


# ------------------------------------------------------------------ tensor ops

def _binary(op, positive_b=False):
    def make(rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 1, 4, positive=positive_b)
        return (lambda: op(a, b)), [a, b]
    return make


def _unary(op, positive=False):
    def make(rng):
        a = leaf(rng, 2, 3, 4, positive=positive)
        return (lambda: op(a)), [a]
    return make


def _matmul(rng):
    a, b = leaf(rng, 3, 5), leaf(rng, 5, 2)
    return (lambda: T.matmul(a, b)), [a, b]


def _concat(rng):
    a, b = leaf(rng, 2, 1, 3, 3), leaf(rng, 2, 2, 3, 3)
    return (lambda: T.concat([a, b], axis=1)), [a, b]


def _getrow(rng):
    a = leaf(rng, 4, 6)
    return (lambda: T.getrow(a, 2)), [a]


def _weighted_sum(rng):
    w = leaf(rng, 4)
    xs = [leaf(rng, 2, 3), None, leaf(rng, 2, 3), leaf(rng, 2, 3)]
    return (lambda: T.weighted_sum(w, xs)), [w] + [x for x in xs if x is not None]


def _softmax(axis):
    def make(rng):
        a = leaf(rng, 3, 5, scale=2.0)
        return (lambda: T.softmax(a, axis=axis)), [a]
    return make


def _log_softmax(rng):
    a = leaf(rng, 3, 5, scale=2.0)
    return (lambda: T.log_softmax(a, axis=-1)), [a]


def _cross_entropy(rng):
    a = leaf(rng, 2, 4, 3, 3)
    lab = rng.integers(0, 4, (2, 3, 3))
    lab[0, 0, 0] = 255
    return (lambda: T.cross_entropy(a, lab)), [a]


def _batch_norm(training):
    def make(rng):
        x = leaf(rng, 3, 4, 3, 3)
        g, b = leaf(rng, 4, positive=True), leaf(rng, 4)
        rm, rv = rng.normal(size=4), np.abs(rng.normal(size=4)) + 0.5
        return (lambda: T.batch_norm(x, g, b, rm.copy(), rv.copy(), training=training)), [x, g, b]
    return make


def _conv(c_in, c_out, k, stride=1, padding=0, dilation=1, depthwise=False, bias=False, hw=6):
    def make(rng):
        x = leaf(rng, 2, c_in, hw, hw)
        w = leaf(rng, c_out, 1 if depthwise else c_in, k, k, scale=0.5)
        bb = leaf(rng, c_out) if bias else None
        groups = c_in if depthwise else 1
        fn = lambda: T.conv2d(x, w, bb, stride=stride, padding=padding, dilation=dilation,
                              groups=groups)
        return fn, [x, w] + ([bb] if bias else [])
    return make


def _conv_transpose(rng):
    x, w = leaf(rng, 2, 3, 3, 4), leaf(rng, 3, 2, 2, 2)
    return (lambda: T.conv_transpose2x2(x, w)), [x, w]


def _max_pool(stride):
    def make(rng):
        x = leaf(rng, 2, 2, 6, 6)
        return (lambda: T.max_pool3x3(x, stride)), [x]
    return make


def _resize(rng):
    x = leaf(rng, 1, 2, 3, 5)
    return (lambda: T.resize_bilinear(x, (6, 10))), [x]


def _adaptive_pool(k):
    def make(rng):
        x = leaf(rng, 1, 2, 5, 7)
        return (lambda: T.adaptive_avg_pool(x, k)), [x]
    return make


TENSOR_CASES = {
    "add": _binary(T.add), "sub": _binary(T.sub), "mul": _binary(T.mul),
    "div": _binary(T.div, positive_b=True),
    "exp": _unary(T.exp), "log": _unary(T.log, positive=True), "relu": _unary(T.relu),
    "sum": _unary(lambda a: T.tsum(a, axis=1)), "mean": _unary(lambda a: T.tmean(a, axis=(0, 2))),
    "reshape": _unary(lambda a: T.reshape(a, (6, 4))),
    "transpose": _unary(lambda a: T.transpose(a, (2, 0, 1))),
    "matmul": _matmul, "concat": _concat, "getrow": _getrow, "weighted_sum": _weighted_sum,
    "softmax_rows": _softmax(-1), "softmax_cols": _softmax(0), "log_softmax": _log_softmax,
    "cross_entropy": _cross_entropy,
    "batch_norm_train": _batch_norm(True), "batch_norm_eval": _batch_norm(False),
    "conv3x3": _conv(3, 4, 3, padding=1), "conv3x3_stride2": _conv(3, 4, 3, 2, 1),
    "conv3x3_dilated": _conv(2, 3, 3, padding=2, dilation=2),
    "conv1x1_bias": _conv(3, 2, 1, bias=True),
    "conv1x1_stride2": _conv(3, 2, 1, stride=2),
    "depthwise": _conv(3, 3, 3, padding=1, depthwise=True),
    "depthwise_dilated_stride2": _conv(3, 3, 3, 2, 4, 4, depthwise=True, hw=8),
    "conv_transpose2x2": _conv_transpose,
    "max_pool_s1": _max_pool(1), "max_pool_s2": _max_pool(2),
    "resize_bilinear": _resize, "adaptive_pool_1": _adaptive_pool(1),
    "adaptive_pool_2": _adaptive_pool(2), "adaptive_pool_5": _adaptive_pool(5),
}


# ------------------------------------------------------------------ primitives

def _primitive(kind, stride=1, c_in=3, c_out=3, hw=4):
    def make(rng):
        op = Op(kind, c_in, c_out, stride, rng)
        x = leaf(rng, 2, c_in, hw, hw)
        return (lambda: op(x, training=True)), [x] + op.parameters()
    return make


PRIMITIVE_CASES = {}
for _k in CELL_OPS:
    if _k.value != "zero":
        PRIMITIVE_CASES[f"cell:{_k.value}"] = _primitive(_k)
        PRIMITIVE_CASES[f"cell:{_k.value}:stride2"] = _primitive(_k, stride=2)
for _k in FUSION_OPS:
    PRIMITIVE_CASES[f"fusion:{_k.value}"] = _primitive(_k, c_in=4, c_out=3, hw=5)
for _k in UP_OPS:
    PRIMITIVE_CASES[f"up:{_k.value}"] = _primitive(_k, c_in=2, c_out=2, hw=3)


# ------------------------------------------------------------------ composites

def _gumbel_logits(rng):
    a = leaf(rng, 5, 8)
    g = sample_gumbel((5, 8), rng)
    lam = float(rng.uniform(0.3, 2.0))
    return (lambda: gumbel_softmax_logits(a, g, lam)), [a]


def _gumbel_alpha(rng):
    a = leaf(rng, 5, 8, positive=True)
    g = sample_gumbel((5, 8), rng)
    return (lambda: gumbel_softmax(a, g, 0.7)), [a]


def _ggm_weights(rng, mode, q=8, d=6):
    w = GgmWeights(q, d=d, gamma=0.5, rng=rng, mode=mode)
    # a zero Phi2 would hide every upstream gradient
    w.phi2_w.data[...] = rng.normal(0, 0.3, w.phi2_w.shape)
    w.phi2_b.data[...] = rng.normal(0, 0.3, w.phi2_b.shape)
    return w


def _ggm(mode):
    def make(rng):
        a_k, a_prev = leaf(rng, 5, 8, scale=0.5), leaf(rng, 5, 8, scale=0.5)
        w = _ggm_weights(rng, mode)
        return (lambda: ggm_update(a_k, a_prev, w)), [a_k, a_prev] + w.parameters()
    return make


def _adjacency(rng):
    a_k, a_prev = leaf(rng, 5, 8, scale=0.5), leaf(rng, 5, 8, scale=0.5)
    w1, w2 = leaf(rng, 8, 8, scale=0.5), leaf(rng, 8, 8, scale=0.5)
    return (lambda: adjacency(a_k, a_prev, w1, w2)), [a_k, a_prev, w1, w2]


def _gcn(rng):
    x, adj, w = leaf(rng, 5, 4), leaf(rng, 5, 5), leaf(rng, 4, 4)
    return (lambda: gcn_propagate(x, adj, w)), [x, adj, w]


def _op_identity_adjacency(rng):
    a_k, a_prev = leaf(rng, 5, 8, scale=0.3), leaf(rng, 5, 8, scale=0.3)
    return (lambda: operation_identity_adjacency(a_k, a_prev)), [a_k, a_prev]


_LUT_CACHE = {}


def _small_lut():
    if "lut" not in _LUT_CACHE:
        topo = NetworkTopology(cells=3, reduction_indices=(1,), fusion_taps=None)
        _LUT_CACHE["lut"] = (topo, build_lut(topo, "analytic", resolution=(32, 32)))
        full = NetworkTopology()
        _LUT_CACHE["full"] = (full, build_lut(full, "analytic"))
    return _LUT_CACHE


def _cell_latency(rng):
    _, lut = _small_lut()["lut"]
    z = leaf(rng, 5, 8)
    return (lambda: expected_cell_latency(z, lut, 1)), [z]


def _latency_loss_chain(rng):
    """beta * log LAT through Gumbel-softmax masks of every cell and the fusion cell."""
    topo, lut = _small_lut()["full"]
    arch = ArchParams(topo)
    for m in arch.parameters():
        m.data[...] = rng.normal(0, 0.5, m.shape)
    noise = [sample_gumbel(m.shape, rng) for m in arch.cells()]
    fnoise = sample_gumbel(arch.fusion_logits.shape, rng)
    params = [arch.cells()[0], arch.cells()[5], arch.fusion_logits]

    def fn():
        zs = [gumbel_softmax_logits(m, g, 0.5) for m, g in zip(arch.cells(), noise)]
        zf = gumbel_softmax_logits(arch.fusion_logits, fnoise, 0.5, arch.fusion_mask)
        lat = expected_total_latency(zs, zf, lut)
        return total_loss(Tensor(0.3), lat, 0.005)
    return fn, params


def _ggm_chain(rng):
    """Masks from GGM-updated logits of three cells; gradients reach every α and weight."""
    mats = [leaf(rng, 5, 8, scale=0.5) for _ in range(3)]
    ws = [_ggm_weights(rng, "edge_similarity") for _ in range(2)]
    noise = [sample_gumbel((5, 8), rng) for _ in range(3)]

    def fn():
        upd = [mats[0]] + [ggm_update(mats[k], mats[k - 1], ws[k - 1]) for k in (1, 2)]
        zs = [gumbel_softmax_logits(m, g, 0.8) for m, g in zip(upd, noise)]
        return T.concat(zs, axis=0)
    return fn, mats + ws[0].parameters() + ws[1].parameters()


COMPOSITE_CASES = {
    "gumbel_softmax_logits": _gumbel_logits, "gumbel_softmax_alpha": _gumbel_alpha,
    "ggm_adjacency": _adjacency, "ggm_gcn_propagate": _gcn,
    "ggm_update_edge_similarity": _ggm("edge_similarity"), "ggm_update_fc": _ggm("fc"),
    "ggm_update_operation_identity": _ggm("operation_identity"),
    "ggm_operation_identity_adjacency": _op_identity_adjacency,
    "ggm_gumbel_chain": _ggm_chain,
    "latency_expected_cell": _cell_latency, "latency_loss_chain": _latency_loss_chain,
}

ALL_CASES = {**TENSOR_CASES, **PRIMITIVE_CASES, **COMPOSITE_CASES}
