"""Graph-guided exchange of architecture parameters between adjacent cells.

For cells k-1 -> k the updated logits are

    alpha'_k = alpha_k + gamma * Phi2(A @ Phi1(alpha_{k-1}) @ W + Phi1(alpha_{k-1}))

with ``A`` a row-softmax similarity between the edges of the two cells.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODES = ("edge_similarity", "operation_identity", "fc", "none")


class GgmWeights:
    """Trainable transforms for one adjacent cell pair.

    ``Phi2`` starts at zero so the module is the identity at initialisation
    and the first decode equals the plain argmax of alpha.
    """

    def __init__(self, q, d=64, gamma=0.5, rng=None, mode="edge_similarity"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.q, self.d, self.gamma, self.mode = q, d, gamma, mode
        feat = 1 if mode == "operation_identity" else q
        self.w1 = Tensor(np.eye(q) + rng.normal(0, 0.1, (q, q)), requires_grad=True, name="w1")
        self.w2 = Tensor(np.eye(q) + rng.normal(0, 0.1, (q, q)), requires_grad=True, name="w2")
        self.phi1_w = Tensor(rng.normal(0, 1 / np.sqrt(feat), (feat, d)), requires_grad=True, name="phi1_w")
        self.phi1_b = Tensor(np.zeros(d), requires_grad=True, name="phi1_b")
        self.phi2_w = Tensor(np.zeros((d, feat)), requires_grad=True, name="phi2_w")
        self.phi2_b = Tensor(np.zeros(feat), requires_grad=True, name="phi2_b")
        self.w_gcn = Tensor(rng.normal(0, 1 / np.sqrt(d), (d, d)), requires_grad=True, name="w_gcn")

    def parameters(self):
        return [self.w1, self.w2, self.phi1_w, self.phi1_b, self.phi2_w, self.phi2_b, self.w_gcn]


def _affine(x, w, b):
    return T.add(T.matmul(x, w), b)


def _check_pair(a_k, a_prev):
    if a_k.shape != a_prev.shape or len(a_k.shape) != 2:
        raise ValueError(f"cell parameter shapes differ: {a_k.shape} vs {a_prev.shape}")


def adjacency(a_k, a_prev, w1, w2):
    """A = row-softmax((a_k @ w1) @ (a_prev @ w2)^T), a (p, p) row-stochastic matrix."""
    a_k, a_prev, w1, w2 = map(T.as_tensor, (a_k, a_prev, w1, w2))
    _check_pair(a_k, a_prev)
    if w1.shape != (a_k.shape[1],) * 2 or w2.shape != w1.shape:
        raise ValueError("w1 and w2 must be q x q")
    sim = T.matmul(T.matmul(a_k, w1), T.transpose(T.matmul(a_prev, w2)))
    return T.softmax(sim, axis=1)


def gcn_propagate(x, adj, w_gcn):
    """One residual graph-convolution layer: A @ X @ W + X."""
    x, adj, w_gcn = map(T.as_tensor, (x, adj, w_gcn))
    if adj.shape != (x.shape[0], x.shape[0]) or w_gcn.shape != (x.shape[1], x.shape[1]):
        raise ValueError(f"gcn shapes inconsistent: X {x.shape}, A {adj.shape}, W {w_gcn.shape}")
    return T.add(T.matmul(T.matmul(adj, x), w_gcn), x)


def operation_identity_adjacency(a_k, a_prev):
    """Row-softmax of the outer product of the flattened matrices, (p*q, p*q)."""
    a_k, a_prev = T.as_tensor(a_k), T.as_tensor(a_prev)
    _check_pair(a_k, a_prev)
    n = a_k.size
    outer = T.matmul(T.reshape(a_k, (n, 1)), T.reshape(a_prev, (1, n)))
    return T.softmax(outer, axis=1)


def ggm_update(a_k, a_prev, weights: GgmWeights, mode=None):
    """Updated parameters of cell k given its predecessor's parameters."""
    mode = weights.mode if mode is None else mode
    a_k, a_prev = T.as_tensor(a_k), T.as_tensor(a_prev)
    _check_pair(a_k, a_prev)
    if mode == "none" or weights.gamma == 0:
        return a_k
    if mode == "operation_identity":
        p, q = a_prev.shape
        x = _affine(T.reshape(a_prev, (p * q, 1)), weights.phi1_w, weights.phi1_b)
        h = gcn_propagate(x, operation_identity_adjacency(a_k, a_prev), weights.w_gcn)
        delta = T.reshape(_affine(h, weights.phi2_w, weights.phi2_b), (p, q))
    else:
        x = _affine(a_prev, weights.phi1_w, weights.phi1_b)
        if mode == "fc":
            h = x
        elif mode == "edge_similarity":
            h = gcn_propagate(x, adjacency(a_k, a_prev, weights.w1, weights.w2), weights.w_gcn)
        else:
            raise ValueError(f"unknown ggm mode {mode!r}")
        delta = _affine(h, weights.phi2_w, weights.phi2_b)
    return T.add(a_k, delta * weights.gamma)


def build_ggm(topology, mode="edge_similarity", d=64, gamma=0.5, rng=None):
    """One weight set per adjacent cell pair (k-1, k), k >= 1."""
    if mode == "none":
        return []
    rng = np.random.default_rng(0) if rng is None else rng
    q = topology.template(0).q
    return [GgmWeights(q, d=d, gamma=gamma, rng=rng, mode=mode) for _ in range(topology.cells - 1)]


def updated_cell_logits(arch, ggm, mode="edge_similarity", cascade=False):
    """alpha' for every cell; cell 0 passes through.

    By default each update reads the raw predecessor; ``cascade`` feeds the
    already-updated predecessor instead.
    """
    mats = arch.cells()
    if not ggm or mode == "none" or arch.shared:
        return list(mats)
    out = [mats[0]]
    for k in range(1, len(mats)):
        prev = out[k - 1] if cascade else mats[k - 1]
        out.append(ggm_update(mats[k], prev, ggm[k - 1], mode=mode))
    return out
