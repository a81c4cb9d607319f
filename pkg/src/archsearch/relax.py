"""Gumbel-softmax relaxation of per-edge op choices and its temperature schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .searchspace import FusionTemplate, NetworkTopology
from .tensor import Tensor

U_CLAMP = 1e-12
# additive logit for columns that are not candidates of an edge; finite so the
# non-finite guard stays armed, large enough that exp() underflows to 0
MASKED_LOGIT = -1e30


class ArchParams:
    """Architecture state: per-cell (p, q) matrices plus the fusion (E, q_f) matrix.

    Entries are stored as ``log alpha`` so alpha stays strictly positive; a
    zero matrix is the uniform initialisation.  With ``shared=True`` only one
    normal and one reduction matrix exist and cells index into them.
    """

    def __init__(self, topology: NetworkTopology, shared=False):
        self.topology = topology
        self.shared = shared
        tpl = topology.template(0)
        if shared:
            self.matrices = [Tensor(np.zeros((tpl.p, tpl.q)), requires_grad=True, name="alpha_normal"),
                             Tensor(np.zeros((tpl.p, tpl.q)), requires_grad=True, name="alpha_reduce")]
        else:
            self.matrices = [Tensor(np.zeros((tpl.p, tpl.q)), requires_grad=True, name=f"alpha_{k}")
                             for k in range(topology.cells)]
        self.fusion_logits = None
        self.fusion_mask = None
        if topology.fusion_taps is not None:
            ft = FusionTemplate()
            self.fusion_logits = Tensor(np.zeros((ft.E, ft.q)), requires_grad=True, name="alpha_fusion")
            self.fusion_mask = np.where(ft.valid_mask(), 0.0, MASKED_LOGIT)

    def cell(self, k) -> Tensor:
        if self.shared:
            return self.matrices[1 if k in self.topology.reduction_indices else 0]
        return self.matrices[k]

    def cells(self):
        return [self.cell(k) for k in range(self.topology.cells)]

    def parameters(self):
        out = list(self.matrices)
        if self.fusion_logits is not None:
            out.append(self.fusion_logits)
        return out

    def state(self):
        return {"cells": [m.data.copy() for m in self.matrices],
                "fusion": None if self.fusion_logits is None else self.fusion_logits.data.copy()}


def sample_gumbel(shape, rng):
    """G = -log(-log U), U ~ Uniform(0, 1) clamped to [1e-12, 1 - 1e-12]."""
    u = np.clip(rng.random(shape), U_CLAMP, 1.0 - U_CLAMP)
    return gumbel_from_uniform(u)


def gumbel_from_uniform(u):
    return -np.log(-np.log(np.asarray(u, dtype=float)))


def gumbel_softmax_logits(logits, G, lam, mask=None):
    """Row softmax of (logits + G) / lam; ``logits`` plays the role of log alpha."""
    if lam <= 0:
        raise ValueError(f"temperature must be positive, got {lam}")
    shifted = T.add(logits, G if mask is None else G + mask)
    return T.softmax(shifted * (1.0 / lam), axis=-1)


def gumbel_softmax(alpha, G, lam):
    """Row softmax of (log alpha + G) / lam for strictly positive ``alpha``."""
    if lam <= 0:
        raise ValueError(f"temperature must be positive, got {lam}")
    return gumbel_softmax_logits(T.log(T.as_tensor(alpha)), G, lam)


@dataclass(frozen=True)
class TemperatureSchedule:
    total_steps: int
    initial: float = 1.0
    minimum: float = 0.03


def temperature_at(step, schedule: TemperatureSchedule):
    """Exponential decay from ``initial`` to ``minimum`` over ``total_steps``."""
    if schedule.total_steps <= 0:
        return schedule.initial
    frac = min(max(step / schedule.total_steps, 0.0), 1.0)
    lam = schedule.initial * (schedule.minimum / schedule.initial) ** frac
    return max(lam, schedule.minimum)
