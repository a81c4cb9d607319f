"""Candidate operations for backbone cells, the fusion cell and its up-edges."""
from __future__ import annotations

from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import Tensor


class PrimitiveKind(str, Enum):
    CONV3X3 = "conv3x3"
    CONV1X1 = "conv1x1"
    SEP_CONV3X3 = "sep_conv3x3"
    DIL_SEP_CONV3X3_D2 = "dil_sep_conv3x3_d2"
    DIL_SEP_CONV3X3_D4 = "dil_sep_conv3x3_d4"
    DIL_SEP_CONV3X3_D8 = "dil_sep_conv3x3_d8"
    DIL_SEP_CONV3X3_D12 = "dil_sep_conv3x3_d12"
    MAX_POOL3X3 = "max_pool3x3"
    SKIP = "skip"
    ZERO = "zero"
    GLOBAL_POOL_1 = "global_pool1"
    GLOBAL_POOL_2 = "global_pool2"
    GLOBAL_POOL_5 = "global_pool5"
    BILINEAR_UPSAMPLE_X2 = "bilinear_upsample_x2"
    TRANSPOSED_CONV_X2 = "transposed_conv_x2"


P = PrimitiveKind

# column order of the architecture matrices
CELL_OPS = (P.MAX_POOL3X3, P.SKIP, P.CONV3X3, P.ZERO, P.SEP_CONV3X3,
            P.DIL_SEP_CONV3X3_D2, P.DIL_SEP_CONV3X3_D4, P.DIL_SEP_CONV3X3_D8)
FUSION_OPS = (P.CONV1X1, P.CONV3X3, P.SEP_CONV3X3, P.DIL_SEP_CONV3X3_D2,
              P.DIL_SEP_CONV3X3_D4, P.DIL_SEP_CONV3X3_D8, P.DIL_SEP_CONV3X3_D12,
              P.GLOBAL_POOL_1, P.GLOBAL_POOL_2, P.GLOBAL_POOL_5)
UP_OPS = (P.TRANSPOSED_CONV_X2, P.BILINEAR_UPSAMPLE_X2)

DILATION = {P.SEP_CONV3X3: 1, P.DIL_SEP_CONV3X3_D2: 2, P.DIL_SEP_CONV3X3_D4: 4,
            P.DIL_SEP_CONV3X3_D8: 8, P.DIL_SEP_CONV3X3_D12: 12}
POOL_SIZE = {P.GLOBAL_POOL_1: 1, P.GLOBAL_POOL_2: 2, P.GLOBAL_POOL_5: 5}
LIGHTWEIGHT = frozenset({P.ZERO, P.SKIP, P.MAX_POOL3X3})


def is_parametric(kind, stride=1):
    if kind is P.SKIP:
        return stride == 2
    return kind not in (P.ZERO, P.MAX_POOL3X3, P.BILINEAR_UPSAMPLE_X2)


def _conv_weight(rng, o, c, k):
    std = np.sqrt(2.0 / (c * k * k))
    return Tensor(rng.normal(0.0, std, (o, c, k, k)), requires_grad=True)


def _bn(c):
    return {"gamma": Tensor(np.ones(c), requires_grad=True),
            "beta": Tensor(np.zeros(c), requires_grad=True),
            "running_mean": np.zeros(c), "running_var": np.ones(c)}


def init_weights(kind, c_in, c_out, stride, rng):
    """Fresh parameter set for ``kind``; ``None`` for parameter-free kinds."""
    kind = P(kind)
    if not is_parametric(kind, stride):
        return None
    if kind in (P.CONV3X3, P.CONV1X1, P.SKIP):
        k = 3 if kind is P.CONV3X3 else 1
        return {"w": _conv_weight(rng, c_out, c_in, k), **_bn(c_out)}
    if kind in DILATION:
        return {"dw": _conv_weight(rng, c_in, 1, 3), "pw": _conv_weight(rng, c_out, c_in, 1),
                **_bn(c_out)}
    if kind in POOL_SIZE:
        return {"w": _conv_weight(rng, c_out, c_in, 1),
                "b": Tensor(np.zeros(c_out), requires_grad=True)}
    if kind is P.TRANSPOSED_CONV_X2:
        std = np.sqrt(2.0 / c_in)
        return {"w": Tensor(rng.normal(0.0, std, (c_in, c_out, 2, 2)), requires_grad=True),
                **_bn(c_out)}
    raise ValueError(f"no parameters defined for {kind}")


def weight_tensors(weights):
    """Trainable tensors of a parameter set, in a stable order."""
    if not weights:
        return []
    return [weights[k] for k in sorted(weights) if isinstance(weights[k], Tensor)]


def _norm(x, weights, training):
    return T.batch_norm(x, weights["gamma"], weights["beta"], weights["running_mean"],
                        weights["running_var"], training=training)


def output_shape(kind, in_shape, c_out, stride=1):
    b, _, h, w = in_shape
    if P(kind) in UP_OPS:
        return (b, c_out, 2 * h, 2 * w)
    return (b, c_out, h // stride, w // stride)


def apply_primitive(kind, x, weights=None, stride=1, c_out=None, training=True,
                    activated=None):
    """Run candidate operation ``kind`` on a (B,C,H,W) batch.

    Parametric kinds apply ReLU -> convolution -> batch norm.  ``zero`` returns
    an all-zero tensor; ``skip`` at stride 2 needs its 1x1-conv weights.
    ``activated`` may carry a precomputed ``relu(x)`` shared between ops.
    """
    kind = P(kind)
    b, c, h, w = x.shape
    c_out = c if c_out is None else c_out
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if h % stride or w % stride:
        raise ValueError(f"spatial extents {(h, w)} not divisible by stride {stride}")
    if is_parametric(kind, stride) and weights is None:
        raise ValueError(f"{kind.value} needs weights"
                         + (" (stride-2 skip is a 1x1 conv)" if kind is P.SKIP else ""))
    if kind in UP_OPS and stride != 1:
        raise ValueError("upsampling edges take stride 1")

    if kind is P.ZERO:
        return Tensor(np.zeros(output_shape(kind, x.shape, c_out, stride)))
    if kind is P.SKIP and stride == 1:
        if c_out != c:
            raise ValueError("identity cannot change channel count")
        return x
    if kind is P.MAX_POOL3X3:
        if c_out != c:
            raise ValueError("pooling cannot change channel count")
        return T.max_pool3x3(x, stride)
    if kind is P.BILINEAR_UPSAMPLE_X2:
        if c_out != c:
            raise ValueError("bilinear upsampling cannot change channel count")
        return T.resize_bilinear(x, (2 * h, 2 * w))

    y = T.relu(x) if activated is None else activated
    if kind in (P.CONV3X3, P.CONV1X1, P.SKIP):
        k = 3 if kind is P.CONV3X3 else 1
        y = T.conv2d(y, weights["w"], stride=stride, padding=k // 2)
    elif kind in DILATION:
        d = DILATION[kind]
        y = T.conv2d(y, weights["dw"], stride=stride, padding=d, dilation=d, groups=c)
        y = T.conv2d(y, weights["pw"])
    elif kind is P.TRANSPOSED_CONV_X2:
        y = T.conv_transpose2x2(y, weights["w"])
    elif kind in POOL_SIZE:
        # no norm here: a k x k pooled map gives degenerate batch statistics
        k = POOL_SIZE[kind]
        y = T.adaptive_avg_pool(y, k)
        y = T.conv2d(y, weights["w"], weights["b"])
        return T.resize_bilinear(y, (h // stride, w // stride))
    else:
        raise ValueError(f"unhandled primitive {kind}")
    if y.shape[1] != c_out:
        raise ValueError(f"{kind.value} produced {y.shape[1]} channels, expected {c_out}")
    return _norm(y, weights, training)


class Op:
    """A primitive bound to its own weights and stride."""

    def __init__(self, kind, c_in, c_out, stride, rng):
        self.kind = P(kind)
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.weights = init_weights(self.kind, c_in, c_out, stride, rng)

    def __call__(self, x, training=True, activated=None):
        return apply_primitive(self.kind, x, self.weights, self.stride, self.c_out, training,
                               activated)

    def parameters(self):
        return weight_tensors(self.weights)

    def __repr__(self):
        return f"Op({self.kind.value}, {self.c_in}->{self.c_out}, s{self.stride})"


class ConvBN:
    """Fixed (non-searched) conv block used for stem, preprocessing and fusion inputs."""

    def __init__(self, c_in, c_out, k, stride, rng, relu_first=True, relu_after=False):
        self.w = _conv_weight(rng, c_out, c_in, k)
        self.bn = _bn(c_out)
        self.k, self.stride = k, stride
        self.relu_first, self.relu_after = relu_first, relu_after

    def __call__(self, x, training=True):
        if self.relu_first:
            x = T.relu(x)
        y = T.conv2d(x, self.w, stride=self.stride, padding=self.k // 2)
        y = _norm(y, self.bn, training)
        return T.relu(y) if self.relu_after else y

    def parameters(self):
        return [self.w, self.bn["beta"], self.bn["gamma"]]
