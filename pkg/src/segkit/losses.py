"""Segmentation losses (differentiable, on Tensors) and hard-mask metrics (on arrays)."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

EPS = 1e-7
PROB_CLAMP = 1e-7
VARIANTS = ("aggregate", "per_pixel")


def _check_shapes(a, b):
    sa = a.shape
    sb = b.shape
    if tuple(sa) != tuple(sb):
        raise ShapeError(f"shape mismatch: {tuple(sa)} vs {tuple(sb)}")


def _labels(labels, like: Tensor) -> Tensor:
    if isinstance(labels, Tensor):
        return labels
    return Tensor(np.asarray(labels, dtype=like.dtype))


def _clamped(probs: Tensor) -> Tensor:
    lo = PROB_CLAMP
    hi = float(np.asarray(1 - PROB_CLAMP, dtype=probs.dtype))
    return T.clip(probs, lo, hi)


# ---------------------------------------------------------------- hard metrics

def _as_bool(m) -> np.ndarray:
    m = np.asarray(m)
    return m > 0 if m.dtype != bool else m


def iou_binary(a, b) -> float:
    """|A & B| / |A | B| on binary masks; 1.0 when both are empty."""
    _check_shapes(np.asarray(a), np.asarray(b))
    a, b = _as_bool(a), _as_bool(b)
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a) + np.count_nonzero(b) - inter
    return 1.0 if union == 0 else inter / union


def dice(a, b) -> float:
    """2|A & B| / (|A| + |B|); 1.0 when both are empty."""
    _check_shapes(np.asarray(a), np.asarray(b))
    a, b = _as_bool(a), _as_bool(b)
    inter = np.count_nonzero(a & b)
    total = np.count_nonzero(a) + np.count_nonzero(b)
    return 1.0 if total == 0 else 2 * inter / total


# ---------------------------------------------------------------- training losses

def soft_jaccard(probs: Tensor, labels, eps: float = EPS) -> Tensor:
    """Mean over pixels of y*p / (y + p - y*p + eps)."""
    y = _labels(labels, probs)
    _check_shapes(probs, y)
    inter = probs * y
    return T.mean(inter / (y + probs - inter + eps))


def aggregate_jaccard(probs: Tensor, labels, eps: float = EPS) -> Tensor:
    """(sum y*p + eps) / (sum y + sum p - sum y*p + eps) over the whole batch."""
    y = _labels(labels, probs)
    _check_shapes(probs, y)
    inter = T.tsum(probs * y)
    union = T.tsum(y) + T.tsum(probs) - inter
    return (inter + eps) / (union + eps)


def bce(probs: Tensor, labels) -> Tensor:
    y = _labels(labels, probs)
    _check_shapes(probs, y)
    p = _clamped(probs)
    return -T.mean(y * T.log(p) + (1 - y) * T.log(1 - p))


def categorical_cross_entropy(probs: Tensor, onehot) -> Tensor:
    """Mean over pixels of -sum_c y_c log p_c; probs and onehot are N x C x H x W."""
    y = _labels(onehot, probs)
    _check_shapes(probs, y)
    n_pixels = probs.size // probs.shape[1]
    return -T.tsum(y * T.log(_clamped(probs))) / n_pixels


def jaccard_term(probs: Tensor, labels, variant: str = "aggregate", eps: float = EPS) -> Tensor:
    if variant == "aggregate":
        return aggregate_jaccard(probs, labels, eps)
    if variant == "per_pixel":
        return soft_jaccard(probs, labels, eps)
    raise ValueError(f"unknown jaccard variant {variant!r}; expected one of {VARIANTS}")


def combined_loss(probs: Tensor, labels, variant: str = "aggregate", eps: float = EPS) -> Tensor:
    return combined_loss_parts(probs, labels, variant, eps)[0]


def combined_loss_parts(probs: Tensor, labels, variant: str = "aggregate",
                        eps: float = EPS) -> tuple[Tensor, Tensor]:
    """H - log J, with H the binary cross entropy and J the soft Jaccard index.

    The aggregate form is strictly positive thanks to ``eps``. The literal
    per-pixel form is exactly zero on label-free batches, so it is floored at
    ``eps`` before the log. Both are capped at 1 against rounding.
    """
    p = _clamped(probs)
    j = jaccard_term(p, labels, variant, eps)
    j = T.clip(j, eps if variant == "per_pixel" else 0.0, 1.0)
    return bce(probs, labels) - T.log(j), j
