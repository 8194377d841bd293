"""Loss functions and embedding distances.

Distances default to Euclidean on raw embeddings; ``metric`` may also be
"sqeuclidean" or "cosine" (config-level choice, fixed per run).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

METRICS = ("euclidean", "sqeuclidean", "cosine")


def _check_label(num_classes: int, label: int) -> int:
    label = int(label)
    if not 0 <= label < num_classes:
        raise ValueError(f"label {label} out of range for {num_classes} classes")
    return label


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label], computed stably via logsumexp."""
    logits = ad.as_tensor(logits)
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy: expected a logit vector, got {logits.shape}")
    label = _check_label(logits.data.shape[0], label)
    return ad.logsumexp(logits) - ad.pick(logits, label)


def cross_entropy_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over a batch of logit rows."""
    logits = ad.as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_mean: expected a logit matrix, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy_mean: labels shape {labels.shape} vs logits {logits.shape}"
        )
    for y in labels:
        _check_label(logits.data.shape[1], y)
    per_sample = ad.logsumexp(logits, axis=1) - ad.pick_rows(logits, labels)
    return ad.tmean(per_sample)


def distance(e1: Tensor, e2: Tensor, metric: str = "euclidean") -> Tensor:
    """Distance between two embedding vectors."""
    e1, e2 = ad.as_tensor(e1), ad.as_tensor(e2)
    if e1.shape != e2.shape or e1.data.ndim != 1:
        raise ShapeError(f"distance: incompatible shapes {e1.shape} and {e2.shape}")
    if metric == "euclidean":
        diff = e1 - e2
        return ad.sqrt(ad.tsum(ad.square(diff)))
    if metric == "sqeuclidean":
        diff = e1 - e2
        return ad.tsum(ad.square(diff))
    if metric == "cosine":
        n1 = ad.sqrt(ad.tsum(ad.square(e1)))
        n2 = ad.sqrt(ad.tsum(ad.square(e2)))
        return 1.0 - ad.dot(e1, e2) / (n1 * n2)
    raise ValueError(f"unknown metric {metric!r}")


def batch_distance(e1: Tensor, e2: Tensor, metric: str = "euclidean") -> Tensor:
    """Row-wise distances between two aligned embedding matrices."""
    e1, e2 = ad.as_tensor(e1), ad.as_tensor(e2)
    if e1.shape != e2.shape or e1.data.ndim != 2:
        raise ShapeError(f"batch_distance: incompatible shapes {e1.shape} and {e2.shape}")
    if metric == "euclidean":
        return ad.sqrt(ad.sumax(ad.square(e1 - e2), axis=1))
    if metric == "sqeuclidean":
        return ad.sumax(ad.square(e1 - e2), axis=1)
    if metric == "cosine":
        n1 = ad.sqrt(ad.sumax(ad.square(e1), axis=1))
        n2 = ad.sqrt(ad.sumax(ad.square(e2), axis=1))
        return 1.0 - ad.sumax(ad.mul(e1, e2), axis=1) / (n1 * n2)
    raise ValueError(f"unknown metric {metric!r}")


def pairwise_distances(a: np.ndarray, b: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """All-pairs distance matrix between rows of two arrays (no graph)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_distances: dims {a.shape[1]} and {b.shape[1]} differ")
    if metric == "cosine":
        na = np.linalg.norm(a, axis=1, keepdims=True)
        nb = np.linalg.norm(b, axis=1, keepdims=True)
        return 1.0 - (a @ b.T) / (na * nb.T)
    diff = a[:, None, :] - b[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    if metric == "sqeuclidean":
        return sq
    if metric == "euclidean":
        return np.sqrt(sq)
    raise ValueError(f"unknown metric {metric!r}")


def triplet_loss(
    anchor: Tensor, positive: Tensor, negative: Tensor, margin: float, metric: str = "euclidean"
) -> Tensor:
    """max(d(a, p) - d(a, n) + margin, 0)."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    d_ap = distance(anchor, positive, metric)
    d_an = distance(anchor, negative, metric)
    return ad.relu(d_ap - d_an + margin)


def focal_loss(logits: Tensor, label: int, gamma: float = 2.0) -> Tensor:
    """Cross-entropy scaled by (1 - p_true)^gamma."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    ce = cross_entropy(logits, label)
    if gamma == 0.0:
        return ce
    p_true = ad.exp(-ce)
    return ad.pow_const(1.0 - p_true, gamma) * ce


def focal_loss_mean(logits: Tensor, labels: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Mean focal loss over a batch of logit rows."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    per_sample = ad.logsumexp(logits, axis=1) - ad.pick_rows(logits, labels)
    if gamma == 0.0:
        return ad.tmean(per_sample)
    weights = ad.pow_const(1.0 - ad.exp(-per_sample), gamma)
    return ad.tmean(ad.mul(weights, per_sample))
