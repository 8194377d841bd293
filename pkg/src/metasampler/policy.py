"""Sampling policies and the fixed baseline selection strategies.

A :class:`SamplingPolicy` is an immutable probability vector over sample ids.
Learned policies come from a stabilized softmax over energies; restriction to
a subset renormalizes the surviving mass to sum to one.  Batch draws are
sequential without replacement (each draw renormalizes the remainder), which
keeps mini-batches duplicate-free; with-replacement drawing is available as an
explicit mode.

Tie-breaking in the baseline selectors is always by lowest sample id so that
selections are invariant under batch reordering.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .losses import pairwise_distances

PROB_SUM_TOL = 1e-9


class PolicyError(Exception):
    pass


@dataclass(frozen=True)
class SamplingPolicy:
    ids: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "probs", probs)
        if ids.ndim != 1 or probs.shape != ids.shape:
            raise PolicyError(f"ids/probs shape mismatch: {ids.shape} vs {probs.shape}")
        if ids.size == 0:
            raise PolicyError("empty policy")
        if len(np.unique(ids)) != ids.size:
            raise PolicyError("duplicate ids in policy")
        if np.any(probs < 0):
            raise PolicyError("negative probability")
        if abs(probs.sum() - 1.0) > PROB_SUM_TOL:
            raise PolicyError(f"probabilities sum to {probs.sum()!r}, not 1")

    def __len__(self) -> int:
        return int(self.ids.size)

    def prob_of(self, sample_id: int) -> float:
        pos = np.flatnonzero(self.ids == sample_id)
        if pos.size == 0:
            raise PolicyError(f"id {sample_id} not in policy")
        return float(self.probs[pos[0]])


def softmax_policy(ids: Sequence[int], energies: Sequence[float]) -> SamplingPolicy:
    """Policy proportional to exp(energy), computed with max subtraction."""
    energies = np.asarray(energies, dtype=np.float64)
    if energies.size == 0:
        raise PolicyError("softmax_policy: no energies")
    if not np.all(np.isfinite(energies)):
        raise PolicyError("softmax_policy: non-finite energy")
    e = np.exp(energies - energies.max())
    return SamplingPolicy(np.asarray(ids, dtype=np.int64), e / e.sum())


def uniform_policy(ids: Sequence[int]) -> SamplingPolicy:
    ids = np.asarray(ids, dtype=np.int64)
    return SamplingPolicy(ids, np.full(ids.size, 1.0 / ids.size))


def weighted_policy(ids: Sequence[int], weights: Sequence[float]) -> SamplingPolicy:
    """Fixed policy proportional to nonnegative weights."""
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise PolicyError("weights must be nonnegative with positive total")
    return SamplingPolicy(np.asarray(ids, dtype=np.int64), weights / weights.sum())


def normalize_subset(policy: SamplingPolicy, subset_ids: Sequence[int]) -> SamplingPolicy:
    """Restrict a policy to a subset and renormalize the surviving mass."""
    subset = np.asarray(subset_ids, dtype=np.int64)
    if subset.size == 0:
        raise PolicyError("normalize_subset: empty subset")
    pos_by_id = {int(i): k for k, i in enumerate(policy.ids)}
    try:
        positions = np.array([pos_by_id[int(i)] for i in subset], dtype=np.int64)
    except KeyError as exc:
        raise PolicyError(f"normalize_subset: id {exc} not in policy") from exc
    mass = policy.probs[positions].sum()
    if mass <= 0.0:
        raise PolicyError("normalize_subset: subset has zero total mass")
    return SamplingPolicy(subset, policy.probs[positions] / mass)


def draw(
    policy: SamplingPolicy,
    count: int,
    rng: np.random.Generator,
    replace: bool = False,
) -> np.ndarray:
    """Draw ``count`` sample ids from the policy.

    Without replacement the ids are drawn one at a time, renormalizing after
    each draw.  If the remaining mass underflows to zero mid-draw the
    remainder falls back to uniform (softmax tails can underflow in float64).
    """
    if count < 1:
        raise PolicyError("draw: count must be >= 1")
    if replace:
        return rng.choice(policy.ids, size=count, replace=True, p=policy.probs)
    if count > len(policy):
        raise PolicyError(f"draw: count {count} exceeds policy size {len(policy)}")
    ids = policy.ids.copy()
    probs = policy.probs.copy()
    out = np.empty(count, dtype=np.int64)
    for k in range(count):
        total = probs.sum()
        if total > 0.0:
            j = rng.choice(ids.size, p=probs / total)
        else:
            j = rng.choice(ids.size)
        out[k] = ids[j]
        ids = np.delete(ids, j)
        probs = np.delete(probs, j)
    return out


def entropy(policy: SamplingPolicy) -> float:
    p = policy.probs[policy.probs > 0]
    return float(-(p * np.log(p)).sum())


def dump_policy_csv(policy: SamplingPolicy, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "probability"])
        for sample_id, prob in zip(policy.ids, policy.probs):
            writer.writerow([int(sample_id), repr(float(prob))])


def ohem_select(
    ids: Sequence[int],
    labels: Sequence[int],
    embeddings: Mapping[int, np.ndarray],
    metric: str = "euclidean",
) -> list[tuple[int, int, int]]:
    """Batch-hard triplets: per anchor the farthest positive and nearest negative.

    Anchors without any positive in the batch are skipped.  Ties go to the
    lowest sample id.
    """
    ids = np.asarray(ids, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    order = np.argsort(ids)
    ids, labels = ids[order], labels[order]
    vecs = np.stack([np.asarray(embeddings[int(i)], dtype=np.float64) for i in ids])
    dists = pairwise_distances(vecs, vecs, metric)
    triplets = []
    for k, anchor in enumerate(ids):
        same = (labels == labels[k]) & (ids != anchor)
        diff = labels != labels[k]
        if not same.any() or not diff.any():
            continue
        pos_idx = _argbest(dists[k], same, hardest_max=True)
        neg_idx = _argbest(dists[k], diff, hardest_max=False)
        triplets.append((int(anchor), int(ids[pos_idx]), int(ids[neg_idx])))
    return triplets


def _argbest(row: np.ndarray, mask: np.ndarray, hardest_max: bool) -> int:
    candidates = np.flatnonzero(mask)
    values = row[candidates]
    best = values.max() if hardest_max else values.min()
    # ids are sorted ascending, so the first hit is the lowest id
    return int(candidates[np.flatnonzero(values == best)[0]])


def semihard_select(
    anchor_id: int,
    positive_ids: Sequence[int],
    negative_ids: Sequence[int],
    embeddings: Mapping[int, np.ndarray],
    margin: float,
    rng: np.random.Generator,
    metric: str = "euclidean",
) -> tuple[int, int, int]:
    """Random positive, then the closest negative inside the margin band.

    Band: d(a, p) < d(a, n) < d(a, p) + margin.  If empty, fall back to the
    closest negative beyond d(a, p); if none, the farthest negative.
    """
    positive_ids = np.sort(np.asarray(positive_ids, dtype=np.int64))
    negative_ids = np.sort(np.asarray(negative_ids, dtype=np.int64))
    if positive_ids.size == 0 or negative_ids.size == 0:
        raise PolicyError("semihard_select: empty candidate set")
    anchor_vec = np.asarray(embeddings[int(anchor_id)], dtype=np.float64)
    pos_id = int(rng.choice(positive_ids))
    d_ap = float(
        pairwise_distances(anchor_vec, embeddings[pos_id], metric)[0, 0]
    )
    neg_vecs = np.stack([np.asarray(embeddings[int(i)], dtype=np.float64) for i in negative_ids])
    d_an = pairwise_distances(anchor_vec, neg_vecs, metric)[0]
    band = (d_an > d_ap) & (d_an < d_ap + margin)
    beyond = d_an > d_ap
    if band.any():
        neg_idx = _argbest(d_an, band, hardest_max=False)
    elif beyond.any():
        neg_idx = _argbest(d_an, beyond, hardest_max=False)
    else:
        neg_idx = _argbest(d_an, np.ones_like(beyond), hardest_max=True)
    return int(anchor_id), pos_id, int(negative_ids[neg_idx])
