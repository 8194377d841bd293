"""Retrieval metrics: mean average precision, CMC Rank-k, accuracy.

Protocol: for each query, gallery samples sharing the query's identity *and*
mode are excluded (the mode plays the camera's role), remaining gallery items
are ranked by embedding distance with ties broken by gallery id ascending,
and relevance means same identity.  Queries with no relevant gallery item
after exclusion are skipped and counted.

AP uses the precision-at-relevant-positions form: the mean over relevant
ranks k of (number of relevant items in the top k) / k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .data import Dataset
from .losses import pairwise_distances


@dataclass
class RankedResult:
    query_id: int
    gallery_ids: np.ndarray  # ascending distance, ties by id
    relevance: np.ndarray  # bool, aligned with gallery_ids


def rank_gallery(
    query_id: int,
    query_emb: np.ndarray,
    gallery_ids: np.ndarray,
    gallery_embs: np.ndarray,
    relevant: np.ndarray,
    exclude: np.ndarray,
    metric: str = "euclidean",
) -> RankedResult | None:
    """Rank the non-excluded gallery by distance; None if nothing remains."""
    keep = ~np.asarray(exclude, dtype=bool)
    if not keep.any():
        return None
    ids = np.asarray(gallery_ids, dtype=np.int64)[keep]
    dists = pairwise_distances(query_emb, np.asarray(gallery_embs)[keep], metric)[0]
    order = np.lexsort((ids, dists))
    rel = np.asarray(relevant, dtype=bool)[keep]
    return RankedResult(query_id=int(query_id), gallery_ids=ids[order], relevance=rel[order])


def average_precision(result: RankedResult) -> float | None:
    rel = result.relevance
    if not rel.any():
        return None
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float(np.mean(hits[rel] / ranks))


def first_relevant_rank(result: RankedResult) -> int | None:
    hits = np.flatnonzero(result.relevance)
    return None if hits.size == 0 else int(hits[0]) + 1


def cmc_rank_k(results: list[RankedResult], k: int) -> float:
    """Fraction of queries whose first relevant hit lands in the top k."""
    if k < 1:
        raise ValueError("cmc_rank_k: k must be >= 1")
    if not results:
        return 0.0
    hits = [first_relevant_rank(r) for r in results]
    return float(np.mean([h is not None and h <= k for h in hits]))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax-correct rows; argmax ties go to the lowest class id."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if len(logits) == 0:
        raise ValueError("accuracy: empty batch")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _evaluate_rows(
    dataset: Dataset,
    params: models.ModelParams,
    query_rows: np.ndarray,
    gallery_rows: np.ndarray,
    metric: str,
    mode_exclusion: bool = True,
) -> dict:
    q_embs = models.embed_array(dataset.features[query_rows], params)
    g_embs = models.embed_array(dataset.features[gallery_rows], params)
    g_labels = dataset.labels[gallery_rows]
    g_modes = dataset.modes[gallery_rows]
    results = []
    skipped = 0
    for i, row in enumerate(query_rows):
        relevant = g_labels == dataset.labels[row]
        exclude = (
            relevant & (g_modes == dataset.modes[row])
            if mode_exclusion
            else np.zeros_like(relevant)
        )
        ranked = rank_gallery(
            int(row), q_embs[i], gallery_rows, g_embs, relevant, exclude, metric
        )
        if ranked is None or not ranked.relevance.any():
            skipped += 1
            continue
        results.append(ranked)
    aps = [average_precision(r) for r in results]
    return {
        "mAP": float(np.mean(aps)) if aps else 0.0,
        "rank1": cmc_rank_k(results, 1),
        "rank5": cmc_rank_k(results, 5),
        "num_queries": len(results),
        "num_skipped": skipped,
    }


def evaluate_retrieval(
    dataset: Dataset, params: models.ModelParams, metric: str = "euclidean"
) -> dict:
    """mAP / Rank-1 / Rank-5 over the dataset's query/gallery split."""
    return _evaluate_rows(
        dataset, params, dataset.query_ids, dataset.gallery_ids, metric
    )


def evaluate_cross_view(
    dataset: Dataset, params: models.ModelParams, metric: str = "euclidean"
) -> dict:
    """Per-mode metrics where each query's gallery holds other modes only."""
    from .data import cross_view_eval_split

    split = cross_view_eval_split(dataset)
    report = {"dropped_queries": split.dropped_queries, "groups": {}}
    for group in split.groups:
        if group.query_rows.size == 0:
            report["groups"][str(group.mode)] = None
            continue
        report["groups"][str(group.mode)] = _evaluate_rows(
            dataset, params, group.query_rows, group.gallery_rows, metric
        )
    return report
