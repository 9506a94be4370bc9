"""Retrieval metrics: mAP and CMC under the cross-camera protocol.

Gallery entries sharing both identity and camera with the query are removed
before ranking, so a match only counts when it crosses cameras. Queries left
with no relevant gallery entry are skipped and reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Metrics:
    mean_ap: float
    cmc: np.ndarray                 # cmc[k] = Rank-(k+1)
    num_queries: int
    num_skipped: int
    per_query_ap: np.ndarray = field(repr=False, default=None)

    def rank(self, n: int) -> float:
        return float(self.cmc[n - 1])


def rank_gallery(
    query_feat: np.ndarray,
    query_id: int,
    query_cam: int,
    gallery_feats: np.ndarray,
    gallery_ids: np.ndarray,
    gallery_cams: np.ndarray,
):
    """Cosine-ranked gallery indices for one query, protocol filter applied.

    Returns (ranked gallery indices, relevance flags in ranked order).
    Ties keep the lower gallery index first.
    """
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    valid = ~((gallery_ids == query_id) & (gallery_cams == query_cam))
    idx = np.flatnonzero(valid)
    sims = gallery_feats[idx] @ np.asarray(query_feat)
    order = np.argsort(-sims, kind="stable")
    ranked = idx[order]
    return ranked, gallery_ids[ranked] == query_id


def average_precision(relevance: np.ndarray) -> float | None:
    """Mean of precision at each relevant rank; None when nothing is relevant."""
    relevance = np.asarray(relevance, dtype=bool)
    hits = np.flatnonzero(relevance)
    if hits.size == 0:
        return None
    precision = np.arange(1, hits.size + 1) / (hits + 1.0)
    return float(precision.mean())


def first_hit_rank(relevance: np.ndarray) -> int | None:
    """1-based rank of the first relevant entry; None when nothing is relevant."""
    hits = np.flatnonzero(np.asarray(relevance, dtype=bool))
    return int(hits[0]) + 1 if hits.size else None


def evaluate(
    query_feats: np.ndarray,
    query_ids: np.ndarray,
    query_cams: np.ndarray,
    gallery_feats: np.ndarray,
    gallery_ids: np.ndarray,
    gallery_cams: np.ndarray,
    max_rank: int = 10,
) -> Metrics:
    nq = query_feats.shape[0]
    if nq == 0:
        raise ValueError("no queries to evaluate")
    aps = []
    cmc_hits = np.zeros(max_rank)
    skipped = 0
    for q in range(nq):
        _, rel = rank_gallery(
            query_feats[q],
            int(query_ids[q]),
            int(query_cams[q]),
            gallery_feats,
            gallery_ids,
            gallery_cams,
        )
        ap = average_precision(rel)
        if ap is None:
            skipped += 1
            continue
        aps.append(ap)
        r = first_hit_rank(rel)
        if r <= max_rank:
            cmc_hits[r - 1 :] += 1.0
    if not aps:
        raise ValueError("every query was skipped: no cross-camera matches exist")
    aps = np.asarray(aps)
    return Metrics(
        mean_ap=float(aps.mean()),
        cmc=cmc_hits / len(aps),
        num_queries=len(aps),
        num_skipped=skipped,
        per_query_ap=aps,
    )


def chance_baseline(
    query_ids: np.ndarray,
    query_cams: np.ndarray,
    gallery_ids: np.ndarray,
    gallery_cams: np.ndarray,
    trials: int = 50,
    seed: int = 0,
    max_rank: int = 10,
):
    """Monte-Carlo mAP of random rankings under the same protocol.

    Returns (mean, std) of the trial mAPs. A trained model should clear
    mean + 3 * std before its retrieval quality means anything.
    """
    if trials < 2:
        raise ValueError(f"need at least 2 trials, got {trials}")
    rng = np.random.default_rng(seed)
    ng = len(gallery_ids)
    maps = np.empty(trials)
    dim = 8
    for t in range(trials):
        qf = rng.normal(size=(len(query_ids), dim))
        gf = rng.normal(size=(ng, dim))
        qf /= np.linalg.norm(qf, axis=1, keepdims=True)
        gf /= np.linalg.norm(gf, axis=1, keepdims=True)
        maps[t] = evaluate(
            qf, query_ids, query_cams, gf, gallery_ids, gallery_cams, max_rank
        ).mean_ap
    return float(maps.mean()), float(maps.std())
