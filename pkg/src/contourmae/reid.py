"""Unsupervised re-identification on top of a pretrained encoder.

Each epoch: extract unit-norm features for the training pool, cluster them
with DBSCAN over pairwise Jaccard distances, align cluster ids with earlier
epochs by greedy overlap matching, soften the one-hot assignments against
the previous epoch's labels, then fine-tune the encoder with a softened
contrastive loss against per-cluster centers kept in a momentum dictionary.
"""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from . import mae, nn
from .seeding import derive_seed

OUTLIER = -1


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def jaccard_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - <a,b> / (<a,a> + <b,b> - <a,b>).

    0 exactly when a == b. For unit-norm inputs the value stays in
    [0, 4/3]; the denominator is then 2 - <a,b> >= 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    num = float(np.dot(a, b))
    den = float(np.dot(a, a) + np.dot(b, b)) - num
    if den <= 0.0:
        raise ValueError("jaccard distance undefined for two zero vectors")
    return 1.0 - num / den


def pairwise_jaccard(features: np.ndarray) -> np.ndarray:
    """(N, N) distance matrix; exactly symmetric with an exactly zero diagonal."""
    f = np.asarray(features, dtype=np.float64)
    gram = f @ f.T
    sq = np.einsum("nd,nd->n", f, f)
    den = sq[:, None] + sq[None, :] - gram
    if np.any(den <= 0.0):
        raise ValueError("pairwise jaccard undefined: zero feature vector present")
    d = 1.0 - gram / den
    upper = np.triu(d, 1)
    d = upper + upper.T
    return d


# ---------------------------------------------------------------------------
# DBSCAN over a precomputed distance matrix
# ---------------------------------------------------------------------------

def dbscan(dist: np.ndarray, eps: float, min_samples: int) -> np.ndarray:
    """Labels in {0..C-1} plus OUTLIER for noise.

    A point is core when its eps-ball (self included) holds at least
    min_samples points. Clusters grow breadth-first from core points in
    row order, so the labeling is deterministic for a fixed matrix.
    """
    dist = np.asarray(dist)
    n = dist.shape[0]
    if dist.shape != (n, n):
        raise ValueError(f"distance matrix must be square, got {dist.shape}")
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    if min_samples < 1:
        raise ValueError(f"min_samples must be >= 1, got {min_samples}")
    neighbors = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    core = np.array([len(nb) >= min_samples for nb in neighbors])
    labels = np.full(n, OUTLIER, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != OUTLIER or not core[i]:
            continue
        labels[i] = cluster
        queue = deque(neighbors[i])
        while queue:
            j = queue.popleft()
            if labels[j] != OUTLIER:
                continue
            labels[j] = cluster
            if core[j]:
                queue.extend(neighbors[j])
        cluster += 1
    return labels


# ---------------------------------------------------------------------------
# Cross-epoch label alignment
# ---------------------------------------------------------------------------

class ClusterRegistry:
    """Stable global cluster ids across epochs.

    Fresh DBSCAN labels carry no identity between epochs; two runs of the
    same semantic cluster may get different numbers. The registry matches
    each new cluster to the previous epoch's global id it overlaps most
    (greedy, largest overlap first, ties to the smaller new id then the
    smaller global id) and mints fresh ids for unmatched clusters. A global
    id is reused by at most one new cluster per epoch.
    """

    def __init__(self):
        self.num_allocated = 0

    def assign(self, new_labels: np.ndarray, prev_global: np.ndarray | None = None) -> np.ndarray:
        new_labels = np.asarray(new_labels, dtype=np.int64)
        n = new_labels.shape[0]
        out = np.full(n, OUTLIER, dtype=np.int64)
        new_ids = np.unique(new_labels[new_labels != OUTLIER])
        mapping: dict = {}
        if prev_global is not None:
            prev_global = np.asarray(prev_global, dtype=np.int64)
            if prev_global.shape[0] != n:
                raise ValueError(
                    f"label vectors differ in length: {n} vs {prev_global.shape[0]}"
                )
            overlaps = []
            for nid in new_ids:
                members = new_labels == nid
                gids, counts = np.unique(
                    prev_global[members & (prev_global != OUTLIER)], return_counts=True
                )
                for g, c in zip(gids, counts):
                    overlaps.append((int(c), int(nid), int(g)))
            overlaps.sort(key=lambda t: (-t[0], t[1], t[2]))
            used = set()
            for _, nid, gid in overlaps:
                if nid in mapping or gid in used:
                    continue
                mapping[nid] = gid
                used.add(gid)
        for nid in new_ids:
            if nid not in mapping:
                mapping[nid] = self.num_allocated
                self.num_allocated += 1
        clustered = new_labels != OUTLIER
        out[clustered] = [mapping[int(v)] for v in new_labels[clustered]]
        return out


# ---------------------------------------------------------------------------
# Soft pseudo-labels
# ---------------------------------------------------------------------------

def soften_labels(
    hard: np.ndarray,
    num_global: int,
    blend: float,
    prev_soft: np.ndarray | None = None,
    prev_hard: np.ndarray | None = None,
    mode: str = "recursive",
) -> np.ndarray:
    """(N, num_global) distributions: blend * onehot(t) + (1-blend) * previous.

    ``mode`` picks what "previous" means: the previous soft distribution
    ("recursive") or the previous one-hot assignment ("literal"). Samples
    with no usable previous row (first epoch, or an outlier last epoch)
    get the pure one-hot. Current outliers get an all-zero row and are
    skipped by the loss. Clustered rows sum to 1 up to roundoff.
    """
    if not 0.0 <= blend <= 1.0:
        raise ValueError(f"blend must be in [0, 1], got {blend}")
    if mode not in ("recursive", "literal"):
        raise ValueError(f"unknown mode {mode!r}, expected 'recursive' or 'literal'")
    hard = np.asarray(hard, dtype=np.int64)
    n = hard.shape[0]
    clustered = hard != OUTLIER
    if clustered.any() and hard[clustered].max() >= num_global:
        raise ValueError("hard label exceeds num_global")
    onehot = np.zeros((n, num_global))
    onehot[clustered, hard[clustered]] = 1.0

    if mode == "recursive":
        prev = None if prev_soft is None else np.asarray(prev_soft, dtype=np.float64)
    else:
        if prev_hard is None:
            prev = None
        else:
            prev_hard = np.asarray(prev_hard, dtype=np.int64)
            prev = np.zeros((n, num_global))
            pc = prev_hard != OUTLIER
            prev[pc, prev_hard[pc]] = 1.0
    if prev is None:
        return onehot
    if prev.shape[0] != n:
        raise ValueError(f"previous labels cover {prev.shape[0]} samples, expected {n}")
    if prev.shape[1] < num_global:
        prev = np.pad(prev, ((0, 0), (0, num_global - prev.shape[1])))
    elif prev.shape[1] > num_global:
        raise ValueError("previous label width exceeds num_global")

    out = blend * onehot + (1.0 - blend) * prev
    fresh = clustered & (prev.sum(axis=1) == 0.0)
    out[fresh] = onehot[fresh]
    out[~clustered] = 0.0
    return out


# ---------------------------------------------------------------------------
# Cluster dictionary
# ---------------------------------------------------------------------------

@dataclass
class ClusterDictionary:
    ids: np.ndarray       # (C,) global ids, ascending
    centers: np.ndarray   # (C, d), unit rows

    def index_of(self, global_id: int) -> int:
        pos = np.searchsorted(self.ids, global_id)
        if pos >= self.ids.shape[0] or self.ids[pos] != global_id:
            raise KeyError(f"cluster id {global_id} not in dictionary")
        return int(pos)


def init_dictionary(features: np.ndarray, labels: np.ndarray) -> ClusterDictionary:
    """Per-cluster centers: normalized mean of member features. Outliers ignored."""
    labels = np.asarray(labels, dtype=np.int64)
    ids = np.unique(labels[labels != OUTLIER])
    if ids.size == 0:
        raise ValueError("no clusters to build a dictionary from")
    centers = np.empty((ids.size, features.shape[1]))
    for k, gid in enumerate(ids):
        mean = features[labels == gid].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            raise ValueError(f"cluster {gid} has a zero mean feature")
        centers[k] = mean / norm
    return ClusterDictionary(ids=ids, centers=centers)


def update_center(
    dictionary: ClusterDictionary, global_id: int, feature: np.ndarray, momentum: float
) -> None:
    """In-place momentum update, renormalized to unit length."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    k = dictionary.index_of(global_id)
    c = momentum * dictionary.centers[k] + (1.0 - momentum) * np.asarray(feature)
    norm = np.linalg.norm(c)
    if norm == 0.0:
        raise ValueError(f"update cancels center of cluster {global_id}")
    dictionary.centers[k] = c / norm


# ---------------------------------------------------------------------------
# Softened contrastive loss
# ---------------------------------------------------------------------------

def soft_contrast_loss(
    features: np.ndarray,
    soft: np.ndarray,
    dictionary: ClusterDictionary,
    temperature: float,
):
    """Cross-entropy between soft targets and softmax of (f . F_c) / tau.

    ``soft`` is (B, num_global) over global ids; each row is projected onto
    the dictionary's ids and renormalized. Rows with no mass on any live
    cluster are dropped. Returns (mean loss, dloss/dfeatures, kept row mask).
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    features = np.asarray(features, dtype=np.float64)
    proj = np.asarray(soft, dtype=np.float64)[:, dictionary.ids]
    mass = proj.sum(axis=1)
    keep = mass > 0.0
    if not keep.any():
        raise ValueError("no sample places mass on a live cluster")
    p = proj[keep] / mass[keep, None]
    f = features[keep]
    logits = (f @ dictionary.centers.T) / temperature
    m = logits.max(axis=1, keepdims=True)
    z = np.exp(logits - m)
    denom = z.sum(axis=1, keepdims=True)
    logprob = (logits - m) - np.log(denom)
    losses = -(p * logprob).sum(axis=1)
    loss = float(losses.mean())
    dlogits = (z / denom - p) / p.shape[0]
    dfeat = np.zeros_like(features)
    dfeat[keep] = (dlogits @ dictionary.centers) / temperature
    return loss, dfeat, keep


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class ReidConfig:
    epochs: int = 12
    batch_size: int = 32
    learning_rate: float = 3e-4
    weight_decay: float = 5e-4
    eps: float = 0.6
    min_samples: int = 4
    label_blend: float = 0.5
    center_momentum: float = 0.5
    temperature: float = 0.05
    label_mode: str = "soft"
    blend_mode: str = "recursive"
    seed: int = 0

    def __post_init__(self):
        if self.label_mode not in ("soft", "hard"):
            raise ValueError(f"label_mode must be 'soft' or 'hard', got {self.label_mode!r}")
        if not 0.0 <= self.label_blend <= 1.0:
            raise ValueError(f"label_blend must be in [0, 1], got {self.label_blend}")
        if not 0.0 <= self.center_momentum < 1.0:
            raise ValueError(
                f"center_momentum must be in [0, 1), got {self.center_momentum}"
            )
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.min_samples < 1:
            raise ValueError(f"min_samples must be >= 1, got {self.min_samples}")

    @classmethod
    def paper_scale(cls) -> "ReidConfig":
        return cls(epochs=50, learning_rate=1.5e-5, weight_decay=5e-4)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ReidConfig":
        return cls(**d)


def cluster_epoch(features: np.ndarray, cfg: ReidConfig, registry: ClusterRegistry,
                  prev_global: np.ndarray | None):
    """One clustering pass: distances, DBSCAN, global alignment."""
    dist = pairwise_jaccard(features)
    raw = dbscan(dist, cfg.eps, cfg.min_samples)
    return registry.assign(raw, prev_global)


def train_reid(
    model: mae.MAEModel,
    images: np.ndarray,
    cfg: ReidConfig,
    on_epoch=None,
):
    """Pseudo-label fine-tuning of a pretrained encoder.

    Returns (model, history) where history holds one record per epoch with
    the mean loss, cluster count, and outlier count. Raises when an epoch
    produces no clusters at all, since no update signal exists and later
    epochs would see the same features again.
    """
    optimizer = nn.AdamW(cfg.learning_rate, cfg.weight_decay)
    registry = ClusterRegistry()
    prev_global = None
    prev_soft = None
    history = []
    n = images.shape[0]
    for epoch in range(cfg.epochs):
        feats = mae.extract_features(model, images)
        global_labels = cluster_epoch(feats, cfg, registry, prev_global)
        clustered_idx = np.flatnonzero(global_labels != OUTLIER)
        if clustered_idx.size == 0:
            raise RuntimeError(
                f"epoch {epoch}: DBSCAN marked all {n} samples as outliers "
                f"(eps={cfg.eps}, min_samples={cfg.min_samples})"
            )
        num_global = registry.num_allocated
        if cfg.label_mode == "soft":
            soft = soften_labels(
                global_labels,
                num_global,
                cfg.label_blend,
                prev_soft=prev_soft,
                prev_hard=prev_global,
                mode=cfg.blend_mode,
            )
        else:
            soft = soften_labels(global_labels, num_global, 1.0)
        dictionary = init_dictionary(feats, global_labels)

        order = np.random.default_rng(
            derive_seed(cfg.seed, "reid-shuffle", epoch)
        ).permutation(clustered_idx)
        total, count = 0.0, 0
        for s in range(0, order.shape[0], cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            batch_feats, cache = mae.forward_features(model, images[idx], return_cache=True)
            loss, dfeat, keep = soft_contrast_loss(
                batch_feats, soft[idx], dictionary, cfg.temperature
            )
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite loss {loss} at epoch {epoch}")
            grads = mae.features_backward(model, cache, dfeat)
            optimizer.step(model.params, grads)
            for row, i in enumerate(idx):
                update_center(
                    dictionary,
                    int(global_labels[i]),
                    batch_feats[row],
                    cfg.center_momentum,
                )
            total += loss * int(keep.sum())
            count += int(keep.sum())
        record = {
            "epoch": epoch,
            "loss": total / count,
            "num_clusters": int(dictionary.ids.size),
            "num_outliers": int(n - clustered_idx.size),
        }
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        prev_global = global_labels
        prev_soft = soft
    return model, history
