"""Episodic few-shot evaluation and retrieval metrics.

Episodes draw disjoint support/query sets over the hidden fine labels;
queries are classified by majority vote among their nearest supports under
either the ball metric (on exponentially mapped embeddings) or cosine
distance (on raw embeddings). Reports carry the mean accuracy with a 95%
confidence interval, plus Recall@k and mAP when retrieval is requested.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import geometry


class EpisodeInfeasibleError(RuntimeError):
    """A class in the episode pool cannot supply support + query samples."""


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    mode: str = "standard"
    n_episodes: int = 1000

    def __post_init__(self):
        if self.mode not in ("standard", "all_way", "intra_class"):
            raise ValueError(f"unknown episode mode {self.mode!r}")
        for name in ("n_way", "k_shot", "n_query", "n_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class EvalReport:
    mode: str
    n_way: int
    k_shot: int
    n_episodes: int
    mean_acc: float
    ci95: float
    metric: str
    recall: dict | None = None
    map: float | None = None
    accuracies: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {
            "mode": self.mode,
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "n_episodes": self.n_episodes,
            "mean_acc": self.mean_acc,
            "ci95": self.ci95,
            "metric": self.metric,
            "recall": None if self.recall is None
                      else {str(k): v for k, v in sorted(self.recall.items())},
            "map": self.map,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def embed_for_metric(projector_out, metric, curvature):
    """Embeddings as consumed by the chosen metric: ball points for the
    hyperbolic metric, raw features for cosine."""
    if metric == "poincare":
        return geometry.exp_map(projector_out, curvature)
    if metric == "cosine":
        return np.asarray(projector_out, dtype=np.float64)
    raise ValueError(f"unknown metric {metric!r}")


def pairwise_distances(a, b, metric, curvature=0.001):
    """(len(a), len(b)) distance table under the chosen metric."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if metric == "poincare":
        return geometry.poincare_distance(a[:, None, :], b[None, :, :], curvature)
    if metric == "cosine":
        an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-30)
        bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-30)
        return 1.0 - an @ bn.T
    raise ValueError(f"unknown metric {metric!r}")


def _class_indices(pool, classes, spec, rng):
    """Disjoint support/query index draws for the given fine classes."""
    need = spec.k_shot + spec.n_query
    support, query = [], []
    for cls in classes:
        rows = np.nonzero(pool.fine == cls)[0]
        if len(rows) < need:
            raise EpisodeInfeasibleError(
                f"fine class {int(cls)} has {len(rows)} samples, "
                f"needs {need} for a {spec.k_shot}-shot/{spec.n_query}-query episode")
        picked = rng.choice(rows, size=need, replace=False)
        support.append(picked[:spec.k_shot])
        query.append(picked[spec.k_shot:])
    return np.concatenate(support), np.concatenate(query)


def sample_episode(pool, spec, rng):
    """Draw one episode; returns (support_indices, query_indices).

    standard: n_way fine classes uniformly; all_way: every fine class;
    intra_class: one random coarse class and all its fine classes.
    """
    if not pool.has_fine:
        raise ValueError("episodic evaluation requires fine labels in the pool")
    all_fine = np.unique(pool.fine)
    if spec.mode == "standard":
        if spec.n_way > len(all_fine):
            raise EpisodeInfeasibleError(
                f"{spec.n_way}-way episode from {len(all_fine)} fine classes")
        classes = rng.choice(all_fine, size=spec.n_way, replace=False)
    elif spec.mode == "all_way":
        classes = all_fine
    else:
        coarse_classes = np.unique(pool.coarse)
        chosen = rng.choice(coarse_classes)
        classes = np.unique(pool.fine[pool.coarse == chosen])
    return _class_indices(pool, np.sort(classes), spec, rng)


def knn_classify(support_emb, support_labels, query_emb, k_nn=1,
                 metric="poincare", curvature=0.001):
    """Majority vote over the k nearest supports; ties take the smallest
    class index."""
    support_labels = np.asarray(support_labels, dtype=np.int64)
    if k_nn > len(support_labels):
        raise ValueError(f"k_nn={k_nn} exceeds support size {len(support_labels)}")
    dists = pairwise_distances(query_emb, support_emb, metric, curvature)
    nearest = np.argsort(dists, axis=1, kind="stable")[:, :k_nn]
    votes = support_labels[nearest]
    n_bins = int(support_labels.max()) + 1
    return np.array([np.bincount(row, minlength=n_bins).argmax() for row in votes],
                    dtype=np.int64)


def aggregate(accuracies):
    """Mean, 95% confidence interval (1.96 * std / sqrt(n)), and sample std."""
    accuracies = np.asarray(accuracies, dtype=np.float64)
    if accuracies.size < 2:
        raise ValueError("aggregate needs at least two episode accuracies")
    std = float(accuracies.std(ddof=1))
    ci = 1.96 * std / np.sqrt(accuracies.size)
    return float(accuracies.mean()), float(ci), std


def run_episodes(embeddings, pool, spec, rng, metric="poincare",
                 curvature=0.001, k_nn=1):
    """Evaluate n_episodes random episodes over precomputed embeddings."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if len(embeddings) != pool.n:
        raise ValueError("one embedding row per pool sample is required")
    accs = []
    n_way_seen = spec.n_way
    for _ in range(spec.n_episodes):
        sup, qry = sample_episode(pool, spec, rng)
        preds = knn_classify(embeddings[sup], pool.fine[sup], embeddings[qry],
                             k_nn=k_nn, metric=metric, curvature=curvature)
        accs.append(100.0 * float((preds == pool.fine[qry]).mean()))
        n_way_seen = len(np.unique(pool.fine[sup]))
    mean, ci, _ = aggregate(accs)
    return EvalReport(mode=spec.mode, n_way=n_way_seen, k_shot=spec.k_shot,
                      n_episodes=spec.n_episodes, mean_acc=mean, ci95=ci,
                      metric=metric, accuracies=accs)


def retrieval_metrics(gallery_emb, gallery_fine, query_emb, query_fine, ks,
                      metric="poincare", curvature=0.001,
                      gallery_instance=None, query_instance=None):
    """Recall@k and mean average precision over the full ranking.

    A query drawn from the gallery is excluded from its own ranking via the
    instance ids. Queries with no relevant gallery item are skipped.
    """
    gallery_fine = np.asarray(gallery_fine, dtype=np.int64)
    query_fine = np.asarray(query_fine, dtype=np.int64)
    if len(gallery_fine) == 0:
        raise ValueError("retrieval needs a nonempty gallery")
    dists = pairwise_distances(query_emb, gallery_emb, metric, curvature)
    if gallery_instance is not None and query_instance is not None:
        self_mask = (np.asarray(query_instance)[:, None]
                     == np.asarray(gallery_instance)[None, :])
        dists = np.where(self_mask, np.inf, dists)
    ks = sorted(int(k) for k in ks)
    hits = {k: 0 for k in ks}
    ap_values = []
    n_scored = 0
    for qi in range(len(query_fine)):
        order = np.argsort(dists[qi], kind="stable")
        ranked_rel = (gallery_fine[order] == query_fine[qi]) & np.isfinite(dists[qi][order])
        n_rel = int(ranked_rel.sum())
        if n_rel == 0:
            continue
        n_scored += 1
        for k in ks:
            if ranked_rel[:k].any():
                hits[k] += 1
        positions = np.nonzero(ranked_rel)[0] + 1
        precisions = np.arange(1, n_rel + 1) / positions
        ap_values.append(precisions.mean())
    if n_scored == 0:
        raise ValueError("no query has a relevant gallery item")
    recall = {k: 100.0 * hits[k] / n_scored for k in ks}
    return recall, 100.0 * float(np.mean(ap_values))
