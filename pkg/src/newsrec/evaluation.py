"""Per-impression ranking metrics, aggregate evaluation reports, PCA
projection of news embeddings, and silhouette-based discriminability.

AUC uses the rank-sum formulation with ties counted 0.5; MRR and nDCG rank
by descending score with stable index-order tie-breaking, matching
candidate ranking elsewhere in the package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata


class UndefinedMetric(ValueError):
    """The metric is undefined for this impression (e.g. no positives)."""


def auc_impression(scores, labels) -> float:
    """P(random positive outscores random negative), ties as 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _stable_order(scores) -> np.ndarray:
    """Indices by descending score; ties keep original index order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def mrr(scores, labels) -> float:
    """Mean reciprocal rank over all positives."""
    labels = np.asarray(labels)
    if not np.any(labels == 1):
        raise UndefinedMetric("MRR needs at least one positive")
    ranked = labels[_stable_order(scores)]
    rr = 1.0 / (np.flatnonzero(ranked == 1) + 1)
    return float(rr.mean())


def ndcg_at_k(scores, labels, k: int) -> float:
    """Binary-relevance nDCG@k with stable tie-breaking."""
    labels = np.asarray(labels, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if not np.any(labels == 1):
        raise UndefinedMetric("nDCG needs at least one positive")
    discounts = 1.0 / np.log2(np.arange(2, len(labels) + 2))
    ranked = labels[_stable_order(scores)]
    dcg = float((ranked[:k] * discounts[:k]).sum())
    ideal = np.sort(labels)[::-1]
    idcg = float((ideal[:k] * discounts[:k]).sum())
    return dcg / idcg


@dataclass
class ImpressionMetrics:
    auc: float
    mrr: float
    ndcg5: float
    ndcg10: float
    num_candidates: int
    num_positives: int


@dataclass
class EvalReport:
    per_impression: list[ImpressionMetrics] = field(default_factory=list)
    means: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def finalize(self):
        if self.per_impression:
            self.means = {
                "auc": float(np.mean([m.auc for m in self.per_impression])),
                "mrr": float(np.mean([m.mrr for m in self.per_impression])),
                "ndcg5": float(np.mean([m.ndcg5 for m in self.per_impression])),
                "ndcg10": float(np.mean([m.ndcg10 for m in self.per_impression])),
            }
        else:
            self.means = {k: float("nan") for k in ("auc", "mrr", "ndcg5", "ndcg10")}
        return self

    def to_json(self) -> str:
        histograms = {}
        edges = np.linspace(0.0, 1.0, 21)
        for key in ("auc", "mrr", "ndcg5", "ndcg10"):
            vals = [getattr(m, key) for m in self.per_impression]
            counts, _ = np.histogram(vals, bins=edges)
            histograms[key] = counts.tolist()
        payload = {
            "means": self.means,
            "num_impressions": len(self.per_impression),
            "histograms": histograms,
            "skipped": self.skipped,
            "metadata": self.metadata,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def score_impressions(scores_labels) -> EvalReport:
    """Aggregate (scores, labels) pairs into an EvalReport."""
    report = EvalReport()
    for scores, labels in scores_labels:
        labels = np.asarray(labels)
        n_pos = int((labels == 1).sum())
        n_neg = int(len(labels) - n_pos)
        if n_pos == 0:
            report.skipped["no_positive"] = report.skipped.get("no_positive", 0) + 1
            continue
        if n_neg == 0:
            report.skipped["no_negative"] = report.skipped.get("no_negative", 0) + 1
            continue
        report.per_impression.append(ImpressionMetrics(
            auc=auc_impression(scores, labels),
            mrr=mrr(scores, labels),
            ndcg5=ndcg_at_k(scores, labels, 5),
            ndcg10=ndcg_at_k(scores, labels, 10),
            num_candidates=len(labels), num_positives=n_pos))
    return report.finalize()


def encode_all_news(model, table, chunk: int = 256) -> np.ndarray:
    """(N, d) news embedding matrix under the current parameters (no grad)."""
    outs = []
    for start in range(0, len(table), chunk):
        emb = model.news_encoder.embed(table.ids[start:start + chunk],
                                       table.mask[start:start + chunk])
        outs.append(emb.data)
    return np.concatenate(outs, axis=0)


def evaluate(model, impressions, table, score_override=None) -> EvalReport:
    """Score every candidate of every impression and aggregate metrics.

    ``score_override`` replaces model scores for debugging: a callable
    mapping (labels array) -> scores array (e.g. the oracle scorer).
    """
    news_emb = None if score_override else encode_all_news(model, table)
    cap = model.spec.history_cap
    pairs = []
    batch_u, batch_meta = [], []

    def flush():
        if not batch_meta:
            return
        t_max = max(1, max(len(h) for h, _, _ in batch_meta))
        B = len(batch_meta)
        d = news_emb.shape[1]
        hist = np.zeros((B, t_max, d))
        mask = np.zeros((B, t_max))
        uidx = np.zeros(B, dtype=np.int64)
        for i, (h, uix, _) in enumerate(batch_meta):
            if h:
                hist[i, :len(h)] = news_emb[h]
                mask[i, :len(h)] = 1.0
            uidx[i] = uix
        from .tensor import Tensor
        u = model.user_encoder.forward(Tensor._make(hist), mask, uidx).data
        for i, (_, _, (cand_rows, labels)) in enumerate(batch_meta):
            pairs.append((news_emb[cand_rows] @ u[i], labels))
        batch_meta.clear()

    for imp in impressions:
        labels = np.asarray([c for _, c in imp.candidates])
        if score_override is not None:
            pairs.append((np.asarray(score_override(labels), dtype=np.float64),
                          labels))
            continue
        hist_rows = [table.index[n] for n in imp.history[-cap:]
                     if n in table.index]
        cand_rows = np.asarray([table.index[n] for n, _ in imp.candidates],
                               dtype=np.int64)
        batch_meta.append((hist_rows, model.user_idx(imp.user_id),
                           (cand_rows, labels)))
        if len(batch_meta) >= 128:
            flush()
    flush()

    report = score_impressions(pairs)
    report.metadata = {"model_hash": model.spec.config_hash(),
                       "num_news": len(table)}
    return report


# ---------------------------------------------------------------------------
# projection and discriminability
# ---------------------------------------------------------------------------


def pca_project(embeddings, out_dims: int = 2):
    """Project onto the top principal components.

    Returns (projection (N, out_dims), explained-variance ratios).  Each
    component's largest-magnitude coordinate is made positive.  Zero-
    variance input yields an all-zero projection.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    n, d = X.shape
    if n < out_dims:
        raise ValueError(f"need at least {out_dims} points, got {n}")
    Xc = X - X.mean(axis=0, keepdims=True)
    cov = Xc.T @ Xc / n
    total_var = float(np.trace(cov))
    if total_var == 0.0:
        return np.zeros((n, out_dims)), np.zeros(out_dims)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:out_dims]
    comps = evecs[:, order]
    for j in range(comps.shape[1]):
        i = np.argmax(np.abs(comps[:, j]))
        if comps[i, j] < 0:
            comps[:, j] = -comps[:, j]
    ratios = np.maximum(evals[order], 0.0) / total_var
    return Xc @ comps, ratios


def discriminability(embeddings, topic_labels) -> float:
    """Mean silhouette over topic clusters (Euclidean; 0/0 counts as 0)."""
    X = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(topic_labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    if len(X) < 3:
        raise ValueError("silhouette needs at least 3 points")
    dist = cdist(X, X)
    sil = np.zeros(len(X))
    members = {c: np.flatnonzero(labels == c) for c in uniq}
    for i in range(len(X)):
        own = members[labels[i]]
        if len(own) == 1:
            sil[i] = 0.0
            continue
        a = dist[i, own].sum() / (len(own) - 1)
        b = min(dist[i, members[c]].mean() for c in uniq if c != labels[i])
        denom = max(a, b)
        sil[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(sil.mean())
