"""Retrieval and clustering metrics plus pair-similarity histograms."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans


def _unit_rows(embeddings: np.ndarray) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms == 0.0):
        raise ValueError(f"row {int(np.argmin(norms))} has zero norm; cosine undefined")
    return e / norms[:, None]


def recall_at_k(embeddings: np.ndarray, labels: np.ndarray, ks) -> dict[int, float]:
    """Fraction of queries whose top-K cosine neighbors (self excluded)
    contain a same-label sample. Ties break toward the lower index."""
    e = _unit_rows(embeddings)
    labels = np.asarray(labels)
    n = len(labels)
    ks = sorted(int(k) for k in ks)
    if n < 2:
        raise ValueError("need at least 2 samples")
    if ks[0] < 1 or ks[-1] >= n:
        raise ValueError(f"every K must satisfy 1 <= K < {n}")
    sims = e @ e.T
    np.fill_diagonal(sims, -np.inf)
    hits = {k: 0 for k in ks}
    kmax = ks[-1]
    for i in range(n):
        # stable sort on -sims: equal similarities keep ascending index order
        order = np.argsort(-sims[i], kind="stable")[:kmax]
        same = labels[order] == labels[i]
        for k in ks:
            if same[:k].any():
                hits[k] += 1
    return {k: hits[k] / n for k in ks}


def nmi_from_contingency(table: np.ndarray, average: str = "geometric") -> float:
    """Normalized mutual information of the partition pair behind a
    contingency table. Returns 0 when either partition has zero entropy,
    except the degenerate 1x1 case where the partitions are identical."""
    t = np.asarray(table, dtype=np.float64)
    total = t.sum()
    if total <= 0:
        raise ValueError("empty contingency table")
    p = t / total
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    ha = -np.sum(pa[pa > 0] * np.log(pa[pa > 0]))
    hb = -np.sum(pb[pb > 0] * np.log(pb[pb > 0]))
    if ha == 0.0 or hb == 0.0:
        return 1.0 if t.shape == (1, 1) else 0.0
    mask = p > 0
    outer = pa[:, None] * pb[None, :]
    info = np.sum(p[mask] * np.log(p[mask] / outer[mask]))
    if average == "geometric":
        denom = np.sqrt(ha * hb)
    elif average == "arithmetic":
        denom = 0.5 * (ha + hb)
    else:
        raise ValueError("average must be 'geometric' or 'arithmetic'")
    return float(info / denom)


def contingency_table(labels_a: np.ndarray, labels_b: np.ndarray) -> np.ndarray:
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def nmi(embeddings: np.ndarray, labels: np.ndarray, n_clusters: int, seed: int = 0,
        average: str = "geometric") -> float:
    """Seeded k-means++ clustering of the embeddings, scored against the
    labels. n_clusters must equal the number of ground-truth classes."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty input")
    n_true = len(np.unique(labels))
    if n_clusters != n_true:
        raise ValueError(f"n_clusters {n_clusters} != number of classes {n_true}")
    km = KMeans(n_clusters=n_clusters, init="k-means++", n_init=10,
                max_iter=300, tol=1e-6, random_state=seed)
    pred = km.fit_predict(np.asarray(embeddings, dtype=np.float64))
    return nmi_from_contingency(contingency_table(pred, labels), average=average)


@dataclass
class Histogram:
    """Separate positive/negative pair counts over similarity bins in [-1, 1]."""

    bin_edges: np.ndarray
    pos_counts: np.ndarray
    neg_counts: np.ndarray


def similarity_histogram(similarities: np.ndarray, labels: np.ndarray, bins: int = 50) -> Histogram:
    """Bin the unordered (i < j) pair similarities by pair type. Values are
    clipped to [-1, 1] so float spill never drops a pair."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    s = np.asarray(similarities, dtype=np.float64)
    labels = np.asarray(labels)
    iu, ju = np.triu_indices(len(labels), k=1)
    vals = np.clip(s[iu, ju], -1.0, 1.0)
    same = labels[iu] == labels[ju]
    edges = np.linspace(-1.0, 1.0, bins + 1)
    pos_counts, _ = np.histogram(vals[same], bins=edges)
    neg_counts, _ = np.histogram(vals[~same], bins=edges)
    return Histogram(bin_edges=edges, pos_counts=pos_counts, neg_counts=neg_counts)


def histogram_to_csv(hist: Histogram, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "pos_count", "neg_count"])
        for i in range(len(hist.pos_counts)):
            writer.writerow([repr(float(hist.bin_edges[i])), repr(float(hist.bin_edges[i + 1])),
                             int(hist.pos_counts[i]), int(hist.neg_counts[i])])


@dataclass
class EvalReport:
    recall_at: dict[int, float]
    nmi: float
    histogram: Histogram | None = None

    def to_json(self) -> str:
        doc = {
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "nmi": self.nmi,
        }
        if self.histogram is not None:
            doc["histogram"] = {
                "bin_edges": [float(x) for x in self.histogram.bin_edges],
                "pos_counts": [int(x) for x in self.histogram.pos_counts],
                "neg_counts": [int(x) for x in self.histogram.neg_counts],
            }
        return json.dumps(doc, sort_keys=True)


def evaluate(embeddings: np.ndarray, labels: np.ndarray, ks=(1, 2, 4, 8),
             seed: int = 0, bins: int = 50) -> EvalReport:
    """Full report: Recall@K, NMI at the true class count, and the
    positive/negative similarity histogram."""
    labels = np.asarray(labels)
    e = _unit_rows(embeddings)
    n = len(labels)
    ks = tuple(k for k in ks if k < n)
    report_recall = recall_at_k(e, labels, ks)
    score = nmi(e, labels, n_clusters=len(np.unique(labels)), seed=seed)
    hist = similarity_histogram(e @ e.T, labels, bins=bins)
    return EvalReport(recall_at=report_recall, nmi=score, histogram=hist)
