"""Retrieval metrics and embedding distance statistics.

Similarity is the dot product of L2-normalized embeddings (cosine). Gallery
items are ranked by descending similarity; equal scores keep gallery order
(stable sort), so the earlier gallery item wins a tie.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DIRECTIONS = ("drone->satellite", "satellite->drone")


@dataclass
class EmbeddingIndex:
    vectors: np.ndarray
    labels: np.ndarray
    view: str = ""

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"embeddings must be (N, E), got shape {v.shape}")
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        self.vectors = v / np.maximum(norms, 1e-12)
        self.labels = np.asarray(self.labels)
        if len(self.labels) != len(v):
            raise ValueError("one label per embedding is required")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def save(self, path) -> None:
        """Write vectors and labels to ``.npz`` with a JSON manifest."""
        manifest = {"view": self.view, "dim": self.dim, "count": len(self), "format_version": 1}
        with open(path, "wb") as fh:
            np.savez(fh, vectors=self.vectors, labels=self.labels,
                     manifest=np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8))

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        with np.load(path) as data:
            manifest = json.loads(data["manifest"].tobytes().decode())
            idx = cls(data["vectors"], data["labels"], manifest.get("view", ""))
        if idx.dim != manifest["dim"]:
            raise ValueError("embedding file manifest disagrees with its array")
        return idx


@dataclass
class RetrievalReport:
    direction: str
    recall_at: dict
    ap: float
    num_queries: int

    def to_dict(self) -> dict:
        d = {"direction": self.direction, "ap": self.ap, "num_queries": self.num_queries}
        d.update({f"R@{k}": v for k, v in sorted(self.recall_at.items())})
        return d


def similarity(queries: EmbeddingIndex, gallery: EmbeddingIndex) -> np.ndarray:
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    if queries.dim != gallery.dim:
        raise ValueError(f"dimension mismatch: queries {queries.dim}, gallery {gallery.dim}")
    return queries.vectors @ gallery.vectors.T


def rank(scores: np.ndarray) -> np.ndarray:
    """Gallery order per query, best first, ties kept in gallery order."""
    return np.argsort(-scores, axis=1, kind="stable")


def recall_from_scores(scores, query_labels, gallery_labels, k: int) -> float:
    scores = np.atleast_2d(scores)
    if scores.shape[1] == 0:
        raise ValueError("gallery is empty")
    if k < 1:
        raise ValueError("k must be at least 1")
    order = rank(scores)[:, :k]
    hits = np.asarray(gallery_labels)[order] == np.asarray(query_labels)[:, None]
    return float(hits.any(axis=1).mean())


def ap_per_query(scores, query_labels, gallery_labels) -> np.ndarray:
    scores = np.atleast_2d(scores)
    if scores.shape[1] == 0:
        raise ValueError("gallery is empty")
    rel = np.asarray(gallery_labels)[rank(scores)] == np.asarray(query_labels)[:, None]
    positions = np.arange(1, rel.shape[1] + 1)
    precision = np.cumsum(rel, axis=1) / positions
    n_rel = rel.sum(axis=1)
    missing = int((n_rel == 0).sum())
    if missing:
        warnings.warn(f"{missing} query label(s) absent from gallery; they contribute AP 0", stacklevel=3)
    return np.where(n_rel > 0, (precision * rel).sum(axis=1) / np.maximum(n_rel, 1), 0.0)


def ap_from_scores(scores, query_labels, gallery_labels) -> float:
    return float(ap_per_query(scores, query_labels, gallery_labels).mean())


def recall_at_k(queries: EmbeddingIndex, gallery: EmbeddingIndex, k: int) -> float:
    return recall_from_scores(similarity(queries, gallery), queries.labels, gallery.labels, k)


def average_precision(queries: EmbeddingIndex, gallery: EmbeddingIndex) -> float:
    return ap_from_scores(similarity(queries, gallery), queries.labels, gallery.labels)


def retrieval_report(queries: EmbeddingIndex, gallery: EmbeddingIndex, direction: str,
                     ks: Sequence[int] = (1, 5, 10)) -> RetrievalReport:
    scores = similarity(queries, gallery)
    recall = {k: recall_from_scores(scores, queries.labels, gallery.labels, min(k, len(gallery))) for k in ks}
    ap = ap_from_scores(scores, queries.labels, gallery.labels)
    return RetrievalReport(direction, recall, ap, len(queries))


# -- distance statistics -------------------------------------------------------


@dataclass
class DistanceStats:
    intra: np.ndarray
    inter: np.ndarray
    bins: np.ndarray = field(repr=False)
    intra_hist: np.ndarray = field(repr=False)
    inter_hist: np.ndarray = field(repr=False)
    overlap: float = 0.0

    @property
    def intra_mean(self) -> float:
        return float(self.intra.mean())

    @property
    def inter_mean(self) -> float:
        return float(self.inter.mean())

    def summary(self) -> dict:
        return {
            "intra_mean": self.intra_mean,
            "intra_std": float(self.intra.std()),
            "inter_mean": self.inter_mean,
            "inter_std": float(self.inter.std()),
            "overlap": self.overlap,
            "num_intra": int(self.intra.size),
            "num_inter": int(self.inter.size),
        }


def distance_stats(emb_a, emb_b, labels_a, labels_b=None, bins: int = 50) -> DistanceStats:
    """Cosine distances (1 - cos) between every cross-view pair, split by label agreement.

    The overlap coefficient is the shared area of the two normalized
    histograms on ``[0, 2]``: 1 for identical distributions, 0 for disjoint.
    """
    a = EmbeddingIndex(emb_a, labels_a)
    b = EmbeddingIndex(emb_b, labels_a if labels_b is None else labels_b)
    if len(np.union1d(a.labels, b.labels)) < 2:
        raise ValueError("distance statistics need at least two distinct labels")
    dist = 1.0 - a.vectors @ b.vectors.T
    same = a.labels[:, None] == b.labels[None, :]
    intra, inter = dist[same], dist[~same]
    if intra.size == 0 or inter.size == 0:
        raise ValueError("need both same-label and different-label pairs")
    edges = np.linspace(0.0, 2.0, bins + 1)
    hi, _ = np.histogram(np.clip(intra, 0, 2), edges)
    he, _ = np.histogram(np.clip(inter, 0, 2), edges)
    overlap = float(np.minimum(hi / hi.sum(), he / he.sum()).sum())
    return DistanceStats(intra, inter, edges, hi, he, overlap)


def write_kv(path, record: dict) -> None:
    """Machine-readable ``key=value`` lines, one per scalar."""
    lines = [f"{k}={_fmt(v)}" for k, v in record.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_kv(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)
