"""Query/gallery ranking with AP, mAP and CMC."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .losses import Embedding


class ReportError(ValueError):
    pass


@dataclass
class GalleryIndex:
    vectors: np.ndarray  # [G, D]
    person_ids: np.ndarray
    camera_ids: np.ndarray
    mode: str = "instance"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.person_ids = np.asarray(self.person_ids)
        self.camera_ids = np.asarray(self.camera_ids)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.person_ids) or len(self.person_ids) != len(self.camera_ids):
            raise ValueError("gallery vectors, person ids and camera ids must align")
        if self.mode == "centroid" and len(np.unique(self.person_ids)) != len(self.person_ids):
            raise ValueError("centroid gallery must hold one vector per identity")

    def __len__(self) -> int:
        return len(self.person_ids)

    @classmethod
    def from_embeddings(cls, embeddings: list[Embedding]) -> GalleryIndex:
        return cls(
            np.stack([np.asarray(getattr(e.vector, "data", e.vector), dtype=np.float64) for e in embeddings]),
            [e.person_id for e in embeddings],
            [e.camera_id for e in embeddings],
        )


def build_centroid_gallery(gallery) -> GalleryIndex:
    """One mean vector per identity, in order of first appearance."""
    if not isinstance(gallery, GalleryIndex):
        gallery = GalleryIndex.from_embeddings(list(gallery))
    _, first = np.unique(gallery.person_ids, return_index=True)
    ids = gallery.person_ids[np.sort(first)]
    cents = np.stack([gallery.vectors[gallery.person_ids == pid].mean(axis=0) for pid in ids])
    # the camera field is meaningless for a centroid; -1 never matches a real camera
    return GalleryIndex(cents, ids, np.full(len(ids), -1), mode="centroid")


def distances(q: np.ndarray, g: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Distances from one query vector (or a [Q, D] stack) to every gallery row."""
    q = np.asarray(q, dtype=np.float64)
    if metric == "euclidean":
        diff = g[None, :, :] - np.atleast_2d(q)[:, None, :]
        d = np.einsum("qgd,qgd->qg", diff, diff)
    elif metric == "cosine":
        qn = np.atleast_2d(q) / np.linalg.norm(np.atleast_2d(q), axis=1, keepdims=True)
        gn = g / np.linalg.norm(g, axis=1, keepdims=True)
        d = 1.0 - qn @ gn.T
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return d[0] if q.ndim == 1 else d


def _keep_mask(q_pid, q_cam, gallery: GalleryIndex, protocol: str) -> np.ndarray:
    if protocol == "none" or gallery.mode == "centroid":
        return np.ones(len(gallery), dtype=bool)
    if protocol != "cross_camera":
        raise ValueError(f"unknown protocol {protocol!r}")
    return ~((gallery.person_ids == q_pid) & (gallery.camera_ids == q_cam))


def rank_query(q: Embedding, gallery: GalleryIndex, protocol: str = "cross_camera", metric: str = "euclidean") -> np.ndarray:
    """Gallery indices sorted by ascending distance (stable on ties), after protocol filtering."""
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    vec = np.asarray(getattr(q.vector, "data", q.vector), dtype=np.float64)
    d = distances(vec, gallery.vectors, metric)
    keep = np.flatnonzero(_keep_mask(q.person_id, q.camera_id, gallery, protocol))
    return keep[np.argsort(d[keep], kind="stable")]


def average_precision(ranked_relevance) -> float:
    """Mean over the relevant positions of (hits so far) / rank."""
    rel = np.asarray(ranked_relevance, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        raise ReportError("no relevant item in ranking")
    precisions = [(i + 1) / (r + 1) for i, r in enumerate(hits)]
    return sum(precisions) / len(precisions)


@dataclass
class QueryResult:
    index: int
    person_id: int
    ap: float
    first_match: int  # 1-based rank of the first relevant item


@dataclass
class RetrievalReport:
    per_query: list[QueryResult]
    mAP: float
    cmc: np.ndarray  # cmc[k-1] = Rank-k
    skipped: list[int] = field(default_factory=list)

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "rank1": self.rank(1),
            "rank5": self.rank(5),
            "rank10": self.rank(10),
            "cmc": [float(v) for v in self.cmc],
            "per_query": [
                {"query": r.index, "person_id": int(r.person_id), "ap": r.ap, "first_match": r.first_match}
                for r in self.per_query
            ],
            "skipped": list(self.skipped),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def summary_table(self, title: str = "") -> str:
        lines = [title] if title else []
        lines += [
            f"{'metric':<8}{'value':>10}",
            f"{'mAP':<8}{self.mAP:>10.2%}",
        ]
        for k in (1, 5, 10):
            lines.append(f"{'Rank-' + str(k):<8}{self.rank(k):>10.2%}")
        lines.append(f"queries: {len(self.per_query)} evaluated, {len(self.skipped)} skipped")
        return "\n".join(lines)


def evaluate(
    queries: list[Embedding],
    gallery: GalleryIndex,
    protocol: str = "cross_camera",
    metric: str = "euclidean",
) -> RetrievalReport:
    """Rank every query against the gallery; distractors (id -1) are never relevant."""
    if not queries:
        raise ReportError("empty query set")
    results: list[QueryResult] = []
    skipped: list[int] = []
    first_ranks = []
    for qi, q in enumerate(queries):
        order = rank_query(q, gallery, protocol, metric)
        rel = (gallery.person_ids[order] == q.person_id) & (gallery.person_ids[order] != -1)
        if order.size == 0 or not rel.any():
            skipped.append(qi)
            continue
        first = int(np.argmax(rel)) + 1
        results.append(QueryResult(qi, q.person_id, average_precision(rel), first))
        first_ranks.append(first)
    if not results:
        raise ReportError("no query has a relevant gallery item")
    depth = len(gallery)
    first_ranks = np.asarray(first_ranks)
    cmc = np.array([(first_ranks <= k).sum() / len(first_ranks) for k in range(1, depth + 1)])
    mAP = sum(r.ap for r in results) / len(results)
    return RetrievalReport(results, mAP, cmc, skipped)
