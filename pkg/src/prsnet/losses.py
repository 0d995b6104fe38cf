"""Reconstruction and metric-learning objectives."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    squared_l2_distance,
    sub,
    sum_all,
    take_rows,
)

logger = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.3


class DegenerateMaskError(ValueError):
    pass


@dataclass
class Embedding:
    vector: object  # Tensor or array of shape [D]
    person_id: int = -1
    camera_id: int = 0
    is_masked: bool = False


def _vec(x) -> Tensor:
    return as_tensor(x.vector if isinstance(x, Embedding) else x)


def masked_mse(X, X_rebuild, M, norm_mode: str = "masked_mean") -> Tensor:
    """Squared reconstruction error summed over masked pixels.

    ``masked_mean`` divides by ``C * sum(M)`` (a true per-value mean);
    ``batch_sum`` divides by ``B * sum(M)``.  ``M`` is [B,1,H,W] and is
    broadcast over channels.
    """
    X = np.asarray(X.data if isinstance(X, Tensor) else X)
    X_rebuild = as_tensor(X_rebuild)
    M = np.asarray(M.data if isinstance(M, Tensor) else M)
    if X.shape != X_rebuild.shape:
        raise ShapeError(f"masked_mse: target {X.shape} vs reconstruction {X_rebuild.shape}")
    if M.ndim != X.ndim or M.shape[0] != X.shape[0] or M.shape[2:] != X.shape[2:] or M.shape[1] not in (1, X.shape[1]):
        raise ShapeError(f"masked_mse: mask {M.shape} does not match images {X.shape}")
    total = float(M.sum())
    if total <= 0:
        raise DegenerateMaskError("mask selects no pixels")
    if M.shape[1] != 1:
        total /= X.shape[1]
    if norm_mode == "masked_mean":
        denom = X.shape[1] * total
    elif norm_mode == "batch_sum":
        denom = X.shape[0] * total
    else:
        raise ValueError(f"unknown norm_mode {norm_mode!r}")
    diff = sub(Tensor(X, dtype=X_rebuild.dtype), X_rebuild)
    weighted = mul(mul(diff, diff), Tensor(M.astype(X_rebuild.dtype), dtype=X_rebuild.dtype))
    return scale(sum_all(weighted), 1.0 / denom)


def triplet_loss(a, p, n, margin: float = DEFAULT_MARGIN) -> Tensor:
    """``max(|a - p|^2 - |a - n|^2 + margin, 0)``."""
    a, p, n = _vec(a), _vec(p), _vec(n)
    return relu(add(sub(squared_l2_distance(a, p), squared_l2_distance(a, n)), margin))


def compute_centroid(vectors) -> Tensor:
    """Per-dimension mean of a non-empty [K, D] stack (or a list of D-vectors)."""
    if isinstance(vectors, Tensor):
        stack = vectors
    else:
        items = [_vec(v) for v in vectors]
        if not items:
            raise ValueError("centroid of an empty set")
        if all(not t.requires_grad for t in items):
            return Tensor(np.mean(np.stack([t.data for t in items]), axis=0))
        stack = concat([reshape(t, (1, -1)) for t in items])
    if stack.shape[0] == 0:
        raise ValueError("centroid of an empty set")
    k = stack.shape[0]
    w = Tensor(np.full((1, k), 1.0 / k, dtype=stack.dtype), dtype=stack.dtype)
    return reshape(matmul(w, stack), (stack.shape[1],))


def centroid_triplet_loss(a, c_pos, c_neg, margin: float = DEFAULT_MARGIN) -> Tensor:
    """Triplet hinge against the positive and negative class centroids."""
    a = _vec(a)
    return relu(add(sub(squared_l2_distance(a, c_pos), squared_l2_distance(a, c_neg)), margin))


def compute_lambdas(n_pos_masked: int, n_neg_masked: int) -> tuple[float, float]:
    """Mixing weights proportional to the masked positive/negative counts; they sum to 1 exactly."""
    if n_pos_masked < 0 or n_neg_masked < 0:
        raise ValueError("counts must be non-negative")
    total = n_pos_masked + n_neg_masked
    if total == 0:
        raise ValueError("no masked samples to weight")
    lam1 = n_pos_masked / total
    return lam1, 1.0 - lam1


@dataclass
class CentroidSet:
    c_pos: object
    c_neg: object
    m_pos: object | None = None
    m_neg: object | None = None
    lam1: float = 0.5
    lam2: float = 0.5
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        if self.lam1 + self.lam2 != 1.0 or not (0.0 <= self.lam1 <= 1.0 and 0.0 <= self.lam2 <= 1.0):
            raise ValueError(f"lambdas must lie in [0,1] and sum to 1, got {self.lam1}, {self.lam2}")


def _shifted_target(c, m, lam: float, form: str, role: str):
    c = as_tensor(c)
    if m is None:
        if lam != 0.0:
            raise ValueError(f"masked {role} centroid missing but its weight is {lam}")
        return c
    m = as_tensor(m)
    if form == "literal":
        return add(scale(m, lam), c)
    return add(scale(m, lam), scale(c, 1.0 - lam))


def masked_centroid_triplet_loss(a, cs: CentroidSet, form: str = "literal") -> Tensor:
    """Centroid triplet hinge whose targets also involve the masked-sample centroids.

    ``literal`` subtracts ``lam * m + c`` from the anchor; ``convex`` uses the
    interpolation ``lam * m + (1 - lam) * c`` for both targets.
    """
    if form not in ("literal", "convex"):
        raise ValueError(f"unknown form {form!r}")
    a = _vec(a)
    pos = _shifted_target(cs.c_pos, cs.m_pos, cs.lam1, form, "positive")
    neg = _shifted_target(cs.c_neg, cs.m_neg, cs.lam2, form, "negative")
    return relu(add(sub(squared_l2_distance(a, pos), squared_l2_distance(a, neg)), cs.margin))


@dataclass
class BatchLoss:
    value: Tensor
    anchors: int
    skipped: int


def batch_reid_loss(
    embeddings,
    person_ids,
    is_masked,
    margin: float = DEFAULT_MARGIN,
    loss: str = "mctl",
    form: str = "literal",
    anchors: str = "full",
) -> BatchLoss:
    """Mean centroid-triplet loss over the anchors of a PK batch.

    For each anchor the positive centroids come from same-identity samples
    other than the anchor, the negative centroids from every other identity;
    full and masked samples are pooled separately.  ``loss="ctl"`` ignores the
    masked samples entirely.  Anchors without another same-identity full
    sample (or without any negative) are skipped and counted.
    """
    E = as_tensor(embeddings)
    pids = np.asarray(person_ids)
    masked = np.asarray(is_masked, dtype=bool)
    if E.ndim != 2 or E.shape[0] != len(pids) or len(pids) != len(masked):
        raise ShapeError("embeddings, person_ids and is_masked must align")
    if loss not in ("mctl", "ctl"):
        raise ValueError(f"unknown loss {loss!r}")
    n = len(pids)
    full = ~masked
    candidates = np.flatnonzero(full if anchors == "full" else np.ones(n, dtype=bool))

    rows, w_pos, w_neg = [], [], []
    skipped = 0
    for i in candidates:
        same = pids == pids[i]
        others = np.arange(n) != i
        pf = full & same & others
        nf = full & ~same
        if not pf.any() or not nf.any():
            skipped += 1
            continue
        wp = pf / pf.sum()
        wn = nf / nf.sum()
        if loss == "mctl":
            pm = masked & same & others
            nm = masked & ~same
            lam1, lam2 = compute_lambdas(int(pm.sum()), int(nm.sum()))
            mp = pm / pm.sum() if pm.any() else np.zeros(n)
            mn = nm / nm.sum() if nm.any() else np.zeros(n)
            if form == "literal":
                wp, wn = wp + lam1 * mp, wn + lam2 * mn
            else:
                wp, wn = (1 - lam1) * wp + lam1 * mp, (1 - lam2) * wn + lam2 * mn
        rows.append(i)
        w_pos.append(wp)
        w_neg.append(wn)

    if skipped:
        logger.warning("batch_reid_loss: skipped %d anchor(s) without positives/negatives", skipped)
    if not rows:
        raise ValueError("no usable anchors in batch")
    dt = E.dtype
    A = take_rows(E, rows)
    targets_pos = matmul(Tensor(np.array(w_pos, dtype=dt), dtype=dt), E)
    targets_neg = matmul(Tensor(np.array(w_neg, dtype=dt), dtype=dt), E)
    hinge = relu(add(sub(squared_l2_distance(A, targets_pos), squared_l2_distance(A, targets_neg)), margin))
    return BatchLoss(scale(sum_all(hinge), 1.0 / len(rows)), len(rows), skipped)
