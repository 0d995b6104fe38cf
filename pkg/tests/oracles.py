"""Independent reference implementations used by the unit and acceptance tests.

Everything here is written with plain loops over Python floats or numpy
scalars; none of it calls into the library code under test except to build
inputs.
"""

from __future__ import annotations

import math

import numpy as np

from prsnet.model import BatchNormParams, ConvBlockParams
from prsnet.tensor import Tensor


# -- model --------------------------------------------------------------------------------

def random_bn(rng, c, dtype=np.float32) -> BatchNormParams:
    return BatchNormParams(
        Tensor(rng.uniform(0.5, 1.5, c).astype(dtype), requires_grad=True),
        Tensor(rng.normal(0, 0.3, c).astype(dtype), requires_grad=True),
        Tensor(rng.normal(0, 0.3, c).astype(dtype)),
        Tensor(rng.uniform(0.5, 2.0, c).astype(dtype)),
    )


def random_block(rng, c, dtype=np.float32, identity=True, activation="gelu") -> ConvBlockParams:
    def w(*shape):
        return Tensor((rng.standard_normal(shape) / math.sqrt(np.prod(shape[1:]))).astype(dtype), requires_grad=True)

    return ConvBlockParams(
        main_w=w(c, c, 3, 3), main_b=Tensor(rng.normal(0, 0.1, c).astype(dtype), requires_grad=True),
        main_bn=random_bn(rng, c, dtype),
        one_w=w(c, c, 1, 1), one_b=Tensor(rng.normal(0, 0.1, c).astype(dtype), requires_grad=True),
        one_bn=random_bn(rng, c, dtype),
        id_bn=random_bn(rng, c, dtype) if identity else None,
        activation=activation,
    )


# -- losses ---------------------------------------------------------------------------------

def sqdist(a, b) -> float:
    return sum((float(x) - float(y)) ** 2 for x, y in zip(a, b))


def masked_mse_ref(X, Xr, M, norm_mode="masked_mean") -> float:
    B, C, H, W = X.shape
    num = 0.0
    msum = 0.0
    for b in range(B):
        for y in range(H):
            for x in range(W):
                m = float(M[b, 0, y, x])
                msum += m
                for c in range(C):
                    num += m * (float(X[b, c, y, x]) - float(Xr[b, c, y, x])) ** 2
    return num / ((C if norm_mode == "masked_mean" else B) * msum)


def mean_ref(vectors) -> list[float]:
    n = len(vectors)
    return [sum(float(v[d]) for v in vectors) / n for d in range(len(vectors[0]))]


def triplet_ref(a, p, n, margin) -> float:
    return max(sqdist(a, p) - sqdist(a, n) + margin, 0.0)


def mctl_ref(a, cp, cn, mp, mn, lam1, lam2, margin, form="literal") -> float:
    def target(c, m, lam):
        if form == "literal":
            return [lam * float(mi) + float(ci) for ci, mi in zip(c, m)]
        return [lam * float(mi) + (1 - lam) * float(ci) for ci, mi in zip(c, m)]

    return max(sqdist(a, target(cp, mp, lam1)) - sqdist(a, target(cn, mn, lam2)) + margin, 0.0)


def batch_reid_ref(E, pids, masked, margin, loss="mctl", form="literal") -> tuple[float, int]:
    """Anchor-by-anchor loop; returns (mean loss, number of anchors used)."""
    n = len(pids)
    total, used = 0.0, 0
    for i in range(n):
        if masked[i]:
            continue
        pos_full = [E[j] for j in range(n) if j != i and pids[j] == pids[i] and not masked[j]]
        neg_full = [E[j] for j in range(n) if pids[j] != pids[i] and not masked[j]]
        if not pos_full or not neg_full:
            continue
        cp, cn = mean_ref(pos_full), mean_ref(neg_full)
        if loss == "ctl":
            total += max(sqdist(E[i], cp) - sqdist(E[i], cn) + margin, 0.0)
        else:
            pos_m = [E[j] for j in range(n) if j != i and pids[j] == pids[i] and masked[j]]
            neg_m = [E[j] for j in range(n) if pids[j] != pids[i] and masked[j]]
            lam1 = len(pos_m) / (len(pos_m) + len(neg_m))
            lam2 = 1.0 - lam1
            zero = [0.0] * len(E[i])
            mp = mean_ref(pos_m) if pos_m else zero
            mn = mean_ref(neg_m) if neg_m else zero
            total += mctl_ref(E[i], cp, cn, mp, mn, lam1, lam2, margin, form)
        used += 1
    return total / used, used


# -- retrieval ---------------------------------------------------------------------------------

def retrieval_ref(qv, qp, qc, gv, gp, gc, protocol="cross_camera"):
    """Quadratic evaluation: returns (mAP, cmc list, per-query APs) with exact rational-style sums."""
    aps, firsts = [], []
    G = len(gp)
    for q in range(len(qp)):
        cands = []
        for g in range(G):
            if protocol == "cross_camera" and gp[g] == qp[q] and gc[g] == qc[q]:
                continue
            d = sum((float(qv[q][k]) - float(gv[g][k])) ** 2 for k in range(len(qv[q])))
            cands.append((d, g))
        # insertion sort on (distance, original index) keeps ties in gallery order
        ordered = []
        for item in cands:
            pos = len(ordered)
            while pos > 0 and ordered[pos - 1] > item:
                pos -= 1
            ordered.insert(pos, item)
        rel = [gp[g] == qp[q] and gp[g] != -1 for _, g in ordered]
        if not any(rel):
            continue
        hits, precs = 0, []
        for r, is_rel in enumerate(rel):
            if is_rel:
                hits += 1
                precs.append(hits / (r + 1))
        aps.append(sum(precs) / len(precs))
        firsts.append(rel.index(True) + 1)
    cmc = [sum(1 for f in firsts if f <= k) / len(firsts) for k in range(1, G + 1)]
    return sum(aps) / len(aps), cmc, aps
