"""Descriptor construction and retrieval evaluation.

Descriptors combine an L2-normalized global vector with per-part vectors
pooled under the predicted segmentation, plus per-part visibility weights.
Matching uses a visibility-aware cosine distance; evaluation ranks the
gallery per query under the standard cross-camera protocol and reports
mAP and the CMC curve, cross-checked by a deliberately naive AP oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

POOL_EPS = 1e-8
GLOBAL_WEIGHT = 0.5


def weighted_pool(featmap: Tensor, parts: Tensor, eps: float = POOL_EPS) -> Tensor:
    """Mask-weighted average feature per foreground part.

    featmap: (..., C, h, w); parts: (..., K+1, h, w) per-pixel simplex with
    the background channel last. Returns (..., K, C). Empty parts are
    guarded by ``eps`` and pool to (near) zero vectors.
    """
    fg = parts[..., :-1, :, :]
    num = torch.einsum("...khw,...chw->...kc", fg, featmap)
    mass = fg.sum(dim=(-2, -1))
    return num / (mass[..., None] + eps)


@dataclass
class Descriptor:
    """Retrieval descriptor: global vector, part vectors, visibilities.

    All vectors are L2-normalized (zero vectors stay zero); visibility sums
    to 1 over the K parts, falling back to uniform when every part is empty.
    """

    global_vec: np.ndarray   # (d_g,)
    part_vecs: np.ndarray    # (K, d_p)
    visibility: np.ndarray   # (K,)


def _l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    return np.where(norm > 0, x / np.where(norm > 0, norm, 1.0), x)


def build_descriptor(f_g: Tensor, featmap: Tensor, parts: Tensor) -> Descriptor:
    """Assemble a descriptor for one image.

    f_g: (d_g, h, w) global map (spatially averaged for the global vector);
    featmap: (d_p, h, w) map pooled per part; parts: (K+1, h, w) simplex.
    """
    global_vec = f_g.detach().mean(dim=(-2, -1)).cpu().numpy()
    part_vecs = weighted_pool(featmap.detach(), parts.detach()).cpu().numpy()
    mass = parts.detach()[:-1].sum(dim=(-2, -1)).cpu().numpy()
    total = mass.sum()
    if total > 0:
        visibility = mass / total
    else:
        visibility = np.full(mass.shape, 1.0 / mass.shape[0])
    return Descriptor(global_vec=_l2_normalize(global_vec),
                      part_vecs=_l2_normalize(part_vecs),
                      visibility=visibility)


def descriptor_distance(a: Descriptor, b: Descriptor,
                        global_weight: float = GLOBAL_WEIGHT,
                        *, use_parts: bool = True) -> float:
    """Visibility-aware cosine distance between two descriptors.

    Part k contributes with weight min(a.visibility_k, b.visibility_k); if
    no part is visible on both sides the part term vanishes and only the
    weighted global term remains.
    """
    d_global = 1.0 - float(a.global_vec @ b.global_vec)
    if not use_parts:
        return d_global
    shared = np.minimum(a.visibility, b.visibility)
    total = shared.sum()
    if total <= 0:
        return global_weight * d_global
    d_parts = 1.0 - np.einsum("kd,kd->k", a.part_vecs, b.part_vecs)
    part_term = float((shared * d_parts).sum() / total)
    return global_weight * d_global + (1.0 - global_weight) * part_term


@dataclass
class RetrievalResult:
    per_query_ap: np.ndarray   # (Q,) AP of every scored query
    cmc: np.ndarray            # (G,) cumulative match curve over ranks
    mAP: float
    num_queries: int           # queries actually scored
    num_excluded: int          # queries with no cross-camera match available

    def metrics(self) -> dict:
        def rank(k: int) -> float:
            return float(self.cmc[k - 1]) if len(self.cmc) >= k else float("nan")
        return {"mAP": self.mAP, "rank1": rank(1), "rank5": rank(5),
                "rank10": rank(10), "num_queries": self.num_queries,
                "num_excluded": self.num_excluded}


def _distance_matrix(queries: list[Descriptor], gallery: list[Descriptor],
                     *, use_parts: bool) -> np.ndarray:
    qg = np.stack([q.global_vec for q in queries])
    gg = np.stack([g.global_vec for g in gallery])
    d_global = 1.0 - qg @ gg.T
    if not use_parts:
        return d_global
    qp = np.stack([q.part_vecs for q in queries])       # (Q, K, d)
    gp = np.stack([g.part_vecs for g in gallery])       # (G, K, d)
    qv = np.stack([q.visibility for q in queries])      # (Q, K)
    gv = np.stack([g.visibility for g in gallery])      # (G, K)
    shared = np.minimum(qv[:, None, :], gv[None, :, :])  # (Q, G, K)
    d_parts = 1.0 - np.einsum("qkd,gkd->qgk", qp, gp)
    totals = shared.sum(axis=-1)
    part_term = np.where(totals > 0,
                         (shared * d_parts).sum(axis=-1) / np.where(totals > 0, totals, 1.0),
                         0.0)
    return np.where(totals > 0,
                    GLOBAL_WEIGHT * d_global + (1.0 - GLOBAL_WEIGHT) * part_term,
                    GLOBAL_WEIGHT * d_global)


def evaluate_retrieval(queries: list[Descriptor], query_labels, query_cams,
                       gallery: list[Descriptor], gallery_labels, gallery_cams,
                       *, use_parts: bool = True) -> RetrievalResult:
    """Rank the gallery for every query and aggregate AP / CMC.

    Same-camera same-identity gallery entries are excluded per query; ties
    in distance break deterministically by gallery index. Queries whose
    identity never appears in the admissible gallery are excluded from the
    averages and counted.
    """
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    q_labels = np.asarray(query_labels)
    q_cams = np.asarray(query_cams)
    g_labels = np.asarray(gallery_labels)
    g_cams = np.asarray(gallery_cams)
    dist = _distance_matrix(queries, gallery, use_parts=use_parts)

    aps: list[float] = []
    hits = np.zeros(len(gallery), dtype=np.float64)
    excluded = 0
    for qi in range(len(queries)):
        keep = ~((g_labels == q_labels[qi]) & (g_cams == q_cams[qi]))
        relevant = (g_labels[keep] == q_labels[qi])
        if not relevant.any():
            excluded += 1
            continue
        order = np.argsort(dist[qi, keep], kind="stable")
        rel_sorted = relevant[order]
        ranks = np.flatnonzero(rel_sorted) + 1
        precisions = (np.arange(len(ranks)) + 1) / ranks
        aps.append(math.fsum(precisions.tolist()) / len(ranks))
        hits[ranks[0] - 1:] += 1.0

    n = len(aps)
    if n == 0:
        raise ValueError("no query has an admissible gallery match")
    cmc = hits / n
    return RetrievalResult(per_query_ap=np.array(aps), cmc=cmc,
                           mAP=math.fsum(aps) / n,
                           num_queries=n, num_excluded=excluded)


def ap_oracle(distances, relevance) -> float:
    """Naive O(n^2) average precision, independent of evaluate_retrieval.

    Ranks items by counting, for each item, how many others strictly beat
    it (ties broken by original index), then scans relevant items in rank
    order accumulating precision.
    """
    d = [float(x) for x in distances]
    rel = [bool(r) for r in relevance]
    n = len(d)
    ranks = []
    for i in range(n):
        r = 1
        for j in range(n):
            if d[j] < d[i] or (d[j] == d[i] and j < i):
                r += 1
        ranks.append(r)
    by_rank = sorted(range(n), key=lambda i: ranks[i])
    total_relevant = sum(rel)
    if total_relevant == 0:
        raise ValueError("no relevant item")
    seen = 0
    precisions = []
    for i in by_rank:
        if rel[i]:
            seen += 1
            precisions.append(seen / ranks[i])
    return math.fsum(precisions) / total_relevant
