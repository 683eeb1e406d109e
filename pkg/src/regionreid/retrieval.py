"""Confidence-weighted distance, gallery indexing, and CMC/mAP evaluation.

Evaluation follows the single-query protocol: for each query, gallery
entries sharing both its person id and camera id are excluded, remaining
entries are ranked by ascending aggregate distance (ties broken by gallery
order), CMC@k is the fraction of queries with a correct match in the
top k, and mAP averages per-query average precision over all correct
matches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


class RetrievalError(ValueError):
    """Degenerate vectors, empty index, or an unusable query set."""


_NORM_FLOOR = 1e-12


@dataclass
class RetrievalEntry:
    """Features and confidence weights of one indexed image."""

    global_feat: torch.Tensor  # [d]
    region_feats: torch.Tensor  # [N, d]
    weights: torch.Tensor  # [N], simplex
    person_id: int
    camera_id: int
    path: str = ""


@dataclass
class RetrievalIndex:
    """Ordered entries plus provenance metadata; immutable after build."""

    entries: tuple[RetrievalEntry, ...]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    """1 - cosine similarity, in [0, 2]."""
    na, nb = float(a.norm()), float(b.norm())
    if na < _NORM_FLOOR or nb < _NORM_FLOOR:
        raise RetrievalError("zero-norm vector: cosine distance is undefined")
    return float(1.0 - (a @ b) / (na * nb))


def aggregate_distance(q: RetrievalEntry, g: RetrievalEntry) -> float:
    """Confidence-weighted mean of region distances plus the global distance.

    d = (sum_j (wq_j * wg_j) * d_j + d_global) / (sum_j (wq_j * wg_j) + 1)
    where d_j is the cosine distance between the j-th region features.
    """
    if q.region_feats.shape != g.region_feats.shape:
        raise RetrievalError("query/gallery region shapes differ")
    num = cosine_distance(q.global_feat, g.global_feat)
    den = 1.0
    for j in range(q.region_feats.shape[0]):
        pair = float(q.weights[j]) * float(g.weights[j])
        num += pair * cosine_distance(q.region_feats[j], g.region_feats[j])
        den += pair
    return num / den


def _unit(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms < _NORM_FLOOR).any()):
        raise RetrievalError(f"zero-norm {what}: cosine distance is undefined")
    return x / norms


def _stack_index(index: RetrievalIndex):
    globals_ = _unit(torch.stack([e.global_feat for e in index.entries]).double(), "global feature")
    regions = _unit(torch.stack([e.region_feats for e in index.entries]).double(), "region feature")
    weights = torch.stack([e.weights for e in index.entries]).double()
    pids = torch.tensor([e.person_id for e in index.entries])
    cams = torch.tensor([e.camera_id for e in index.entries])
    return globals_, regions, weights, pids, cams


def distance_matrix(query: RetrievalIndex, gallery: RetrievalIndex) -> torch.Tensor:
    """[Q, G] aggregate distances; same math as :func:`aggregate_distance`."""
    qg, qr, qw, _, _ = _stack_index(query)
    gg, gr, gw, _, _ = _stack_index(gallery)
    d_global = 1.0 - qg @ gg.T  # [Q, G]
    d_region = 1.0 - torch.einsum("qnd,gnd->qgn", qr, gr)  # [Q, G, N]
    pair_w = torch.einsum("qn,gn->qgn", qw, gw)
    num = (pair_w * d_region).sum(dim=-1) + d_global
    den = pair_w.sum(dim=-1) + 1.0
    return num / den


def build_index(split, model, batch_size: int = 64) -> RetrievalIndex:
    """Forward every image of a split through a trained model.

    The model must expose ``inference_entries`` (see ``model.ReidModel``)
    and carry a frozen memory bank when invariance scoring is active.
    """
    if len(split.samples) == 0:
        raise RetrievalError(f"cannot index an empty {split.role} split")
    entries = tuple(model.inference_entries(split.samples, batch_size=batch_size))
    return RetrievalIndex(entries, meta={"role": split.role, "size": len(entries)})


def evaluate(
    query: RetrievalIndex,
    gallery: RetrievalIndex,
    cmc_ranks: tuple[int, ...] = (1, 3, 5, 10),
    dump_top_k: int | None = None,
) -> dict:
    """Single-query CMC/mAP. Returns the metrics report (plus a ranked-list
    dump under ``"ranked"`` when ``dump_top_k`` is set).

    Queries with no valid gallery match after filtering are excluded and
    counted under ``excluded_queries``.
    """
    if len(gallery) == 0:
        raise RetrievalError("empty gallery")
    if len(query) == 0:
        raise RetrievalError("empty query set")
    dists = distance_matrix(query, gallery)
    g_pids = torch.tensor([e.person_id for e in gallery.entries])
    g_cams = torch.tensor([e.camera_id for e in gallery.entries])

    hits_at = {k: 0 for k in cmc_ranks}
    ap_sum = 0.0
    evaluated = 0
    excluded = 0
    ranked_dump = []
    for qi, q in enumerate(query.entries):
        keep = ~((g_pids == q.person_id) & (g_cams == q.camera_id))
        kept_idx = torch.nonzero(keep).flatten()
        correct = g_pids[kept_idx] == q.person_id
        if not bool(correct.any()):
            excluded += 1
            continue
        evaluated += 1
        order = torch.argsort(dists[qi, kept_idx], stable=True)
        correct_sorted = correct[order]
        ranks = torch.nonzero(correct_sorted).flatten() + 1  # 1-based
        first = int(ranks[0])
        for k in cmc_ranks:
            if first <= k:
                hits_at[k] += 1
        precisions = torch.arange(1, len(ranks) + 1, dtype=torch.float64) / ranks.double()
        ap_sum += float(precisions.mean())
        if dump_top_k:
            top = kept_idx[order][:dump_top_k]
            ranked_dump.append(
                {
                    "query": q.path or str(qi),
                    "person_id": q.person_id,
                    "matches": [
                        {
                            "path": gallery.entries[int(gi)].path or str(int(gi)),
                            "person_id": int(g_pids[gi]),
                            "distance": float(dists[qi, gi]),
                        }
                        for gi in top
                    ],
                }
            )
    if evaluated == 0:
        raise RetrievalError("no query has a valid gallery match after filtering")
    report = {f"rank{k}": hits_at[k] / evaluated for k in cmc_ranks}
    report["mAP"] = ap_sum / evaluated
    report["excluded_queries"] = excluded
    report["query_count"] = evaluated
    if dump_top_k:
        report["ranked"] = ranked_dump
    return report
