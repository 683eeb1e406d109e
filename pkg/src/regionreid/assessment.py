"""Region confidence: discrimination + invariance indicators and their fusion.

The discrimination indicator is a shared linear readout squashed by a
sigmoid.  The invariance indicator compares each region feature against a
momentum-updated class center held in a memory bank; only features whose
discrimination score clears the admission threshold contribute updates.
The fused confidence weights both the region identity loss and retrieval.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .encoder import VisionBackbone, encode_image
from .regions import RegionError, stripe_pool


class AssessmentError(ValueError):
    """Uninitialized bank, degenerate norms, or invalid hyperparameters."""


_NORM_FLOOR = 1e-12


@dataclass
class MemoryBank:
    """Per-region-class running centers with momentum and admission gate."""

    centers: torch.Tensor  # [N, d]
    momentum: float
    admit_threshold: float

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise AssessmentError(f"momentum must be in [0, 1], got {self.momentum}")
        if not 0.0 < self.admit_threshold < 1.0:
            raise AssessmentError(f"admit_threshold must be in (0, 1), got {self.admit_threshold}")
        if self.centers.dim() != 2:
            raise AssessmentError("centers must be [N, d]")


@dataclass
class ConfidenceScores:
    """Per-region discrimination (alpha), invariance (beta), fused weight (w).

    ``beta`` is None when no memory bank is available to score against.
    """

    alpha: torch.Tensor
    beta: torch.Tensor | None
    weights: torch.Tensor


def discrimination_scores(region_feats: torch.Tensor, score_vector: torch.Tensor) -> torch.Tensor:
    """sigmoid(score_vector . F_j) per region; the readout is shared across regions.

    ``region_feats`` is [N, d] or [B, N, d]; returns [N] or [B, N].
    """
    return torch.sigmoid(torch.einsum("...nd,d->...n", region_feats, score_vector))


def init_memory(
    split,
    backbone: VisionBackbone,
    n_regions: int,
    momentum: float,
    admit_threshold: float,
    batch_size: int = 64,
) -> MemoryBank:
    """Stripe-initialized centers from one forward pass over the training set.

    The feature map of every image is cut into ``n_regions`` equal-height
    stripes; each stripe is average-pooled and the centers are the means of
    those pooled features over the whole split.
    """
    from .data import resize_image  # local import to avoid a cycle

    if len(split.samples) == 0:
        raise AssessmentError("cannot initialize memory from an empty split")
    if backbone.map_height < n_regions:
        raise RegionError(
            f"feature map height {backbone.map_height} < stripe count {n_regions}"
        )
    total = None
    count = 0
    with torch.no_grad():
        for start in range(0, len(split.samples), batch_size):
            chunk = split.samples[start : start + batch_size]
            images = torch.stack(
                [resize_image(s.image, backbone.image_size) for s in chunk]
            )
            pooled = stripe_pool(encode_image(images, backbone), n_regions)  # [b, N, d]
            total = pooled.sum(dim=0) if total is None else total + pooled.sum(dim=0)
            count += pooled.shape[0]
    return MemoryBank(total / count, momentum, admit_threshold)


def update_memory(bank: MemoryBank, region_feats: torch.Tensor, alpha: torch.Tensor) -> MemoryBank:
    """Momentum update of each center from admitted batch features.

    ``region_feats`` is [B, N, d] and ``alpha`` [B, N]; for region class j
    only rows with ``alpha[:, j] > admit_threshold`` are admitted.  Classes
    with no admitted feature keep their center.  Features are detached:
    this is a statistics update, not a learning signal.
    """
    feats = region_feats.detach()
    a = alpha.detach()
    if feats.dim() != 3 or a.shape != feats.shape[:2]:
        raise AssessmentError(
            f"expected region_feats [B, N, d] and alpha [B, N], got "
            f"{tuple(feats.shape)} and {tuple(a.shape)}"
        )
    admitted = (a > bank.admit_threshold).to(feats.dtype)  # [B, N]
    counts = admitted.sum(dim=0)  # [N]
    sums = torch.einsum("bn,bnd->nd", admitted, feats)
    safe = counts.clamp(min=1.0).unsqueeze(-1)
    means = sums / safe
    m = bank.momentum
    updated = m * bank.centers + (1.0 - m) * means
    has_any = (counts > 0).unsqueeze(-1)
    centers = torch.where(has_any, updated, bank.centers)
    return replace(bank, centers=centers)


def invariance_scores(region_feats: torch.Tensor, bank: MemoryBank) -> torch.Tensor:
    """Softmax across regions of cosine(feature_j, center_j); no amplification.

    ``region_feats`` is [N, d] or [B, N, d]; returns [N] or [B, N].
    """
    feats = region_feats
    fn = feats.norm(dim=-1)
    if bool((fn < _NORM_FLOOR).any()):
        raise AssessmentError("zero-norm region feature: cosine similarity is undefined")
    cn = bank.centers.norm(dim=-1)
    if bool((cn < _NORM_FLOOR).any()):
        raise AssessmentError("zero-norm memory center: cosine similarity is undefined")
    sims = torch.einsum(
        "...nd,nd->...n", feats / fn.unsqueeze(-1), bank.centers / cn.unsqueeze(-1)
    )
    return torch.softmax(sims, dim=-1)


def combine_scores(alpha: torch.Tensor, beta: torch.Tensor, mode: str = "sum") -> torch.Tensor:
    """Fuse the two indicators into a simplex weight vector per image.

    ``sum`` normalizes softmax(alpha + beta); ``mean`` uses the halved
    logits softmax((alpha + beta) / 2), which preserves the ordering.
    """
    if mode == "sum":
        logits = alpha + beta
    elif mode == "mean":
        logits = (alpha + beta) / 2.0
    else:
        raise AssessmentError(f"unknown fusion mode {mode!r} (expected sum or mean)")
    return torch.softmax(logits, dim=-1)


def confidence_weighted_id_loss(
    region_feats: torch.Tensor,
    weights: torch.Tensor,
    region_classifiers: torch.Tensor,
    targets: torch.Tensor,
) -> torch.Tensor:
    """Confidence-weighted sum of per-region identity cross-entropies.

    ``region_feats`` [B, N, d] (or [N, d]), ``weights`` [B, N] treated as a
    constant (detached here: confidence must not be optimized away through
    this loss), ``region_classifiers`` [N, d, C], integer ``targets`` [B].
    Returns the batch mean of sum_j w_j * CE_j.
    """
    single = region_feats.dim() == 2
    feats = region_feats.unsqueeze(0) if single else region_feats
    w = weights.detach()
    w = w.unsqueeze(0) if w.dim() == 1 else w
    t = targets.reshape(-1)
    n = feats.shape[1]
    if n == 0:
        return feats.sum() * 0.0
    logits = torch.einsum("bnd,ndc->bnc", feats, region_classifiers)
    ce = -torch.log_softmax(logits, dim=-1).gather(
        2, t.reshape(-1, 1, 1).expand(-1, n, 1)
    ).squeeze(-1)  # [B, N]
    return (w * ce).sum(dim=1).mean()
