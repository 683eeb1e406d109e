"""Training objective: identity CE, batch-hard triplet, and the joint total."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .assessment import confidence_weighted_id_loss


class LossError(ValueError):
    """Mis-sampled batch or inconsistent loss inputs."""


@dataclass
class LossReport:
    """Total loss plus its named parts; total always equals their sum."""

    total: torch.Tensor
    parts: dict[str, torch.Tensor]

    @classmethod
    def from_parts(cls, **parts: torch.Tensor) -> "LossReport":
        total = sum(parts.values())
        return cls(total, dict(parts))

    def detached_floats(self) -> dict[str, float]:
        out = {name: float(value.detach()) for name, value in self.parts.items()}
        out["total"] = float(self.total.detach())
        return out


def id_loss(global_feats: torch.Tensor, classifier: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of linear identity logits; batch mean.

    ``global_feats`` [B, d] or [d], ``classifier`` [C, d], ``targets`` [B].
    """
    feats = global_feats.unsqueeze(0) if global_feats.dim() == 1 else global_feats
    logits = feats @ classifier.T
    return F.cross_entropy(logits, targets.reshape(-1))


def triplet_loss(features: torch.Tensor, labels: torch.Tensor, margin: float) -> torch.Tensor:
    """Batch-hard triplet loss on unnormalized Euclidean distances.

    For every anchor: hardest positive = farthest other instance with the
    same label, hardest negative = closest instance with a different
    label.  Every anchor must have at least one positive and one negative
    (PK sampling guarantees this); otherwise the batch is mis-sampled.
    """
    if features.dim() != 2:
        raise LossError(f"features must be [B, d], got {tuple(features.shape)}")
    b = features.shape[0]
    labels = labels.reshape(-1)
    dists = torch.cdist(features.unsqueeze(0), features.unsqueeze(0)).squeeze(0)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(b, dtype=torch.bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not bool(pos_mask.any(dim=1).all()):
        raise LossError("an anchor has no positive instance (mis-sampled batch)")
    if not bool(neg_mask.any(dim=1).all()):
        raise LossError("an anchor has no negative instance (mis-sampled batch)")
    ninf = torch.finfo(dists.dtype).max
    hardest_pos = torch.where(pos_mask, dists, dists.new_tensor(-ninf)).max(dim=1).values
    hardest_neg = torch.where(neg_mask, dists, dists.new_tensor(ninf)).min(dim=1).values
    return torch.relu(margin + hardest_pos - hardest_neg).mean()


def total_loss(
    region_feats: torch.Tensor,
    global_feats: torch.Tensor,
    weights: torch.Tensor,
    region_classifiers: torch.Tensor,
    global_classifier: torch.Tensor,
    targets: torch.Tensor,
    margin: float,
) -> LossReport:
    """Joint objective: weighted region CE + per-region and global triplets
    + global identity CE.

    ``region_feats`` [B, N, d] (N may be 0, degenerating to the
    global-only objective), ``weights`` [B, N] (treated as constants).
    The per-region triplet uses the raw region features, unweighted.
    """
    n = region_feats.shape[1] if region_feats.dim() == 3 else 0
    zero = global_feats.sum() * 0.0
    if n > 0:
        ram = confidence_weighted_id_loss(region_feats, weights, region_classifiers, targets)
        tri_regions = sum(
            triplet_loss(region_feats[:, j], targets, margin) for j in range(n)
        )
    else:
        ram, tri_regions = zero, zero.clone()
    return LossReport.from_parts(
        ram=ram,
        tri_regions=tri_regions,
        id_global=id_loss(global_feats, global_classifier, targets),
        tri_global=triplet_loss(global_feats, targets, margin),
    )
