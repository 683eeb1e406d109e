"""Region generation: soft similarity masks, masked pooling, seg supervision.

Masks assign every feature-map pixel a distribution over N+1 channels
(0 = background, 1..N = region classes) by an amplified softmax over
cosine similarities with the class prototypes and the background vector.
All functions accept an optional leading batch dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .prototypes import PrototypeSet

# Norms below this are degenerate for cosine similarity; we raise instead of
# fudging a denominator, so encoder pathologies surface immediately.
_NORM_FLOOR = 1e-12


class RegionError(ValueError):
    """Degenerate geometry (zero norms) or inconsistent labels/shapes."""


@dataclass
class SegmentationMasks:
    """Per-pixel class distribution [(N+1), H, W] (or batched [B, N+1, H, W]).

    ``log_masks`` holds the numerically exact log of ``masks`` when the
    masks came out of :func:`compute_masks`.
    """

    masks: torch.Tensor
    gamma: float
    log_masks: torch.Tensor | None = None

    @property
    def n_regions(self) -> int:
        return self.masks.shape[-3] - 1


def _check_norms(norms: torch.Tensor, what: str) -> None:
    if bool((norms < _NORM_FLOOR).any()):
        raise RegionError(f"zero-norm {what}: cosine similarity is undefined")


def compute_masks(fmap: torch.Tensor, protos: PrototypeSet, gamma: float) -> SegmentationMasks:
    """Amplified softmax over cosine similarities to background + prototypes.

    ``fmap`` is [d, H, W] or [B, d, H, W]; channel k of the result is the
    per-pixel probability of prototype k (0 = background).  Differentiable
    in the feature map, the prototypes, and the background.
    """
    if gamma <= 0:
        raise RegionError(f"gamma must be > 0, got {gamma}")
    single = fmap.dim() == 3
    x = fmap.unsqueeze(0) if single else fmap
    b, d, h, w = x.shape
    if d != protos.dim:
        raise RegionError(f"feature dim {d} does not match prototype dim {protos.dim}")
    flat = x.reshape(b, d, h * w)
    pixel_norms = flat.norm(dim=1)
    _check_norms(pixel_norms, "pixel feature")
    stacked = protos.stacked()  # [N+1, d]
    proto_norms = stacked.norm(dim=1)
    _check_norms(proto_norms, "prototype")
    sims = torch.einsum("kd,bdp->bkp", stacked / proto_norms[:, None], flat / pixel_norms[:, None, :])
    logits = gamma * sims
    masks = torch.softmax(logits, dim=1).reshape(b, -1, h, w)
    log_masks = torch.log_softmax(logits, dim=1).reshape(b, -1, h, w)
    if single:
        masks, log_masks = masks.squeeze(0), log_masks.squeeze(0)
    return SegmentationMasks(masks, float(gamma), log_masks)


def masked_average_pool(fmap: torch.Tensor, seg: SegmentationMasks) -> torch.Tensor:
    """Soft-mask weighted mean of the feature map per region class.

    Returns [N, d] (or [B, N, d]): row j is sum(S_j * F) / sum(S_j) over
    pixels.  The background channel is not pooled.
    """
    single = fmap.dim() == 3
    x = fmap.unsqueeze(0) if single else fmap
    m = seg.masks.unsqueeze(0) if seg.masks.dim() == 3 else seg.masks
    if m.shape[-2:] != x.shape[-2:] or m.shape[0] != x.shape[0]:
        raise RegionError(
            f"mask shape {tuple(m.shape)} inconsistent with feature map {tuple(x.shape)}"
        )
    weights = m[:, 1:]  # [b, N, H, W]
    totals = weights.sum(dim=(-2, -1))
    if bool((totals <= 0).any()):
        raise RegionError("a region mask has zero total weight")
    pooled = torch.einsum("bnhw,bdhw->bnd", weights, x) / totals.unsqueeze(-1)
    return pooled.squeeze(0) if single else pooled


def segmentation_loss(seg: SegmentationMasks, gt: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel negative log-likelihood of the ground-truth labels.

    ``gt`` is an integer map already at mask resolution with values in
    {0..N}; background pixels are supervised against channel 0.  Zero iff
    the masks are exactly one-hot correct.
    """
    masks = seg.masks
    single = masks.dim() == 3
    m = masks.unsqueeze(0) if single else masks
    g = gt.unsqueeze(0) if gt.dim() == 2 else gt
    if g.shape[-2:] != m.shape[-2:] or g.shape[0] != m.shape[0]:
        raise RegionError(f"gt shape {tuple(g.shape)} inconsistent with masks {tuple(m.shape)}")
    n_channels = m.shape[1]
    if bool((g < 0).any()) or bool((g >= n_channels).any()):
        raise RegionError(
            f"gt labels must lie in [0, {n_channels - 1}], got range "
            f"[{int(g.min())}, {int(g.max())}]"
        )
    if seg.log_masks is not None:
        lm = seg.log_masks.unsqueeze(0) if single else seg.log_masks
    else:
        lm = torch.log(m)
    picked = torch.gather(lm, 1, g.unsqueeze(1)).squeeze(1)
    return -picked.mean()


def stripe_bounds(height: int, n: int) -> list[tuple[int, int]]:
    """Row intervals of n equal-height horizontal stripes (floor boundaries)."""
    if height < n:
        raise RegionError(f"feature map height {height} < stripe count {n}")
    edges = [i * height // n for i in range(n + 1)]
    return list(zip(edges[:-1], edges[1:]))


def stripe_pool(fmap: torch.Tensor, n: int) -> torch.Tensor:
    """Average-pool the feature map over n horizontal stripes: [.., n, d]."""
    single = fmap.dim() == 3
    x = fmap.unsqueeze(0) if single else fmap
    rows = [x[:, :, lo:hi, :].mean(dim=(-2, -1)) for lo, hi in stripe_bounds(x.shape[-2], n)]
    pooled = torch.stack(rows, dim=1)  # [b, n, d]
    return pooled.squeeze(0) if single else pooled
