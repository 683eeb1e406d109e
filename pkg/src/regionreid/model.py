"""Full model: backbone, prototype machinery, scoring heads, memory bank."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .assessment import (
    ConfidenceScores,
    MemoryBank,
    discrimination_scores,
    invariance_scores,
)
from .config import Config
from .data import Sample, resize_image
from .encoder import VisionBackbone, global_average_pool
from .prototypes import (
    FrozenTextEncoder,
    PromptContext,
    PrototypeSet,
    encode_prototypes,
    encode_template_prototypes,
    init_background,
    load_prototypes,
)
from .regions import SegmentationMasks, compute_masks, masked_average_pool, stripe_pool
from .retrieval import RetrievalEntry


class ModelError(ValueError):
    """Inconsistent model configuration or missing state."""


class ReidModel(nn.Module):
    """Bundles every trainable piece plus the frozen text encoder and bank.

    Prototype source is decided by the config: a learnable prompt context,
    a fixed hand-crafted template, or an imported (frozen) prototype file.
    The memory bank is attached by the training loop and rides along in
    checkpoints.
    """

    def __init__(self, config: Config, dtype: torch.dtype = torch.float32):
        super().__init__()
        config.validate()
        if config.id_count < 1:
            raise ModelError("config.id_count must be resolved (>= 1) before building a model")
        self.config = config
        d = config.embed_dim
        self.backbone = VisionBackbone(
            image_size=config.image_size,
            patch_size=config.patch_size,
            out_dim=d,
            seed=config.seed,
            dtype=dtype,
        )
        self.text_encoder = FrozenTextEncoder.from_class_names(
            config.class_names,
            template=config.prompt_template,
            token_dim=config.token_dim,
            out_dim=d,
            seed=config.seed + 1,
            dtype=dtype,
        )
        self.imported = config.prototype_file != ""
        self.prompt: PromptContext | None = None
        if self.imported:
            # Placeholders; fill via load_prototype_file() or a checkpoint.
            self.register_buffer("imported_prototypes", torch.zeros(config.n_regions, d, dtype=dtype))
            self.register_buffer("imported_background", torch.zeros(d, dtype=dtype))
        elif config.prompt_mode == "learnable":
            self.prompt = PromptContext(
                config.context_length, config.token_dim, seed=config.seed + 2, dtype=dtype
            )
        else:
            with torch.no_grad():
                rows = encode_template_prototypes(
                    config.prompt_template,
                    config.class_names,
                    self.text_encoder,
                    torch.zeros(d, dtype=dtype),
                ).prototypes
            self.register_buffer("template_prototypes", rows)
        self.background = nn.Parameter(init_background(d, seed=config.seed + 3, dtype=dtype))

        g = torch.Generator().manual_seed(config.seed + 4)
        scale = d**-0.5
        self.score_vector = nn.Parameter(torch.randn(d, generator=g, dtype=dtype) * scale)
        self.region_classifiers = nn.Parameter(
            torch.randn(config.n_regions, d, config.id_count, generator=g, dtype=dtype) * scale
        )
        self.global_classifier = nn.Parameter(
            torch.randn(config.id_count, d, generator=g, dtype=dtype) * scale
        )
        self.bank: MemoryBank | None = None

    # -- prototypes ----------------------------------------------------------

    def load_prototype_file(self) -> None:
        pset = load_prototypes(self.config.prototype_file, expected_dim=self.config.embed_dim)
        if pset.n_classes != self.config.n_regions:
            raise ModelError(
                f"prototype file has {pset.n_classes} classes, config expects {self.config.n_regions}"
            )
        with torch.no_grad():
            self.imported_prototypes.copy_(pset.prototypes)
            self.imported_background.copy_(pset.background)

    def prototype_set(self) -> PrototypeSet:
        if self.imported:
            return PrototypeSet(
                self.imported_prototypes,
                self.imported_background,
                tuple(self.config.class_names),
                frozen=True,
            )
        if self.prompt is not None:
            return encode_prototypes(
                self.prompt, tuple(self.config.class_names), self.text_encoder, self.background
            )
        return PrototypeSet(
            self.template_prototypes, self.background, tuple(self.config.class_names)
        )

    # -- forward pieces --------------------------------------------------------

    def feature_map(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images)

    def region_features(
        self, fmap: torch.Tensor
    ) -> tuple[torch.Tensor, SegmentationMasks | None]:
        """Region features per the configured mode: soft masks or stripes."""
        if self.config.region_mode == "stripes":
            return stripe_pool(fmap, self.config.n_regions), None
        seg = compute_masks(fmap, self.prototype_set(), self.config.gamma)
        return masked_average_pool(fmap, seg), seg

    def confidence(self, region_feats: torch.Tensor) -> ConfidenceScores:
        """Indicator scores and the fused weights, honoring the toggles.

        Inactive indicators are still reported when computable; the fused
        weight only mixes the active ones and is uniform when none is.
        """
        cfg = self.config
        alpha = discrimination_scores(region_feats, self.score_vector)
        beta = None
        if self.bank is not None:
            beta = invariance_scores(region_feats, self.bank)
        elif cfg.use_invariance:
            raise ModelError("invariance scoring requires a memory bank (train or load one)")
        active = []
        if cfg.use_discrimination:
            active.append(alpha)
        if cfg.use_invariance:
            active.append(beta)
        if active:
            logits = sum(active)
            if cfg.fusion_mode == "mean":
                logits = logits / len(active)
            weights = torch.softmax(logits, dim=-1)
        else:
            weights = torch.full_like(alpha, 1.0 / cfg.n_regions)
        return ConfidenceScores(alpha, beta, weights)

    # -- inference -------------------------------------------------------------

    def inference_entries(self, samples: list[Sample], batch_size: int = 64):
        """Retrieval entries (global, regions, weights) for a list of samples."""
        entries: list[RetrievalEntry] = []
        with torch.no_grad():
            for start in range(0, len(samples), batch_size):
                chunk = samples[start : start + batch_size]
                images = torch.stack(
                    [resize_image(s.image, self.backbone.image_size) for s in chunk]
                )
                fmap = self.feature_map(images)
                global_feats = global_average_pool(fmap)
                region_feats, _ = self.region_features(fmap)
                scores = self.confidence(region_feats)
                for i, s in enumerate(chunk):
                    entries.append(
                        RetrievalEntry(
                            global_feat=global_feats[i].float(),
                            region_feats=region_feats[i].float(),
                            weights=scores.weights[i].float(),
                            person_id=s.person_id,
                            camera_id=s.camera_id,
                            path=s.path,
                        )
                    )
        return entries

    # -- checkpoint plumbing -----------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {
            name: tensor.detach().cpu().numpy().copy()
            for name, tensor in self.state_dict().items()
        }
        if self.bank is not None:
            arrays["memory.centers"] = self.bank.centers.detach().cpu().numpy().copy()
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        state = {}
        for name, tensor in self.state_dict().items():
            if name not in arrays:
                raise ModelError(f"checkpoint is missing array {name!r}")
            state[name] = torch.from_numpy(arrays[name].copy()).to(tensor.dtype)
        self.load_state_dict(state)
        if "memory.centers" in arrays:
            self.bank = MemoryBank(
                torch.from_numpy(arrays["memory.centers"].copy()).to(self.background.dtype),
                self.config.momentum,
                self.config.admit_threshold,
            )
