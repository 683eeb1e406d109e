"""Two-stage training orchestration, evaluation, checkpoint I/O, sweeps.

Stage one optimizes only the prompt context and the background embedding
under the segmentation loss, with every other parameter frozen.  Stage two
jointly trains the backbone, prompt, and heads under the combined
objective, updating the memory bank after every optimizer step.  All
randomness derives from ``config.seed``; two runs with the same config and
data produce identical parameters and reports.
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

import numpy as np
import torch

from .assessment import init_memory, update_memory
from .checkpoint import CheckpointData, load_checkpoint, save_checkpoint
from .config import BAND_FRACTION_SETS, REGION_NAME_SETS, Config, ConfigError, format_config, parse_config
from .data import (
    DataError,
    DatasetSplit,
    SyntheticConfig,
    augment,
    contiguous_labels,
    generate_synthetic,
    load_directory_dataset,
    pk_sampler,
    resize_image,
    resize_labels,
)
from .encoder import global_average_pool
from .losses import LossReport, total_loss
from .model import ModelError, ReidModel
from .regions import compute_masks, segmentation_loss
from .retrieval import build_index, evaluate


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; carries the part breakdown."""


class JsonlWriter:
    """Line-oriented machine-readable training log."""

    def __init__(self, path: str | Path | None):
        self._fh = open(path, "w") if path is not None else None

    def write(self, record: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# -- data resolution ----------------------------------------------------------


def synthetic_config(cfg: Config) -> SyntheticConfig:
    return SyntheticConfig(
        id_count=cfg.synthetic_id_count,
        images_per_id=cfg.synthetic_images_per_id,
        image_size=cfg.image_size,
        band_fractions=tuple(cfg.band_fractions),
        occlusion_rate=cfg.synthetic_occlusion_rate,
        occluder_color_range=tuple(cfg.occluder_color_range),
        noise_std=cfg.synthetic_noise_std,
        seed=cfg.seed,
        margin_fraction=cfg.margin_fraction,
        query_per_id=cfg.synthetic_query_per_id,
        gallery_per_id=cfg.synthetic_gallery_per_id,
    )


def load_splits(cfg: Config, data_dir: str | Path | None = None):
    """(train, query, gallery) per the configured data source."""
    if cfg.data_source == "synthetic":
        return generate_synthetic(synthetic_config(cfg))
    if data_dir is None:
        raise DataError("directory data source requires a data directory")
    root = Path(data_dir)
    return (
        load_directory_dataset(root / "train", "train"),
        load_directory_dataset(root / "query", "query"),
        load_directory_dataset(root / "gallery", "gallery"),
    )


def resolve_id_count(cfg: Config, train_split: DatasetSplit) -> Config:
    if cfg.id_count == 0:
        return dataclasses.replace(cfg, id_count=train_split.id_count)
    if cfg.id_count != train_split.id_count:
        raise ConfigError(
            f"config id_count={cfg.id_count} but training split has {train_split.id_count} identities"
        )
    return cfg


# -- checkpoint I/O -------------------------------------------------------------


def save_model(path: str | Path, model: ReidModel, epoch: int) -> None:
    save_checkpoint(path, model.state_arrays(), format_config(model.config), epoch)


def load_model(path: str | Path, dtype: torch.dtype = torch.float32) -> tuple[ReidModel, int]:
    data: CheckpointData = load_checkpoint(path)
    cfg = parse_config(data.config_text)
    model = ReidModel(cfg, dtype=dtype)
    model.load_state_arrays(data.arrays)
    return model, data.epoch


# -- stage one: prompt training ---------------------------------------------------


def _frozen_parameters(model: ReidModel):
    prompt_params = set()
    if model.prompt is not None:
        prompt_params = {id(model.prompt.vectors)}
    prompt_params.add(id(model.background))
    return [p for p in model.parameters() if id(p) not in prompt_params]


def train_prompt(
    cfg: Config,
    train_split: DatasetSplit,
    model: ReidModel | None = None,
    log: JsonlWriter | None = None,
) -> tuple[ReidModel, list[dict]]:
    """Optimize the prompt context and background under the seg loss.

    Every other parameter is frozen and bit-identical before and after.
    Because the backbone is frozen here, feature maps are encoded once and
    cached; the stage runs on plain resized images so mask supervision
    stays pixel-exact.  Requires pseudo masks on every training sample.
    """
    cfg = resolve_id_count(cfg, train_split)
    if cfg.prompt_mode != "learnable" or cfg.prototype_file:
        raise ConfigError(
            "prompt training applies only to prompt_mode=learnable without an imported "
            "prototype file; hand-crafted and imported prototypes need no prompt stage"
        )
    missing = sum(1 for s in train_split.samples if s.pseudo_mask is None)
    if missing:
        raise DataError(
            f"{missing} training samples have no pseudo mask; use the synthetic data source "
            "or provide masks/<stem>.png sidecars"
        )
    if model is None:
        model = ReidModel(cfg)
    for p in _frozen_parameters(model):
        p.requires_grad_(False)
    params = [model.prompt.vectors, model.background]
    optimizer = torch.optim.Adam(params, lr=cfg.prompt_learning_rate)
    rng = np.random.default_rng(cfg.seed + 101)
    map_size = (model.backbone.map_height, model.backbone.map_width)
    batch = cfg.batch_p * cfg.batch_k
    history: list[dict] = []
    epochs = cfg.prompt_epochs

    fmaps: list[torch.Tensor] = []
    gts: list[torch.Tensor] = []
    with torch.no_grad():
        for start in range(0, len(train_split.samples), batch):
            chunk = train_split.samples[start : start + batch]
            images = torch.stack([resize_image(s.image, cfg.image_size) for s in chunk])
            fmaps.append(model.feature_map(images))
            gts.append(torch.stack([resize_labels(s.pseudo_mask, map_size) for s in chunk]))
    all_fmaps = torch.cat(fmaps)
    all_gts = torch.cat(gts)

    for epoch in range(epochs):
        order = rng.permutation(len(train_split.samples))
        epoch_loss, steps = 0.0, 0
        for start in range(0, len(order), batch):
            idx = torch.from_numpy(order[start : start + batch])
            seg = compute_masks(all_fmaps[idx], model.prototype_set(), cfg.gamma)
            loss = segmentation_loss(seg, all_gts[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"segmentation loss is non-finite at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            steps += 1
        record = {"stage": "prompt", "epoch": epoch, "seg": epoch_loss / max(steps, 1)}
        history.append(record)
        if log:
            log.write(record)
    for p in _frozen_parameters(model):
        p.requires_grad_(True)
    return model, history


# -- stage two: joint training -----------------------------------------------------

_ARCH_FIELDS = (
    "n_regions", "embed_dim", "token_dim", "context_length", "patch_size",
    "image_height", "image_width", "id_count", "class_names", "prompt_mode",
    "prototype_file", "seed",
)


def _check_architecture(cfg: Config, model_cfg: Config) -> None:
    for name in _ARCH_FIELDS:
        if getattr(cfg, name) != getattr(model_cfg, name):
            raise ConfigError(
                f"config {name}={getattr(cfg, name)!r} does not match the init "
                f"checkpoint's {name}={getattr(model_cfg, name)!r}"
            )


def _init_score_vector(model: ReidModel, train_split: DatasetSplit, sample_cap: int = 256) -> None:
    """Aim the shared scoring readout along the mean region-feature direction.

    The fused confidence is treated as a constant in the loss, so this head
    receives no gradient; a random direction would admit only arbitrary
    feature half-spaces into the memory bank, starving some classes and
    polluting centers with low-quality (occluded) content.  Typical region
    content scores high under this init; atypical content scores low.
    """
    from .data import resize_image

    with torch.no_grad():
        total = None
        count = 0
        for start in range(0, min(len(train_split.samples), sample_cap), 64):
            chunk = train_split.samples[start : start + 64]
            images = torch.stack([resize_image(s.image, model.backbone.image_size) for s in chunk])
            feats, _ = model.region_features(model.feature_map(images))
            flat = feats.reshape(-1, feats.shape[-1])
            total = flat.sum(dim=0) if total is None else total + flat.sum(dim=0)
            count += flat.shape[0]
        mean_feat = total / count
        norm = float(mean_feat.norm())
        if norm > 1e-12:
            model.score_vector.copy_(2.0 * mean_feat / norm)


def _dataset_mean(split: DatasetSplit) -> tuple[float, float, float]:
    total = torch.zeros(3, dtype=torch.float64)
    for s in split.samples:
        total += s.image.mean(dim=(1, 2)).double()
    mean = total / len(split.samples)
    return (float(mean[0]), float(mean[1]), float(mean[2]))


def train(
    cfg: Config,
    train_split: DatasetSplit,
    model: ReidModel | None = None,
    log: JsonlWriter | None = None,
) -> tuple[ReidModel, list[dict]]:
    """Joint metric-learning stage over all trainable parameters.

    The memory bank is stripe-initialized before the first step and updated
    with admitted (detached) region features after every optimizer step.
    """
    cfg = resolve_id_count(cfg, train_split)
    if model is None:
        if cfg.region_mode == "masks" and cfg.prompt_mode == "learnable" and not cfg.prototype_file:
            raise ConfigError(
                "learnable prompt mode needs a prompt-stage model or checkpoint as init; "
                "run prompt training first (or switch prompt_mode/prototype_file)"
            )
        model = ReidModel(cfg)
        if model.imported:
            model.load_prototype_file()
    else:
        _check_architecture(cfg, model.config)
        model.config = cfg  # checkpoint snapshots record the joint-stage config
    for p in model.parameters():
        p.requires_grad_(True)

    labels = contiguous_labels(train_split)
    bank = init_memory(
        train_split, model.backbone, cfg.n_regions, cfg.momentum, cfg.admit_threshold
    )
    model.bank = bank
    _init_score_vector(model, train_split)
    head_ids = {id(model.score_vector), id(model.region_classifiers), id(model.global_classifier)}
    prompt_ids = {id(model.background)}
    if model.prompt is not None:
        prompt_ids.add(id(model.prompt.vectors))
    groups = {"backbone": [], "heads": [], "prompt": []}
    for p in model.parameters():
        if id(p) in head_ids:
            groups["heads"].append(p)
        elif id(p) in prompt_ids:
            groups["prompt"].append(p)
        else:
            groups["backbone"].append(p)
    optimizer = torch.optim.Adam(
        [{"params": groups[name]} for name in ("backbone", "heads", "prompt")],
        lr=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
    )
    rng = np.random.default_rng(cfg.seed + 202)
    fill = _dataset_mean(train_split)
    history: list[dict] = []
    milestones = cfg.scaled_milestones()

    for epoch in range(cfg.scaled_epochs()):
        # stepped decay; the backbone group stays at zero during head warmup
        decayed = cfg.learning_rate * cfg.lr_decay ** sum(epoch >= m for m in milestones)
        optimizer.param_groups[0]["lr"] = 0.0 if epoch < cfg.freeze_backbone_epochs else decayed
        optimizer.param_groups[1]["lr"] = decayed * cfg.head_lr_scale
        optimizer.param_groups[2]["lr"] = decayed * cfg.prompt_lr_scale
        sums: dict[str, float] = {}
        steps = 0
        admitted_total = 0
        for batch_idx in pk_sampler(train_split, cfg.batch_p, cfg.batch_k, rng):
            views = [
                augment(
                    train_split.samples[i],
                    cfg.image_size,
                    rng,
                    flip_prob=cfg.flip_prob,
                    pad=cfg.augment_pad,
                    erase_prob=cfg.erase_prob,
                    erase_fill=fill,
                )
                for i in batch_idx
            ]
            images = torch.stack([v.image for v in views])
            targets = torch.tensor([labels[v.person_id] for v in views])
            fmap = model.feature_map(images)
            global_feats = global_average_pool(fmap)
            region_feats, _ = model.region_features(fmap)
            scores = model.confidence(region_feats)
            report = total_loss(
                region_feats,
                global_feats,
                scores.weights,
                model.region_classifiers,
                model.global_classifier,
                targets,
                cfg.margin,
            )
            if not torch.isfinite(report.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}: {report.detached_floats()}"
                )
            optimizer.zero_grad()
            report.total.backward()
            optimizer.step()
            model.bank = update_memory(model.bank, region_feats, scores.alpha)
            admitted_total += int((scores.alpha > cfg.admit_threshold).sum())
            for name, value in report.detached_floats().items():
                sums[name] = sums.get(name, 0.0) + value
            steps += 1
        record = {"stage": "joint", "epoch": epoch, "admitted": admitted_total}
        record.update({name: value / max(steps, 1) for name, value in sums.items()})
        history.append(record)
        if log:
            log.write(record)
    return model, history


# -- evaluation and analysis ---------------------------------------------------------


def evaluate_model(
    model: ReidModel,
    query_split: DatasetSplit,
    gallery_split: DatasetSplit,
    dump_top_k: int | None = None,
) -> dict:
    query_index = build_index(query_split, model)
    gallery_index = build_index(gallery_split, model)
    return evaluate(query_index, gallery_index, dump_top_k=dump_top_k)


def mask_accuracy(model: ReidModel, samples, batch_size: int = 128) -> float:
    """Pixel accuracy of argmax masks against (resampled) pseudo masks."""
    if model.config.region_mode != "masks":
        raise ModelError("mask accuracy is only defined in region_mode=masks")
    map_size = (model.backbone.map_height, model.backbone.map_width)
    labeled = [s for s in samples if s.pseudo_mask is not None]
    if not labeled:
        raise DataError("no samples carry pseudo masks")
    correct = 0
    total = 0
    with torch.no_grad():
        protos = model.prototype_set()
        for start in range(0, len(labeled), batch_size):
            chunk = labeled[start : start + batch_size]
            images = torch.stack([s.image for s in chunk])
            seg = compute_masks(model.feature_map(images), protos, model.config.gamma)
            pred = seg.masks.argmax(dim=1)
            gt = torch.stack([resize_labels(s.pseudo_mask, map_size) for s in chunk])
            correct += int((pred == gt).sum())
            total += gt.numel()
    return correct / total


def invariance_stats(model: ReidModel, samples, batch_size: int = 128) -> dict:
    """Mean invariance score over occluded vs visible regions.

    Only samples with occlusion flags (synthetic) contribute.  Requires a
    memory bank on the model.
    """
    if model.bank is None:
        raise ModelError("invariance statistics require a memory bank")
    flagged = [s for s in samples if s.occlusion_flags is not None]
    if not flagged:
        raise DataError("no samples carry occlusion flags")
    occluded: list[float] = []
    visible: list[float] = []
    with torch.no_grad():
        for start in range(0, len(flagged), batch_size):
            chunk = flagged[start : start + batch_size]
            images = torch.stack([s.image for s in chunk])
            region_feats, _ = model.region_features(model.feature_map(images))
            scores = model.confidence(region_feats)
            beta = scores.beta if scores.beta is not None else scores.weights
            for i, s in enumerate(chunk):
                for j, flag in enumerate(s.occlusion_flags):
                    (occluded if flag else visible).append(float(beta[i, j]))
    return {
        "occluded_mean": float(np.mean(occluded)) if occluded else float("nan"),
        "visible_mean": float(np.mean(visible)) if visible else float("nan"),
        "occluded_count": len(occluded),
        "visible_count": len(visible),
    }


# -- full pipeline and sweeps ----------------------------------------------------------


def run_pipeline(
    cfg: Config,
    data_dir: str | Path | None = None,
    log: JsonlWriter | None = None,
) -> dict:
    """Prompt stage (when applicable) + joint stage + evaluation.

    Returns ``{"report": ..., "model": ..., "history": ...}``; the prompt
    stage is skipped in stripe mode, hand-crafted mode, and imported mode.
    """
    cfg.validate()
    train_split, query_split, gallery_split = load_splits(cfg, data_dir)
    cfg = resolve_id_count(cfg, train_split)
    model = None
    history: list[dict] = []
    needs_prompt = (
        cfg.region_mode == "masks" and cfg.prompt_mode == "learnable" and not cfg.prototype_file
    )
    if needs_prompt:
        model, prompt_history = train_prompt(cfg, train_split, log=log)
        history.extend(prompt_history)
    model, joint_history = train(cfg, train_split, model=model, log=log)
    history.extend(joint_history)
    report = evaluate_model(model, query_split, gallery_split)
    return {
        "report": report,
        "model": model,
        "history": history,
        "splits": (train_split, query_split, gallery_split),
    }


_SWEEPABLE = ("n_regions", "gamma", "context_length", "momentum")


def sweep_config(cfg: Config, param: str, value) -> Config:
    """Config for one sweep point; region-count sweeps switch vocabularies."""
    if param not in _SWEEPABLE:
        raise ConfigError(f"sweep parameter must be one of {_SWEEPABLE}, got {param!r}")
    if param == "n_regions":
        n = int(value)
        if n not in REGION_NAME_SETS:
            raise ConfigError(f"no region vocabulary defined for n_regions={n}")
        return dataclasses.replace(
            cfg,
            n_regions=n,
            class_names=REGION_NAME_SETS[n],
            band_fractions=BAND_FRACTION_SETS[n],
        )
    caster = int if param == "context_length" else float
    return dataclasses.replace(cfg, **{param: caster(value)})


def run_sweep(
    cfg: Config,
    param: str,
    values,
    data_dir: str | Path | None = None,
    log: JsonlWriter | None = None,
) -> list[dict]:
    """One full train+eval per value; failures are recorded, not raised."""
    rows: list[dict] = []
    for value in values:
        row: dict = {"param": param, "value": value}
        try:
            point = sweep_config(cfg, param, value)
            result = run_pipeline(point, data_dir, log=log)
            row["report"] = {
                k: v for k, v in result["report"].items() if k != "ranked"
            }
        except Exception as exc:  # noqa: BLE001 - sweep must survive bad points
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
        if log:
            log.write(row)
    return rows
