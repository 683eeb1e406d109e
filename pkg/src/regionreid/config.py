"""Flat key-value configuration with validated, overridable defaults.

The config file format is one ``key = value`` assignment per line.  Blank
lines and lines starting with ``#`` are ignored.  Tuple-valued keys use
comma-separated entries (``band_fractions = 0.2, 0.35, 0.35, 0.1``).
Unknown keys are rejected with the offending key named.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Malformed config text, unknown key, or invalid value combination."""


# Region vocabularies used when sweeping the region count.  The entries per
# count follow the standard top-to-bottom body reading, with "bags" inserted
# between upper and lower body at five regions.
REGION_NAME_SETS: dict[int, tuple[str, ...]] = {
    2: ("upper body", "lower body"),
    3: ("head", "upper body", "lower body"),
    4: ("head", "upper body", "lower body", "foot"),
    5: ("head", "upper body", "bags", "lower body", "foot"),
}

# Vertical layout fractions for the synthetic benchmark, matched to the
# vocabularies above.  Each set sums to 1.
BAND_FRACTION_SETS: dict[int, tuple[float, ...]] = {
    2: (0.55, 0.45),
    3: (0.2, 0.35, 0.45),
    4: (0.2, 0.35, 0.35, 0.1),
    5: (0.2, 0.3, 0.1, 0.3, 0.1),
}


@dataclass
class Config:
    """Every hyperparameter of the pipeline, with defaults.

    ``epochs``, ``lr_milestones`` and ``prompt_epochs`` describe the
    full-scale schedule; ``epoch_scale`` shrinks all three proportionally
    for desk-scale runs (see :meth:`scaled_epochs`).
    """

    # region generation and assessment
    n_regions: int = 4
    gamma: float = 20.0
    context_length: int = 8
    momentum: float = 0.3
    admit_threshold: float = 0.85
    fusion_mode: str = "sum"  # sum | mean
    region_mode: str = "masks"  # masks | stripes
    use_discrimination: bool = True
    use_invariance: bool = True
    class_names: tuple = ("head", "upper body", "lower body", "foot")
    prompt_mode: str = "learnable"  # learnable | handcrafted
    prompt_template: str = "a [CLASS] part of a person"
    prototype_file: str = ""

    # encoder
    image_height: int = 64
    image_width: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    token_dim: int = 512

    # optimisation
    margin: float = 0.3
    learning_rate: float = 5e-5
    head_lr_scale: float = 1.0  # lr multiplier for the fresh scoring/classifier heads
    prompt_lr_scale: float = 1.0  # joint-stage lr multiplier for context/background
    freeze_backbone_epochs: int = 0  # head warmup before the backbone unfreezes
    prompt_learning_rate: float = 5e-5
    weight_decay: float = 5e-4
    batch_p: int = 16
    batch_k: int = 4
    epochs: int = 120
    lr_milestones: tuple = (40, 70)
    lr_decay: float = 0.1
    prompt_epochs: int = 30
    epoch_scale: float = 1.0
    seed: int = 0

    # augmentation (published defaults; scale pad down for small inputs)
    flip_prob: float = 0.5
    augment_pad: int = 10
    erase_prob: float = 0.5

    # data
    data_source: str = "synthetic"  # synthetic | directory
    id_count: int = 0  # 0 = derive from the training split
    synthetic_id_count: int = 50
    synthetic_images_per_id: int = 20
    synthetic_query_per_id: int = 2
    synthetic_gallery_per_id: int = 4
    synthetic_occlusion_rate: float = 0.3
    synthetic_noise_std: float = 0.02
    band_fractions: tuple = (0.2, 0.35, 0.35, 0.1)
    occluder_color_range: tuple = (0.05, 0.3)
    margin_fraction: float = 0.15

    def validate(self) -> None:
        if self.n_regions < 1:
            raise ConfigError("n_regions must be >= 1")
        if self.gamma <= 0:
            raise ConfigError("gamma must be > 0")
        if self.context_length < 1:
            raise ConfigError("context_length must be >= 1")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must be in [0, 1]")
        if not 0.0 < self.admit_threshold < 1.0:
            raise ConfigError("admit_threshold must be in (0, 1)")
        if self.fusion_mode not in ("sum", "mean"):
            raise ConfigError(f"fusion_mode must be sum or mean, got {self.fusion_mode!r}")
        if self.region_mode not in ("masks", "stripes"):
            raise ConfigError(f"region_mode must be masks or stripes, got {self.region_mode!r}")
        if self.prompt_mode not in ("learnable", "handcrafted"):
            raise ConfigError(f"prompt_mode must be learnable or handcrafted, got {self.prompt_mode!r}")
        if len(self.class_names) != self.n_regions:
            raise ConfigError(
                f"class_names has {len(self.class_names)} entries but n_regions={self.n_regions}"
            )
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError("image size must be divisible by patch_size")
        if self.data_source not in ("synthetic", "directory"):
            raise ConfigError(f"data_source must be synthetic or directory, got {self.data_source!r}")
        if len(self.band_fractions) != self.n_regions:
            raise ConfigError(
                f"band_fractions has {len(self.band_fractions)} entries but n_regions={self.n_regions}"
            )
        if abs(sum(self.band_fractions) - 1.0) > 1e-9 or min(self.band_fractions) <= 0:
            raise ConfigError("band_fractions must be positive and sum to 1")
        if not 0.0 <= self.synthetic_occlusion_rate <= 1.0:
            raise ConfigError("synthetic_occlusion_rate must be in [0, 1]")
        if self.batch_p < 1 or self.batch_k < 1:
            raise ConfigError("batch_p and batch_k must be >= 1")
        if self.epoch_scale <= 0:
            raise ConfigError("epoch_scale must be > 0")

    # -- desk-scale schedule -------------------------------------------------
    # The multiplier shrinks the joint-stage schedule (epochs + milestones)
    # proportionally.  The prompt stage runs on cached frozen features and
    # is cheap, so its epoch count is taken as configured.

    def scaled_epochs(self) -> int:
        return max(1, round(self.epochs * self.epoch_scale))

    def scaled_milestones(self) -> tuple[int, ...]:
        return tuple(max(1, round(m * self.epoch_scale)) for m in self.lr_milestones)

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.image_height, self.image_width)


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}
_FIELD_TYPES = {f.name: type(getattr(Config(), f.name)) for f in dataclasses.fields(Config)}

# Element type of each tuple-valued key, for parsing.
_TUPLE_ELEM = {
    "class_names": str,
    "lr_milestones": int,
    "band_fractions": float,
    "occluder_color_range": float,
}


def _parse_scalar(key: str, raw: str, typ: type):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")
    if typ is int:
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: expected an integer, got {raw!r}") from exc
    if typ is float:
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: expected a number, got {raw!r}") from exc
    return raw


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse flat ``key = value`` text into a validated :class:`Config`."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        if key in _TUPLE_ELEM:
            elem = _TUPLE_ELEM[key]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            values[key] = tuple(_parse_scalar(key, p, elem) for p in parts)
        else:
            values[key] = _parse_scalar(key, raw, _FIELD_TYPES[key])
    cfg = dataclasses.replace(base, **values) if base is not None else Config(**values)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> Config:
    return parse_config(Path(path).read_text())


def format_config(cfg: Config) -> str:
    """Serialize a config to canonical flat key-value text."""
    lines = []
    for f in dataclasses.fields(Config):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            rendered = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            rendered = "true" if value else "false"
        else:
            rendered = str(value)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(format_config(cfg))
