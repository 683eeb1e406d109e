"""Dataset ingestion, synthetic benchmark generation, augmentation, sampling.

Directory layout
----------------
A split is a flat directory of images whose filenames start with
``<pid>_c<cam>`` (e.g. ``0001_c1_f0042.png``): ``pid`` is the person id
and ``cam`` the camera id, both decimal integers.  An optional sidecar
directory ``masks/`` next to the images holds one 8-bit label image per
sample, named ``masks/<same-stem>.png``, with one region label per pixel
(0 = background, 1..N = region classes).  Labels are categorical and are
only ever resampled with nearest-neighbor interpolation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image


class DataError(ValueError):
    """Unusable dataset directory, file, or generator configuration."""


_NAME_RE = re.compile(r"^(\d+)_c(\d+)")
_IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")

# Band colors are sampled per channel from this interval (identity cue).
_BAND_COLOR_RANGE = (0.25, 0.75)
# Each band class carries a fixed additive texture (class cue): a
# band-specific high-frequency pattern rides on top of the identity color,
# while background margins and occluders stay flat.
_TEXTURE_CONTRAST = 0.18
# Dark background margins flank the person bands, like real crops.
_BACKGROUND_COLOR_RANGE = (0.02, 0.2)
_CAMERA_COUNT = 4


@dataclass
class Sample:
    """One image with identity/camera labels and optional region annotations.

    ``pseudo_mask`` is an integer label map (0 = background, 1..N = region
    classes), possibly at a different resolution than the image.
    ``occlusion_flags[j]`` refers to region class ``j + 1`` and is only
    populated by the synthetic generator (True = that region is occluded).
    """

    image: torch.Tensor  # [3, H, W] float in [0, 1]
    person_id: int
    camera_id: int
    pseudo_mask: torch.Tensor | None = None  # [Hm, Wm] int64
    occlusion_flags: tuple[bool, ...] | None = None
    path: str = ""

    def __post_init__(self):
        if self.person_id < 0:
            raise DataError(f"person_id must be >= 0, got {self.person_id}")
        if self.image.dim() != 3 or self.image.shape[0] != 3:
            raise DataError(f"image must be [3, H, W], got {tuple(self.image.shape)}")


@dataclass
class DatasetSplit:
    """An ordered, immutable-by-convention collection of samples."""

    samples: list[Sample]
    role: str  # train | query | gallery
    id_count: int
    skipped_files: tuple[str, ...] = ()

    def __post_init__(self):
        if self.role not in ("train", "query", "gallery"):
            raise DataError(f"role must be train/query/gallery, got {self.role!r}")
        distinct = len({s.person_id for s in self.samples})
        if self.id_count != distinct:
            raise DataError(f"id_count={self.id_count} but split has {distinct} distinct ids")

    @classmethod
    def from_samples(cls, samples: list[Sample], role: str, skipped: tuple[str, ...] = ()) -> "DatasetSplit":
        return cls(samples, role, len({s.person_id for s in samples}), skipped)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class SyntheticConfig:
    """Parameters of the synthetic occluded-person benchmark.

    Each identity gets a fixed random color per horizontal band; renderings
    add Gaussian pixel noise and, with probability ``occlusion_rate``, a
    full-width occluder rectangle covering one or two whole bands.
    ``forced_occluder_band`` (1-indexed region class) pins the occluder to
    a single band, for tests.
    """

    id_count: int = 50
    images_per_id: int = 20
    image_size: tuple[int, int] = (64, 32)
    band_fractions: tuple[float, ...] = (0.2, 0.35, 0.35, 0.1)
    occlusion_rate: float = 0.3
    occluder_color_range: tuple[float, float] = (0.05, 0.3)
    noise_std: float = 0.02
    seed: int = 0
    query_per_id: int = 2
    gallery_per_id: int = 4
    margin_fraction: float = 0.15  # dark background columns on each side
    forced_occluder_band: int | None = None

    def validate(self) -> None:
        if abs(sum(self.band_fractions) - 1.0) > 1e-9 or min(self.band_fractions) <= 0:
            raise DataError("band_fractions must be positive and sum to 1")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise DataError("occlusion_rate must be in [0, 1]")
        if self.id_count < 2:
            raise DataError("id_count must be >= 2 (retrieval is undefined for a single identity)")
        lo, hi = self.occluder_color_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise DataError("occluder_color_range must satisfy 0 <= low <= high <= 1")
        if not 0.0 <= self.margin_fraction < 0.5:
            raise DataError("margin_fraction must be in [0, 0.5)")


def band_row_bounds(height: int, fractions: tuple[float, ...]) -> list[tuple[int, int]]:
    """Integer row intervals [(lo, hi), ...] of each band, top to bottom.

    Raises if any band would not fit at least one pixel row.
    """
    bounds = [0]
    acc = 0.0
    for f in fractions:
        acc += f
        bounds.append(round(acc * height))
    bounds[-1] = height
    intervals = list(zip(bounds[:-1], bounds[1:]))
    if any(hi - lo < 1 for lo, hi in intervals):
        raise DataError(
            f"band layout {fractions} does not fit image height {height}: every band needs >= 1 row"
        )
    return intervals


def load_directory_dataset(root: str | Path, role: str) -> DatasetSplit:
    """Load one split from a flat image directory (see module docstring).

    Files whose names do not start with ``<pid>_c<cam>`` are skipped and
    reported in ``skipped_files``.  An image that matches the convention
    but cannot be decoded is an error.  Ordering is lexicographic by path.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory does not exist: {root}")
    mask_dir = root / "masks"
    samples: list[Sample] = []
    skipped: list[str] = []
    for path in sorted(root.iterdir()):
        if not path.is_file() or path.suffix.lower() not in _IMAGE_EXTS:
            continue
        m = _NAME_RE.match(path.name)
        if m is None:
            skipped.append(path.name)
            continue
        pid, cam = int(m.group(1)), int(m.group(2))
        try:
            with Image.open(path) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        except Exception as exc:
            raise DataError(f"unreadable image: {path}") from exc
        image = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
        mask = None
        mask_path = mask_dir / f"{path.stem}.png"
        if mask_path.is_file():
            with Image.open(mask_path) as mimg:
                mask = torch.from_numpy(np.asarray(mimg.convert("L"), dtype=np.int64))
        samples.append(Sample(image, pid, cam, pseudo_mask=mask, path=str(path)))
    if not samples:
        raise DataError(f"no valid samples found under {root}")
    return DatasetSplit.from_samples(samples, role, tuple(skipped))


def band_texture(class_index: int, height: int, width: int) -> np.ndarray:
    """Fixed per-class additive texture in {-a, +a}, shared by every identity.

    Class 0: horizontal stripes, 1: vertical stripes, 2: checkerboard,
    3: fine horizontal stripes; higher classes cycle with growing period.
    """
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    kind = class_index % 4
    period = 2 * (class_index // 4 + 1)
    if kind == 0:
        bit = (rows // period) % 2 + np.zeros_like(cols)
    elif kind == 1:
        bit = (cols // period) % 2 + np.zeros_like(rows)
    elif kind == 2:
        bit = ((rows // period) + (cols // period)) % 2
    else:
        bit = rows % 2 + np.zeros_like(cols)
    return _TEXTURE_CONTRAST * (2.0 * bit - 1.0)


def _render(
    cfg: SyntheticConfig,
    bands: list[tuple[int, int]],
    colors: np.ndarray,  # [N, 3] this identity's band colors
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor, tuple[bool, ...]]:
    height, width = cfg.image_size
    margin = int(round(cfg.margin_fraction * width))
    col_lo, col_hi = margin, width - margin
    n = len(bands)
    bg_lo, bg_hi = _BACKGROUND_COLOR_RANGE
    image = np.empty((height, width, 3), dtype=np.float64)
    image[:, :] = rng.uniform(bg_lo, bg_hi, size=3)
    mask = np.zeros((height, width), dtype=np.int64)
    for j, (lo, hi) in enumerate(bands):
        texture = band_texture(j, height, width)[lo:hi, col_lo:col_hi]
        image[lo:hi, col_lo:col_hi] = colors[j] + texture[:, :, None]
        mask[lo:hi, col_lo:col_hi] = j + 1
    flags = [False] * n
    if rng.random() < cfg.occlusion_rate:
        if cfg.forced_occluder_band is not None:
            first = last = cfg.forced_occluder_band - 1
        else:
            first = int(rng.integers(0, n))
            last = first + 1 if (rng.random() < 0.5 and first + 1 < n) else first
        lo, hi = bands[first][0], bands[last][1]
        occ_lo, occ_hi = cfg.occluder_color_range
        image[lo:hi] = rng.uniform(occ_lo, occ_hi, size=3)
        mask[lo:hi] = 0
        for j in range(first, last + 1):
            flags[j] = True
    image = image + rng.normal(0.0, cfg.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    tensor = torch.from_numpy(image).permute(2, 0, 1).contiguous()
    return tensor, torch.from_numpy(mask), tuple(flags)


def generate_synthetic(cfg: SyntheticConfig) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """Generate (train, query, gallery) splits, deterministic given the seed.

    Query and gallery images are held-out renderings of the same identities
    seen in training (fresh noise and occlusion draws).  Camera ids cycle
    over a small fixed pool within each identity's rendering sequence.
    """
    cfg.validate()
    bands = band_row_bounds(cfg.image_size[0], cfg.band_fractions)
    n = len(bands)
    rng = np.random.default_rng(cfg.seed)
    lo, hi = _BAND_COLOR_RANGE
    colors = rng.uniform(lo, hi, size=(cfg.id_count, n, 3))

    train: list[Sample] = []
    query: list[Sample] = []
    gallery: list[Sample] = []
    per_id = cfg.images_per_id + cfg.query_per_id + cfg.gallery_per_id
    for pid in range(cfg.id_count):
        for idx in range(per_id):
            image, mask, flags = _render(cfg, bands, colors[pid], rng)
            sample = Sample(
                image,
                pid,
                camera_id=idx % _CAMERA_COUNT,
                pseudo_mask=mask,
                occlusion_flags=flags,
                path=f"synthetic://{pid:04d}_c{idx % _CAMERA_COUNT}_r{idx}",
            )
            if idx < cfg.images_per_id:
                train.append(sample)
            elif idx < cfg.images_per_id + cfg.query_per_id:
                query.append(sample)
            else:
                gallery.append(sample)
    return (
        DatasetSplit.from_samples(train, "train"),
        DatasetSplit.from_samples(query, "query"),
        DatasetSplit.from_samples(gallery, "gallery"),
    )


def resize_image(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a [3, H, W] image tensor."""
    if tuple(image.shape[-2:]) == tuple(size):
        return image
    return torch.nn.functional.interpolate(
        image.unsqueeze(0), size=size, mode="bilinear", align_corners=False
    ).squeeze(0)


def resize_labels(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor resize of an integer label map (labels never mix).

    Output pixel (i, j) copies the source pixel containing the center of
    its footprint: ``src = floor((i + 0.5) * H_src / H_out)``.
    """
    h_src, w_src = mask.shape[-2:]
    h_out, w_out = size
    if (h_src, w_src) == (h_out, w_out):
        return mask
    rows = torch.div((torch.arange(h_out) + 0.5) * h_src, h_out, rounding_mode="floor").long()
    cols = torch.div((torch.arange(w_out) + 0.5) * w_src, w_out, rounding_mode="floor").long()
    return mask[..., rows, :][..., :, cols]


def augment(
    sample: Sample,
    train_size: tuple[int, int],
    rng,
    *,
    flip_prob: float = 0.5,
    pad: int = 10,
    erase_prob: float = 0.5,
    erase_area: tuple[float, float] = (0.02, 0.4),
    erase_aspect: tuple[float, float] = (0.3, 10.0 / 3.0),
    erase_fill: tuple[float, float, float] | None = None,
) -> Sample:
    """Resize + flip + pad/crop + random erasing, mask kept aligned.

    The rng draw order is fixed: flip gate (``rng.random()``), crop top and
    left (``rng.integers(0, 2*pad+1)`` each), erase gate (``rng.random()``),
    then per erase attempt an area fraction and aspect ratio
    (``rng.uniform``) and a top/left position (``rng.integers``).  The
    pseudo mask undergoes the same geometric transforms with
    nearest-neighbor resampling; erasing is photometric and leaves it
    untouched.  ``erase_fill`` defaults to the sample's own per-channel
    mean when no dataset mean is supplied.
    """
    height, width = train_size
    if height < 2 or width < 2:
        raise DataError(f"train_size must be at least 2x2, got {train_size}")
    image = resize_image(sample.image, train_size)
    mask = None if sample.pseudo_mask is None else resize_labels(sample.pseudo_mask, train_size)

    if rng.random() < flip_prob:
        image = torch.flip(image, dims=(2,))
        if mask is not None:
            mask = torch.flip(mask, dims=(1,))

    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    padded = torch.nn.functional.pad(image, (pad, pad, pad, pad))
    image = padded[:, top : top + height, left : left + width]
    if mask is not None:
        mpad = torch.nn.functional.pad(mask, (pad, pad, pad, pad))
        mask = mpad[top : top + height, left : left + width]

    if rng.random() < erase_prob:
        fill = (
            torch.tensor(erase_fill, dtype=image.dtype)
            if erase_fill is not None
            else image.mean(dim=(1, 2))
        )
        for _ in range(10):
            area = float(rng.uniform(*erase_area)) * height * width
            aspect = float(rng.uniform(*erase_aspect))
            eh = int(round((area * aspect) ** 0.5))
            ew = int(round((area / aspect) ** 0.5))
            if 0 < eh <= height and 0 < ew <= width:
                etop = int(rng.integers(0, height - eh + 1))
                eleft = int(rng.integers(0, width - ew + 1))
                image = image.clone()
                image[:, etop : etop + eh, eleft : eleft + ew] = fill[:, None, None]
                break

    return replace(sample, image=image, pseudo_mask=mask)


def pk_sampler(split: DatasetSplit, identities_per_batch: int, instances_per_identity: int, rng):
    """Yield one epoch of index batches: P identities x K instances each.

    Every batch holds exactly ``P * K`` indices with ``K`` per identity.
    Each identity's shuffled images are cut into blocks of K (the last
    block padded by resampling, identities with fewer than K images drawn
    with replacement), and each batch combines P blocks of distinct
    identities.  One epoch therefore walks the whole split, covering every
    identity at least once; a short final batch is topped up with extra
    identity blocks so the batch size never changes.
    """
    p, k = identities_per_batch, instances_per_identity
    if p < 1 or k < 1:
        raise DataError("identities_per_batch and instances_per_identity must be >= 1")
    by_id: dict[int, list[int]] = {}
    for idx, s in enumerate(split.samples):
        by_id.setdefault(s.person_id, []).append(idx)
    pids = sorted(by_id)
    if len(pids) < p:
        raise DataError(f"split has {len(pids)} identities, fewer than identities_per_batch={p}")

    def blocks_of(pid: int) -> list[list[int]]:
        idxs = by_id[pid]
        if len(idxs) < k:
            return [[idxs[i] for i in rng.integers(0, len(idxs), size=k)]]
        order = [idxs[i] for i in rng.permutation(len(idxs))]
        out = []
        for start in range(0, len(order), k):
            block = order[start : start + k]
            if len(block) < k:
                pad = rng.integers(0, start, size=k - len(block))
                block = block + [order[i] for i in pad]
            out.append(block)
        return out

    units: list[tuple[int, list[int]]] = []
    for pid in pids:
        units.extend((pid, block) for block in blocks_of(pid))
    units = [units[i] for i in rng.permutation(len(units))]

    batch_units: list[list[tuple[int, list[int]]]] = []
    current: list[tuple[int, list[int]]] = []
    leftovers: list[tuple[int, list[int]]] = []
    for unit in units:
        if any(unit[0] == other[0] for other in current):
            leftovers.append(unit)
        else:
            current.append(unit)
        if len(current) == p:
            batch_units.append(current)
            current = []
    # retry leftovers (same identity twice in one forming batch)
    while leftovers:
        unit, leftovers = leftovers[0], leftovers[1:]
        if any(unit[0] == other[0] for other in current):
            continue  # drop: its images were already seen this epoch
        current.append(unit)
        if len(current) == p:
            batch_units.append(current)
            current = []
    if current:
        pool = [pid for pid in pids if pid not in {u[0] for u in current}]
        extra = rng.choice(len(pool), size=p - len(current), replace=False)
        for i in extra:
            current.append((pool[i], blocks_of(pool[i])[0]))
        batch_units.append(current)

    for group in batch_units:
        batch: list[int] = []
        for _, block in group:
            batch.extend(block)
        yield batch


def contiguous_labels(split: DatasetSplit) -> dict[int, int]:
    """Map raw person ids to contiguous [0, id_count) training labels."""
    return {pid: i for i, pid in enumerate(sorted({s.person_id for s in split.samples}))}
