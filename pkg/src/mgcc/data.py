"""Dataset ingestion, split protocol, augmentation, mixed batching and toy data.

Disk layout ("paired-suffix"): ``<root>/<class>/<name>.png`` with masks named
``<name>_mask.png`` (plus ``_mask_1``, ``_mask_2`` ... variants).  Multiple
masks for one image are merged by pixel-wise OR.  Images resize bilinearly,
masks with nearest-neighbour, so masks stay binary.
"""

import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import DataError

REAL_LABELED = "real-labeled"
REAL_UNLABELED = "real-unlabeled"
SYNTHETIC = "synthetic"

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
SYNTH_ID_PREFIX = "synth"


@dataclass
class Sample:
    """One grayscale image with an optional binary mask and a source tag."""

    id: str
    image: np.ndarray            # float32 HxW in [0,1]
    mask: np.ndarray | None      # uint8 HxW in {0,1}, None for unlabeled
    source: str = REAL_LABELED

    def validate(self):
        if self.image.ndim != 2:
            raise ValueError(f"{self.id}: image must be 2-D, got {self.image.shape}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError(f"{self.id}: image values outside [0,1]")
        if self.mask is not None:
            if self.mask.shape != self.image.shape:
                raise ValueError(f"{self.id}: mask shape {self.mask.shape} != image {self.image.shape}")
            if not np.isin(self.mask, (0, 1)).all():
                raise ValueError(f"{self.id}: mask values outside {{0,1}}")
        return self


@dataclass
class DatasetSplit:
    repeat_index: int
    train_ids: list
    val_ids: list
    labeled_ids: list = field(default_factory=list)
    seed: int = 0


@dataclass
class AugmentationConfig:
    flip_horizontal_prob: float = 0.5
    flip_vertical_prob: float = 0.5
    rotation: str = "right-angles"   # "none" or "right-angles"
    seed: int = 0

    def validate(self):
        errs = []
        for name in ("flip_horizontal_prob", "flip_vertical_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                errs.append(f"augment.{name} must be in [0,1], got {v}")
        if self.rotation not in ("none", "right-angles"):
            errs.append(f"augment.rotation must be 'none' or 'right-angles', got {self.rotation!r}")
        return errs


@dataclass
class MixedBatch:
    """Fixed-size batch of labeled samples (with masks) plus unlabeled images."""

    labeled: list
    unlabeled: list


@dataclass
class ToyGenConfig:
    image_size: int = 64
    lesion_count_range: tuple = (1, 3)
    lesion_axis_range: tuple = (7, 22)    # full axis lengths in pixels
    speckle_strength: float = 0.45
    blur_sigma: float = 1.1               # per-image draw: sigma +- 0.5
    background_level: float = 0.575       # per-image draw: level +- 0.125
    seed: int = 0

    def validate(self):
        errs = []
        if self.image_size < 16:
            errs.append(f"toy image_size must be >= 16, got {self.image_size}")
        lo, hi = self.lesion_axis_range
        if not (0 < lo <= hi):
            errs.append(f"toy lesion_axis_range must satisfy 0 < lo <= hi, got {self.lesion_axis_range}")
        if hi / 2 + 2 > self.image_size / 2:
            errs.append(f"toy lesion axis {hi} does not fit inside a {self.image_size}px image")
        return errs


def round_half_down(x):
    """Round to nearest integer with exact halves rounding down (679.5 -> 679)."""
    return int(math.ceil(x - 0.5))


def _to_gray(img):
    if img.mode not in ("L", "I;16", "F"):
        img = img.convert("L")
    arr = np.asarray(img, dtype=np.float64)
    if arr.max() > 255:          # 16-bit input
        arr = arr / 65535.0
    else:
        arr = arr / 255.0
    return arr


def _mask_paths_for(image_path, mask_suffix):
    stem = image_path.stem
    pattern = re.compile(re.escape(stem + mask_suffix) + r"(_\d+)?$")
    hits = []
    for p in image_path.parent.iterdir():
        if p.suffix.lower() in IMAGE_EXTENSIONS and pattern.fullmatch(p.stem):
            hits.append(p)
    return sorted(hits)


def _is_mask(path, mask_suffix):
    return re.search(re.escape(mask_suffix) + r"(_\d+)?$", path.stem) is not None


def load_directory(path, image_size=256, mask_suffix="_mask", layout="paired-suffix"):
    """Load all samples below ``path`` into memory, resized to image_size.

    One Sample per image file; mask files are found by stem+suffix, OR-merged
    when there are several, and must match the image size before resize.
    Samples with mask files load as real-labeled (all-zero masks retained),
    ids starting with 'synth' as synthetic, everything else as real-unlabeled.
    Returns samples sorted by id.
    """
    if layout != "paired-suffix":
        raise DataError(f"unknown dataset layout {layout!r}")
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    samples = []
    for p in sorted(root.rglob("*")):
        if p.suffix.lower() not in IMAGE_EXTENSIONS or _is_mask(p, mask_suffix):
            continue
        sample_id = p.relative_to(root).with_suffix("").as_posix()
        try:
            img = Image.open(p)
            img.load()
        except Exception as exc:
            raise DataError(f"unreadable image {p}: {exc}") from exc
        mask_files = _mask_paths_for(p, mask_suffix)
        merged = None
        for mp in mask_files:
            try:
                m = Image.open(mp)
                m.load()
            except Exception as exc:
                raise DataError(f"unreadable mask {mp}: {exc}") from exc
            if m.size != img.size:
                raise DataError(f"mask {mp} size {m.size} does not match image {p} size {img.size}")
            binary = np.asarray(m.convert("L")) > 127
            merged = binary if merged is None else (merged | binary)
        image = img.convert("L").resize((image_size, image_size), Image.BILINEAR)
        arr = (np.asarray(image, dtype=np.float32) / 255.0).clip(0.0, 1.0)
        if merged is not None:
            mimg = Image.fromarray(merged.astype(np.uint8) * 255)
            mimg = mimg.resize((image_size, image_size), Image.NEAREST)
            mask = (np.asarray(mimg) > 127).astype(np.uint8)
            source = REAL_LABELED
        else:
            mask = None
            source = SYNTHETIC if p.stem.startswith(SYNTH_ID_PREFIX) else REAL_UNLABELED
        samples.append(Sample(sample_id, arr, mask, source))
    if not samples:
        raise DataError(f"no image files found under {root}")
    samples.sort(key=lambda s: s.id)
    return samples


def make_splits(samples, train_ratio=0.7, repeats=3, seed=0):
    """Random train/val splits, one per repeat, each from a derived seed."""
    if not 0.0 < train_ratio < 1.0:
        raise ValueError(f"train_ratio must be in (0,1), got {train_ratio}")
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    ids = sorted(s.id for s in samples)
    if len(ids) < 2:
        raise DataError(f"need at least 2 samples to split, got {len(ids)}")
    n_train = round_half_down(train_ratio * len(ids))
    n_train = min(max(n_train, 1), len(ids) - 1)
    splits = []
    for r in range(repeats):
        rng = np.random.default_rng([seed, r])
        perm = rng.permutation(len(ids))
        train = sorted(ids[i] for i in perm[:n_train])
        val = sorted(ids[i] for i in perm[n_train:])
        splits.append(DatasetSplit(r, train, val, [], seed))
    return splits


def partition_labels(split, labeled_fraction, seed=0):
    """Choose the labeled subset of the train ids; the rest form the unlabeled pool."""
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must be in (0,1], got {labeled_fraction}")
    n = round_half_down(labeled_fraction * len(split.train_ids))
    n = min(max(n, 1), len(split.train_ids))
    rng = np.random.default_rng([seed, split.repeat_index, 1])
    train = sorted(split.train_ids)
    perm = rng.permutation(len(train))
    labeled = sorted(train[i] for i in perm[:n])
    return DatasetSplit(split.repeat_index, list(split.train_ids), list(split.val_ids), labeled, split.seed)


def augment(sample, config, rng):
    """Apply one random right-angle rotation then flips, jointly to image and mask.

    Draw order is fixed (rotation, horizontal flip, vertical flip) so rng
    consumption does not depend on the outcomes.
    """
    img = sample.image
    mask = sample.mask
    if config.rotation == "right-angles":
        k = int(rng.integers(0, 4))
        if k:
            img = np.rot90(img, k)
            mask = np.rot90(mask, k) if mask is not None else None
    if rng.random() < config.flip_horizontal_prob:
        img = img[:, ::-1]
        mask = mask[:, ::-1] if mask is not None else None
    if rng.random() < config.flip_vertical_prob:
        img = img[::-1, :]
        mask = mask[::-1, :] if mask is not None else None
    return Sample(sample.id, np.ascontiguousarray(img),
                  np.ascontiguousarray(mask) if mask is not None else None, sample.source)


def _cycled_indices(n, rng):
    while True:
        for i in rng.permutation(n):
            yield int(i)


def compose_batches(labeled, unlabeled, labeled_per_batch=4, unlabeled_per_batch=4, rng=None):
    """Yield one epoch of MixedBatch objects with exactly the configured counts.

    One epoch is ceil(len(labeled)/labeled_per_batch) batches; both pools are
    cycled with reshuffling so every batch is full.
    """
    if labeled_per_batch < 1:
        raise ValueError("labeled_per_batch must be >= 1 (epoch length is defined by the labeled pool)")
    if not labeled:
        raise DataError("labeled pool is empty")
    if unlabeled_per_batch > 0 and not unlabeled:
        raise DataError("unlabeled pool is empty but unlabeled_per_batch > 0")
    rng = rng if rng is not None else np.random.default_rng()
    lab_stream = _cycled_indices(len(labeled), rng)
    unl_stream = _cycled_indices(len(unlabeled), rng) if unlabeled_per_batch > 0 else None
    n_batches = math.ceil(len(labeled) / labeled_per_batch)
    for _ in range(n_batches):
        lab = [labeled[next(lab_stream)] for _ in range(labeled_per_batch)]
        unl = [unlabeled[next(unl_stream)] for _ in range(unlabeled_per_batch)] if unl_stream else []
        yield MixedBatch(lab, unl)


# Per-image appearance variability of the toy generator.  The lesion contrast
# stays <= 0.65 of the local background so the mean-intensity ordering between
# lesion and background holds for every sample despite speckle.
_TOY_LEVEL_JITTER = 0.125
_TOY_BLUR_JITTER = 0.5
_TOY_INHOMOGENEITY = 0.30
_TOY_CONTRAST_RANGE = (0.45, 0.65)


def generate_toy(config, n):
    """Procedural ultrasound-like samples: dark elliptical lesions on a brighter
    speckled background, with a smooth intensity inhomogeneity field and
    per-image background/blur jitter.

    Deterministic for a fixed config.seed; mask is the union of lesion ellipses.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    errs = config.validate()
    if errs:
        raise ValueError("; ".join(errs))
    size = config.image_size
    rng = np.random.default_rng(config.seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    samples = []
    for i in range(n):
        level = rng.uniform(config.background_level - _TOY_LEVEL_JITTER,
                            config.background_level + _TOY_LEVEL_JITTER)
        field = gaussian_filter(rng.standard_normal((size, size)), size / 8.0)
        field /= max(np.abs(field).max(), 1e-9)
        img = level * (1.0 + _TOY_INHOMOGENEITY * field)
        mask = np.zeros((size, size), dtype=bool)
        count = int(rng.integers(config.lesion_count_range[0], config.lesion_count_range[1] + 1))
        for _ in range(count):
            d1, d2 = rng.uniform(*config.lesion_axis_range, size=2)
            a, b = d1 / 2.0, d2 / 2.0
            margin = max(a, b) + 2.0
            cx, cy = rng.uniform(margin, size - margin, size=2)
            theta = rng.uniform(0.0, np.pi)
            contrast = rng.uniform(*_TOY_CONTRAST_RANGE)
            xr = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
            yr = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
            inside = (xr / a) ** 2 + (yr / b) ** 2 <= 1.0
            img = np.where(inside, img * contrast, img)
            mask |= inside
        img = img * (1.0 + config.speckle_strength * (2.0 * rng.random((size, size)) - 1.0))
        img = gaussian_filter(img, max(rng.uniform(config.blur_sigma - _TOY_BLUR_JITTER,
                                                   config.blur_sigma + _TOY_BLUR_JITTER), 0.05))
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        samples.append(Sample(f"toy/toy_{i:04d}", img, mask.astype(np.uint8), REAL_LABELED))
    return samples


def export_dataset(samples, root):
    """Write samples as 8-bit grayscale PNG pairs in the paired-suffix layout."""
    root = Path(root)
    for s in samples:
        path = root / f"{s.id}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(s.image * 255.0).astype(np.uint8)).save(path)
        if s.mask is not None:
            Image.fromarray((s.mask * 255).astype(np.uint8)).save(path.with_name(path.stem + "_mask.png"))
    return root


def write_split_manifests(splits, out_dir):
    """One id-per-line text file per {train, val, labeled} per repeat."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in splits:
        for tag, ids in (("train", s.train_ids), ("val", s.val_ids), ("labeled", s.labeled_ids)):
            (out / f"split{s.repeat_index}_{tag}.txt").write_text("".join(i + "\n" for i in ids))
    return out


def read_split_manifest(split_dir, repeat_index):
    split_dir = Path(split_dir)
    parts = {}
    for tag in ("train", "val", "labeled"):
        path = split_dir / f"split{repeat_index}_{tag}.txt"
        if not path.is_file():
            raise DataError(f"missing split manifest: {path}")
        parts[tag] = [line for line in path.read_text().splitlines() if line]
    return DatasetSplit(repeat_index, parts["train"], parts["val"], parts["labeled"])


def dataset_hash(samples):
    """Stable content hash over ids, pixels and masks (for run manifests)."""
    h = hashlib.sha256()
    for s in sorted(samples, key=lambda x: x.id):
        h.update(s.id.encode())
        h.update(np.ascontiguousarray(s.image).tobytes())
        if s.mask is not None:
            h.update(np.ascontiguousarray(s.mask).tobytes())
    return h.hexdigest()
