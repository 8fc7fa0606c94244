"""Dataset ingestion, augmentation, splitting, batching, and the synthetic
desk-scale generator.

Dataset directory layout (real and synthetic datasets are interchangeable):

* ``<dir>/metadata.csv`` with header columns ``dish_id``, ``dish_name``,
  ``total_calories`` (extra columns ignored);
* ``<dir>/images/<dish_id>.png``, 8-bit RGB.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError
from .layers import Vectorizer

METADATA_NAME = "metadata.csv"
IMAGES_DIRNAME = "images"
REQUIRED_COLUMNS = ("dish_id", "dish_name", "total_calories")


class ImageLoadError(RuntimeError):
    """A single image file could not be read or decoded."""


@dataclass
class DishRecord:
    """One dataset row; ``image`` holds in-memory pixels for synthetic data
    that was never written to disk."""

    dish_id: str
    dish_name: str
    calories: float
    image_path: str | None = None
    image: np.ndarray | None = None


@dataclass
class LoadReport:
    """Row accounting from metadata ingestion."""

    total_rows: int = 0
    kept: int = 0
    dropped_missing_name: int = 0
    dropped_bad_calories: int = 0
    dropped_out_of_range: int = 0
    dropped_missing_image: int = 0

    @property
    def dropped(self) -> int:
        return (self.dropped_missing_name + self.dropped_bad_calories
                + self.dropped_out_of_range + self.dropped_missing_image)


@dataclass
class SplitDataset:
    train: list[DishRecord]
    test: list[DishRecord]
    seed: int


@dataclass
class AugmentPolicy:
    """Horizontal flip plus brightness/contrast jitter within 10 percent."""

    flip_prob: float = 0.5
    brightness_range: tuple[float, float] = (0.9, 1.1)
    contrast_range: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        for name in ("brightness_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if not lo <= 1.0 <= hi:
                raise ValueError(f"{name} must contain 1.0, got {(lo, hi)}")


def load_metadata(csv_path: str, min_kcal: float = 1.0, max_kcal: float = 3000.0,
                  images_dir: str | None = None) -> tuple[list[DishRecord], LoadReport]:
    """Parse a metadata CSV into DishRecords, dropping unusable rows.

    Rows are dropped (and counted by reason) when the dish name is missing,
    the calorie cell is missing or non-numeric, calories fall outside
    [min_kcal, max_kcal], or the dish image file does not exist.
    """
    if images_dir is None:
        images_dir = os.path.join(os.path.dirname(os.path.abspath(csv_path)), IMAGES_DIRNAME)
    with open(csv_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise DatasetError(f"{csv_path}: empty metadata file")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise DatasetError(
                f"{csv_path}: missing required column(s) {missing}; "
                f"found {reader.fieldnames}")
        report = LoadReport()
        records: list[DishRecord] = []
        for row in reader:
            report.total_rows += 1
            name = (row.get("dish_name") or "").strip()
            if not name:
                report.dropped_missing_name += 1
                continue
            raw = (row.get("total_calories") or "").strip()
            try:
                kcal = float(raw)
            except ValueError:
                report.dropped_bad_calories += 1
                continue
            if not raw or not math.isfinite(kcal):
                report.dropped_bad_calories += 1
                continue
            if not min_kcal <= kcal <= max_kcal:
                report.dropped_out_of_range += 1
                continue
            dish_id = (row.get("dish_id") or "").strip()
            path = os.path.join(images_dir, f"{dish_id}.png")
            if not os.path.isfile(path):
                report.dropped_missing_image += 1
                continue
            records.append(DishRecord(dish_id, name, kcal, path))
            report.kept += 1
    if not records:
        raise DatasetError(f"{csv_path}: no usable rows after filtering "
                           f"({report.total_rows} read, {report.dropped} dropped)")
    return records, report


def split(records: list[DishRecord], ratio: float, seed: int) -> SplitDataset:
    """Seeded shuffle, then the first floor(ratio * N) records become the
    training side.  Deterministic in (record order, seed)."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    if len(records) < 2:
        raise ValueError(f"need at least 2 records to split, got {len(records)}")
    order = np.random.default_rng(seed).permutation(len(records))
    cut = int(math.floor(ratio * len(records)))
    train = [records[i] for i in order[:cut]]
    test = [records[i] for i in order[cut:]]
    return SplitDataset(train=train, test=test, seed=seed)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pure bilinear interpolation with half-pixel-centered sampling."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(img.dtype, copy=False)


def load_image(path: str, target_size: tuple[int, int]) -> np.ndarray:
    """Decode an RGB image, resize bilinearly, and scale to [0, 1] float32."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as e:
        raise ImageLoadError(f"cannot load image {path}: {e}") from e
    return bilinear_resize(arr, target_size[0], target_size[1])


def augment(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Randomly flip horizontally, then jitter brightness and contrast.

    Contrast is applied about the per-image mean, so a constant image is a
    fixed point of the contrast step.  Output stays in [0, 1].
    """
    out = image
    if rng.random() < policy.flip_prob:
        out = out[:, ::-1, :]
    b = rng.uniform(*policy.brightness_range)
    if b != 1.0:
        out = out * np.float32(b)
    c = rng.uniform(*policy.contrast_range)
    if c != 1.0:
        mean = out.mean(dtype=np.float64)
        out = np.float32(mean) + np.float32(c) * (out - np.float32(mean))
    return np.clip(out, 0.0, 1.0).astype(np.float32, copy=False)


def _record_pixels(rec: DishRecord, image_size: int) -> np.ndarray:
    if rec.image is not None:
        img = rec.image
        if img.shape[:2] != (image_size, image_size):
            img = bilinear_resize(img.astype(np.float32), image_size, image_size)
        return img.astype(np.float32, copy=False)
    try:
        return load_image(rec.image_path, (image_size, image_size))
    except ImageLoadError as e:
        raise ImageLoadError(f"dish {rec.dish_id}: {e}") from e


def make_batches(records: list[DishRecord], batch_size: int, vectorizer: Vectorizer | None,
                 image_size: int, shuffle_seed: int,
                 augment_policy: AugmentPolicy | None = None):
    """Yield epoch-shuffled (images, ids, targets) batches.

    The final partial batch is emitted.  ``ids`` is None when no vectorizer
    is given.  Augmentation runs only when a policy is supplied (training).
    All randomness is derived from ``shuffle_seed``, so two passes with the
    same arguments produce bitwise-identical tensors.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be at least 1, got {batch_size}")
    order = np.random.default_rng(shuffle_seed).permutation(len(records))
    aug_rng = np.random.default_rng(np.random.SeedSequence((shuffle_seed, 0xA06)))
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        images = np.empty((len(chunk), image_size, image_size, 3), dtype=np.float32)
        for i, rec in enumerate(chunk):
            img = _record_pixels(rec, image_size)
            if augment_policy is not None:
                img = augment(img, augment_policy, aug_rng)
            images[i] = img
        ids = None
        if vectorizer is not None:
            ids = np.stack([vectorizer.vectorize(rec.dish_name) for rec in chunk])
        targets = np.asarray([[rec.calories] for rec in chunk], dtype=np.float32)
        yield images, ids, targets


def dataset_fingerprint(csv_path: str) -> str:
    """Content hash of the metadata file."""
    digest = hashlib.sha256()
    with open(csv_path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

BASE_KCAL = 400.0
LEVELS = (0.1, 0.3, 0.5, 0.7, 0.9)
SIZE_TOKENS = ("tiny", "small", "medium", "large", "giant")
FILLER_TOKENS = ("bowl", "plate", "salad", "soup", "stew", "curry", "pasta", "noodles")
SYNTH_MIN_N = 10


# blob palette with hue variety but identical mean luminance, so covered
# area maps linearly onto mean brightness
_BLOB_PALETTE = np.array([
    (0.90, 0.60, 0.60), (0.60, 0.90, 0.60), (0.60, 0.60, 0.90),
    (0.85, 0.85, 0.40), (0.40, 0.85, 0.85), (0.85, 0.40, 0.85),
    (0.70, 0.70, 0.70), (0.95, 0.70, 0.45),
], dtype=np.float32)


def _paint_blobs(rng: np.random.Generator, image_size: int, target_area: float) -> np.ndarray:
    """Compose food-colored circles on a dark plate until the covered pixel
    fraction reaches the target."""
    img = np.full((image_size, image_size, 3), 0.08, dtype=np.float32)
    img += (rng.random((image_size, image_size, 1)) * 0.04).astype(np.float32)
    covered = np.zeros((image_size, image_size), dtype=bool)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    total = image_size * image_size
    for _ in range(512):
        if covered.sum() / total >= target_area:
            break
        cy, cx = rng.uniform(0, image_size, size=2)
        radius = rng.uniform(0.06, 0.12) * image_size
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
        img[blob] = _BLOB_PALETTE[int(rng.integers(len(_BLOB_PALETTE)))]
        covered |= blob
    # quantize like the on-disk PNG path so in-memory and exported datasets agree
    return (np.round(np.clip(img, 0, 1) * 255.0) / 255.0).astype(np.float32)


def synth_generate(n: int, seed: int, text_signal: float,
                   image_size: int = 32) -> tuple[list[DishRecord], dict]:
    """Generate n dishes whose calories blend an image-visible signal (blob
    coverage) with a dish-name signal (a size word).

    calories = BASE_KCAL * ((1 - text_signal) * area_level
                            + text_signal * size_level)

    The size word is always drawn independently of the image, so at
    text_signal 0 the name carries no information about calories; at
    text_signal 0.5 the two signals contribute equal variance.
    """
    if n < SYNTH_MIN_N:
        raise ValueError(f"synthetic datasets need at least {SYNTH_MIN_N} dishes, got {n}")
    if not 0.0 <= text_signal <= 1.0:
        raise ValueError(f"text_signal must be in [0, 1], got {text_signal}")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        area_idx = int(rng.integers(len(LEVELS)))
        size_idx = int(rng.integers(len(LEVELS)))
        filler = FILLER_TOKENS[int(rng.integers(len(FILLER_TOKENS)))]
        kcal = BASE_KCAL * ((1.0 - text_signal) * LEVELS[area_idx]
                            + text_signal * LEVELS[size_idx])
        records.append(DishRecord(
            dish_id=f"dish_{i:05d}",
            dish_name=f"{SIZE_TOKENS[size_idx]} {filler}",
            calories=float(kcal),
            image=_paint_blobs(rng, image_size, LEVELS[area_idx])))
    truth = {
        "generator": "blob-area-v1",
        "n": n,
        "seed": seed,
        "text_signal": text_signal,
        "image_size": image_size,
        "base_kcal": BASE_KCAL,
        "levels": list(LEVELS),
        "size_tokens": list(SIZE_TOKENS),
        "text_dependence": "none" if text_signal == 0.0 else "size token",
    }
    return records, truth


def write_dataset(out_dir: str, records: list[DishRecord], truth: dict | None = None,
                  force: bool = False) -> None:
    """Export records (with in-memory images) in the standard directory layout."""
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise FileExistsError(f"{out_dir} exists and is not empty (use force to overwrite)")
    images_dir = os.path.join(out_dir, IMAGES_DIRNAME)
    os.makedirs(images_dir, exist_ok=True)
    with open(os.path.join(out_dir, METADATA_NAME), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(REQUIRED_COLUMNS)
        for rec in records:
            writer.writerow([rec.dish_id, rec.dish_name, repr(rec.calories)])
    for rec in records:
        arr = np.round(np.clip(rec.image, 0, 1) * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(os.path.join(images_dir, f"{rec.dish_id}.png"))
    if truth is not None:
        with open(os.path.join(out_dir, "truth.json"), "w", encoding="utf-8") as f:
            json.dump(truth, f, indent=2, sort_keys=True)


def load_dataset_dir(data_dir: str, min_kcal: float = 1.0,
                     max_kcal: float = 3000.0) -> tuple[list[DishRecord], LoadReport]:
    """Load a dataset directory in the standard layout."""
    return load_metadata(os.path.join(data_dir, METADATA_NAME), min_kcal, max_kcal,
                         images_dir=os.path.join(data_dir, IMAGES_DIRNAME))
