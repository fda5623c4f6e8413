"""Dataset ingestion, augmentation, fold splitting, and synthetic data.

The synthetic generator draws two classes that differ *only* in the global
arrangement of identical texture blobs (clustered inside a random disc vs
uniformly dispersed), with matched blob counts and total intensity, so a
location-blind intensity histogram carries no label information.
"""
from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from PIL import Image
from torchvision.transforms import functional as tvf

NEGATIVE_LABEL = "negative"
POSITIVE_LABEL = "positive"
LABELS = (NEGATIVE_LABEL, POSITIVE_LABEL)  # index 0 = negative, index 1 = positive

# the source cameras share this resolution after normalization (width, height)
CANONICAL_RESOLUTION = (1390, 1038)

MANIFEST_HEADER = ("id", "path", "label", "fold")


def label_index(label: str) -> int:
    try:
        return LABELS.index(label)
    except ValueError:
        raise ValueError(f"unknown label {label!r}; valid labels: {LABELS}") from None


@dataclass
class LabeledImage:
    pixels: np.ndarray  # H x W x 3, uint8
    label: str
    source_id: str
    path: str = ""

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}; valid labels: {LABELS}")
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
            raise ValueError(f"pixels must be an H x W x 3 uint8 array, got "
                             f"shape {pixels.shape} dtype {pixels.dtype}")
        self.pixels = pixels


# ---------------------------------------------------------------------------
# ingestion


def ingest_directory(root, resize_to: tuple[int, int] | None = CANONICAL_RESOLUTION
                     ) -> tuple[list[LabeledImage], list[str]]:
    """Load `positive/` and `negative/` subdirectories of image files.

    Unreadable files are skipped and recorded in the returned warning list;
    a missing or empty class directory is an error. When `resize_to` is set
    (width, height), every image is normalized to that resolution.
    """
    root = Path(root)
    images: list[LabeledImage] = []
    warnings: list[str] = []
    for label in LABELS:
        class_dir = root / label
        if not class_dir.is_dir():
            raise FileNotFoundError(f"missing class directory: {class_dir}")
        files = sorted(p for p in class_dir.iterdir() if p.is_file())
        if not files:
            raise ValueError(f"empty class directory: {class_dir}")
        for file_path in files:
            try:
                with Image.open(file_path) as img:
                    decoded = img.convert("RGB")
            except Exception as exc:  # noqa: BLE001 - any decode failure is a skip
                warnings.append(f"{file_path}: {exc}")
                continue
            if resize_to is not None and decoded.size != resize_to:
                decoded = decoded.resize(resize_to, Image.BILINEAR)
            images.append(LabeledImage(np.asarray(decoded), label,
                                       source_id=f"{label}/{file_path.stem}",
                                       path=str(file_path)))
    return images, warnings


# ---------------------------------------------------------------------------
# fold protocol


@dataclass(frozen=True)
class FoldPlan:
    """A shared held-out test set plus five disjoint train-validation folds."""

    test_ids: tuple[str, ...]
    folds: tuple[tuple[str, ...], ...]
    seed: int

    def validate(self, test_fraction: float = 0.2) -> None:
        groups = [set(self.test_ids)] + [set(fold) for fold in self.folds]
        total = sum(len(g) for g in groups)
        union = set().union(*groups)
        if len(union) != total:
            raise ValueError("fold plan has overlapping id sets")
        sizes = sorted(len(fold) for fold in self.folds)
        if sizes[-1] - sizes[0] > 1:
            raise ValueError(f"fold sizes differ by more than 1: {sizes}")
        if len(self.test_ids) != round(test_fraction * total):
            raise ValueError(f"test size {len(self.test_ids)} != round({test_fraction} * {total})")

    @property
    def all_ids(self) -> set[str]:
        ids = set(self.test_ids)
        for fold in self.folds:
            ids |= set(fold)
        return ids

    def validation_ids(self, fold_index: int) -> tuple[str, ...]:
        return self.folds[fold_index]

    def train_ids(self, fold_index: int) -> tuple[str, ...]:
        return tuple(i for k, fold in enumerate(self.folds) if k != fold_index for i in fold)


def _apportion(counts: Sequence[int], target: int) -> list[int]:
    # largest-remainder apportionment; sums exactly to target
    total = sum(counts)
    quotas = [target * c / total for c in counts]
    shares = [math.floor(q) for q in quotas]
    remainders = sorted(range(len(counts)), key=lambda i: (quotas[i] - shares[i], -i), reverse=True)
    for i in remainders[: target - sum(shares)]:
        shares[i] += 1
    return shares


def split_folds(ids: Sequence[str], seed: int, labels: dict[str, str] | None = None,
                test_fraction: float = 0.2, fold_count: int = 5) -> FoldPlan:
    """Randomly split ids into a test set and `fold_count` near-equal folds.

    With `labels` (id -> label) the test selection and fold assignment are
    stratified per class; the test size is exactly round(test_fraction * n)
    either way, and fold sizes differ by at most one.
    """
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    if len(ids) < 2 * fold_count:
        raise ValueError(f"need at least {2 * fold_count} ids to build {fold_count} folds, got {len(ids)}")

    rng = random.Random(seed)
    if labels is None:
        groups = [ids]
    else:
        by_label: dict[str, list[str]] = {}
        for sample_id in ids:
            by_label.setdefault(labels[sample_id], []).append(sample_id)
        groups = [by_label[key] for key in sorted(by_label)]
    for group in groups:
        rng.shuffle(group)

    test_target = round(test_fraction * len(ids))
    test_shares = _apportion([len(g) for g in groups], test_target)

    test_ids: list[str] = []
    fold_lists: list[list[str]] = [[] for _ in range(fold_count)]
    position = 0
    for group, share in zip(groups, test_shares):
        test_ids.extend(group[:share])
        for sample_id in group[share:]:
            fold_lists[position % fold_count].append(sample_id)
            position += 1

    plan = FoldPlan(tuple(test_ids), tuple(tuple(fold) for fold in fold_lists), seed)
    plan.validate(test_fraction)
    return plan


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    rotation_degrees: float = 180.0  # uniform in [-r, +r]; 180 covers the full circle
    crop_edge: int = 700
    flip_prob: float = 0.5
    brightness: float = 0.15
    contrast: float = 0.3
    saturation: float = 0.3
    hue: float = 0.06
    resize_edge: int = 384
    normalize_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    normalize_std: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.hue > 0.5:
            raise ValueError("hue shift cannot exceed 0.5")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be a probability")
        if self.crop_edge < 1 or self.resize_edge < 1:
            raise ValueError("crop_edge and resize_edge must be positive")
        if self.rotation_degrees < 0:
            raise ValueError("rotation_degrees must be non-negative")


@dataclass(frozen=True)
class AugmentParams:
    angle_degrees: float
    flip: bool
    brightness_factor: float
    contrast_factor: float
    saturation_factor: float
    hue_shift: float


def identity_augment_params() -> AugmentParams:
    """Midpoint draws: no rotation, no flip, unit jitter factors."""
    return AugmentParams(0.0, False, 1.0, 1.0, 1.0, 0.0)


def draw_augment_params(rng: random.Random, config: AugmentConfig) -> AugmentParams:
    r = config.rotation_degrees
    return AugmentParams(
        angle_degrees=rng.uniform(-r, r),
        flip=rng.random() < config.flip_prob,
        brightness_factor=rng.uniform(max(0.0, 1.0 - config.brightness), 1.0 + config.brightness),
        contrast_factor=rng.uniform(max(0.0, 1.0 - config.contrast), 1.0 + config.contrast),
        saturation_factor=rng.uniform(max(0.0, 1.0 - config.saturation), 1.0 + config.saturation),
        hue_shift=rng.uniform(-config.hue, config.hue),
    )


def _pixels_of(image) -> np.ndarray:
    if isinstance(image, LabeledImage):
        return image.pixels
    return np.asarray(image)


def _pad_for_rotation(pixels: np.ndarray, crop_edge: int) -> np.ndarray:
    # rotation about the center samples inside the circumscribed radius of
    # the crop square; reflect-pad until that disc lies within the image
    height, width = pixels.shape[:2]
    radius = crop_edge * math.sqrt(2.0) / 2.0
    pad_y = max(0, math.ceil(radius - height / 2))
    pad_x = max(0, math.ceil(radius - width / 2))
    if pad_y == 0 and pad_x == 0:
        return pixels
    return np.pad(pixels, ((pad_y, pad_y), (pad_x, pad_x), (0, 0)), mode="reflect")


def _center_crop(img: Image.Image, edge: int) -> Image.Image:
    width, height = img.size
    left = (width - edge) // 2
    top = (height - edge) // 2
    return img.crop((left, top, left + edge, top + edge))


def apply_augment(image, params: AugmentParams, config: AugmentConfig) -> torch.Tensor:
    """Rotate, center-crop, flip, color-jitter, resize, scale to [0, 1].

    Identity parameters reproduce `preprocess_eval` exactly: every no-op step
    is skipped rather than applied with neutral arguments.
    """
    pixels = _pixels_of(image)
    height, width = pixels.shape[:2]
    if min(height, width) < config.crop_edge:
        raise ValueError(f"image {width}x{height} smaller than crop edge {config.crop_edge}")

    if params.angle_degrees != 0.0:
        padded = _pad_for_rotation(pixels, config.crop_edge)
        img = Image.fromarray(padded).rotate(params.angle_degrees, resample=Image.BILINEAR)
    else:
        img = Image.fromarray(pixels)
    img = _center_crop(img, config.crop_edge)

    if params.flip:
        img = tvf.hflip(img)
    if params.brightness_factor != 1.0:
        img = tvf.adjust_brightness(img, params.brightness_factor)
    if params.contrast_factor != 1.0:
        img = tvf.adjust_contrast(img, params.contrast_factor)
    if params.saturation_factor != 1.0:
        img = tvf.adjust_saturation(img, params.saturation_factor)
    if params.hue_shift != 0.0:
        img = tvf.adjust_hue(img, params.hue_shift)

    if img.size != (config.resize_edge, config.resize_edge):
        img = img.resize((config.resize_edge, config.resize_edge), Image.BILINEAR)

    tensor = torch.from_numpy(np.asarray(img, dtype=np.float32)).permute(2, 0, 1) / 255.0
    if config.normalize_mean != (0.0, 0.0, 0.0) or config.normalize_std != (1.0, 1.0, 1.0):
        mean = torch.tensor(config.normalize_mean).view(3, 1, 1)
        std = torch.tensor(config.normalize_std).view(3, 1, 1)
        tensor = (tensor - mean) / std
    return tensor


def augment_train(image, rng: random.Random, config: AugmentConfig | None = None) -> torch.Tensor:
    """Randomized training transform; all randomness comes from `rng`."""
    config = config or AugmentConfig()
    return apply_augment(image, draw_augment_params(rng, config), config)


def preprocess_eval(image, config: AugmentConfig | None = None) -> torch.Tensor:
    """Deterministic evaluation transform: center crop, resize, scale."""
    config = config or AugmentConfig()
    return apply_augment(image, identity_augment_params(), config)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    edge: int = 64
    per_class: int = 256
    blob_count: int = 8
    blob_radius: float = 3.0
    blob_peak: float = 150.0
    background: float = 20.0
    noise_sigma: float = 8.0
    cluster_radius: float | None = None  # defaults to edge / 5

    def __post_init__(self):
        if self.edge < 8 or self.per_class < 1 or self.blob_count < 1:
            raise ValueError("edge, per_class and blob_count must be positive (edge >= 8)")
        if self.blob_count * math.pi * self.blob_radius ** 2 > self.edge ** 2:
            raise ValueError(f"total blob area exceeds the image area "
                             f"({self.blob_count} blobs of radius {self.blob_radius} on edge {self.edge})")

    @property
    def cluster_radius_value(self) -> float:
        return self.cluster_radius if self.cluster_radius is not None else self.edge / 5.0


class SynthImage(NamedTuple):
    image: LabeledImage
    blob_centers: tuple[tuple[float, float], ...]  # (y, x)


def _blob_sigma(spec: SynthSpec) -> float:
    return spec.blob_radius / 2.0


def _blob_margin(spec: SynthSpec) -> int:
    return int(math.ceil(3.0 * _blob_sigma(spec))) + 1


def _sample_with_separation(rng: np.random.Generator, count: int, draw, min_sep: float,
                            max_tries: int = 20000) -> list[tuple[float, float]]:
    points: list[tuple[float, float]] = []
    for _ in range(max_tries):
        y, x = draw()
        if all((y - py) ** 2 + (x - px) ** 2 >= min_sep ** 2 for py, px in points):
            points.append((y, x))
            if len(points) == count:
                return points
    raise RuntimeError("could not place non-overlapping blobs; reduce blob_count or blob_radius")


def _dispersed_centers(rng: np.random.Generator, spec: SynthSpec) -> list[tuple[float, float]]:
    margin = _blob_margin(spec)
    low, high = margin, spec.edge - 1 - margin

    def draw():
        return rng.uniform(low, high), rng.uniform(low, high)

    return _sample_with_separation(rng, spec.blob_count, draw, 2 * spec.blob_radius)


def _clustered_centers(rng: np.random.Generator, spec: SynthSpec) -> list[tuple[float, float]]:
    margin = _blob_margin(spec)
    radius = spec.cluster_radius_value
    while True:
        low = margin + radius
        high = spec.edge - 1 - margin - radius
        if high <= low:
            raise ValueError("cluster radius too large for the image edge")
        cy = rng.uniform(low, high)
        cx = rng.uniform(low, high)

        def draw():
            r = radius * math.sqrt(rng.uniform(0.0, 1.0))
            theta = rng.uniform(0.0, 2.0 * math.pi)
            return cy + r * math.sin(theta), cx + r * math.cos(theta)

        try:
            return _sample_with_separation(rng, spec.blob_count, draw, 2 * spec.blob_radius,
                                           max_tries=5000)
        except RuntimeError:
            radius *= 1.2  # disc too tight for non-overlapping blobs; relax and retry


def _render(centers: Sequence[tuple[float, float]], spec: SynthSpec,
            rng: np.random.Generator) -> np.ndarray:
    canvas = np.full((spec.edge, spec.edge), spec.background, dtype=np.float64)
    sigma = _blob_sigma(spec)
    ys, xs = np.mgrid[0:spec.edge, 0:spec.edge]
    for cy, cx in centers:
        dist_sq = (ys - cy) ** 2 + (xs - cx) ** 2
        canvas += spec.blob_peak * np.exp(-dist_sq / (2.0 * sigma * sigma))
    canvas += rng.normal(0.0, spec.noise_sigma, canvas.shape)
    gray = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return np.repeat(gray[:, :, None], 3, axis=2)


def synth_generate_detailed(spec: SynthSpec, seed: int) -> list[SynthImage]:
    """Generate 2 * per_class images with their blob centers.

    Class `positive` clusters the blobs inside a random disc; class
    `negative` disperses them uniformly. Blob count and rendering are
    identical across classes, so total intensity is matched by construction.
    """
    rng = np.random.default_rng(seed)
    samples: list[SynthImage] = []
    for label, sampler in ((NEGATIVE_LABEL, _dispersed_centers), (POSITIVE_LABEL, _clustered_centers)):
        for index in range(spec.per_class):
            centers = sampler(rng, spec)
            pixels = _render(centers, spec, rng)
            image = LabeledImage(pixels, label, source_id=f"synth-{label}-{index:04d}")
            samples.append(SynthImage(image, tuple(centers)))
    return samples


def synth_generate(spec: SynthSpec, seed: int) -> list[LabeledImage]:
    return [sample.image for sample in synth_generate_detailed(spec, seed)]


def blob_mask(spec: SynthSpec, centers: Sequence[tuple[float, float]],
              radius_scale: float = 1.0) -> np.ndarray:
    """Boolean H x W mask covering discs of blob_radius around each center."""
    ys, xs = np.mgrid[0:spec.edge, 0:spec.edge]
    mask = np.zeros((spec.edge, spec.edge), dtype=bool)
    radius = spec.blob_radius * radius_scale
    for cy, cx in centers:
        mask |= (ys - cy) ** 2 + (xs - cx) ** 2 <= radius ** 2
    return mask


def intensity_histogram(image, bins: int = 32) -> np.ndarray:
    """Location-blind per-image feature: normalized grayscale histogram."""
    pixels = _pixels_of(image)
    gray = pixels.mean(axis=2)
    hist, _ = np.histogram(gray, bins=bins, range=(0.0, 255.0))
    return hist.astype(np.float64) / gray.size


def histogram_baseline_accuracy(train_images: Sequence[LabeledImage],
                                test_images: Sequence[LabeledImage],
                                bins: int = 32, seed: int = 0) -> float:
    """Accuracy of a logistic classifier on global intensity histograms."""
    from sklearn.linear_model import LogisticRegression  # heavy import kept local

    train_x = np.stack([intensity_histogram(img, bins) for img in train_images])
    train_y = np.array([label_index(img.label) for img in train_images])
    test_x = np.stack([intensity_histogram(img, bins) for img in test_images])
    test_y = np.array([label_index(img.label) for img in test_images])
    clf = LogisticRegression(max_iter=2000, random_state=seed)
    clf.fit(train_x, train_y)
    return float(clf.score(test_x, test_y))


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, rows: Sequence[tuple[str, str, str, str]]) -> None:
    """Write a UTF-8 CSV with header id,path,label,fold."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)


def read_manifest(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_HEADER:
            raise ValueError(f"{path}: expected manifest header {','.join(MANIFEST_HEADER)}")
        return list(reader)


def write_synth_dataset(images: Sequence[LabeledImage], out_dir) -> Path:
    """Persist images as PNGs plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for image in images:
        file_path = image_dir / f"{image.source_id}.png"
        Image.fromarray(image.pixels).save(file_path)
        rows.append((image.source_id, str(file_path.relative_to(out_dir)), image.label, ""))
    manifest_path = out_dir / "manifest.csv"
    write_manifest(manifest_path, rows)
    return manifest_path


def load_manifest_images(manifest_path) -> list[LabeledImage]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    images = []
    for row in read_manifest(manifest_path):
        file_path = Path(row["path"])
        if not file_path.is_absolute():
            file_path = base / file_path
        with Image.open(file_path) as img:
            pixels = np.asarray(img.convert("RGB"))
        images.append(LabeledImage(pixels, row["label"], row["id"], path=str(file_path)))
    return images


def load_dataset(path) -> list[LabeledImage]:
    """Load either a manifest-based dataset or a positive/negative directory tree."""
    path = Path(path)
    if path.is_file() and path.suffix == ".csv":
        return load_manifest_images(path)
    if (path / "manifest.csv").is_file():
        return load_manifest_images(path / "manifest.csv")
    if (path / POSITIVE_LABEL).is_dir() and (path / NEGATIVE_LABEL).is_dir():
        images, _ = ingest_directory(path)
        return images
    raise FileNotFoundError(f"{path}: expected a manifest.csv or positive/ and negative/ directories")
