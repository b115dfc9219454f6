"""Dataset ingestion, deterministic splits, and batch/episode sampling.

Datasets live on disk as ``root/<split>/<class_name>/<image files>`` with an
optional per-split manifest ``root/<split>_classes.txt`` (one class name per
line) that the loader verifies when present.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import AugmentationPolicy

SPLITS = ("train", "val", "test")

# Class ids of different splits live in disjoint ranges so that accidental
# split mixing is detectable downstream.
_SPLIT_ID_OFFSET = {"train": 0, "val": 1_000_000, "test": 2_000_000}

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}


class IngestError(RuntimeError):
    """Raised when the on-disk dataset layout is missing or malformed."""


class SamplingError(ValueError):
    """Raised when a batch or episode request cannot be satisfied."""


@dataclass(frozen=True)
class DatasetProfile:
    """Shape and split bookkeeping for one dataset family.

    ``split_classes`` maps split name to the expected number of classes;
    ``None`` disables the check (used by small test fixtures).
    ``flip_safe`` marks whether horizontal mirroring preserves class identity
    (false for handwritten characters).
    """

    name: str
    image_shape: tuple[int, int, int]
    split_classes: dict[str, int] | None = None
    flip_safe: bool = True


OMNIGLOT = DatasetProfile(
    name="omniglot",
    image_shape=(28, 28, 1),
    split_classes={"train": 1028, "val": 172, "test": 423},
    flip_safe=False,
)

MINI_IMAGENET = DatasetProfile(
    name="mini-imagenet",
    image_shape=(84, 84, 3),
    split_classes={"train": 64, "val": 16, "test": 20},
)

PROFILES = {p.name: p for p in (OMNIGLOT, MINI_IMAGENET)}


@dataclass(frozen=True)
class ImageSample:
    """One image with its (hidden-from-pretraining) class label."""

    pixels: np.ndarray  # H x W x C float32 in [0, 1]
    class_id: int
    sample_id: int


@dataclass(frozen=True)
class PretrainBatch:
    """L originals plus L*Q augmented views in origin-major order."""

    originals: np.ndarray  # (L, H, W, C)
    augmented: np.ndarray  # (L*Q, H, W, C); views of original i occupy rows i*Q..(i+1)*Q-1
    origin_index: np.ndarray  # (L*Q,) int, view row -> original row

    @property
    def num_originals(self) -> int:
        return self.originals.shape[0]

    @property
    def views_per_original(self) -> int:
        return self.augmented.shape[0] // max(self.originals.shape[0], 1)

    @property
    def size(self) -> int:
        """Total row count (Q+1)*L of the embedded batch."""
        return self.originals.shape[0] + self.augmented.shape[0]

    def images(self) -> np.ndarray:
        """All images in embedding-row order: originals first, then views."""
        return np.concatenate([self.originals, self.augmented], axis=0)


@dataclass(frozen=True)
class Episode:
    """One (N-way, K-shot) task with episode-local labels 0..N-1."""

    support_images: np.ndarray  # (N*K, H, W, C)
    support_labels: np.ndarray  # (N*K,)
    query_images: np.ndarray  # (N*Q_eval, H, W, C)
    query_labels: np.ndarray  # (N*Q_eval,)
    support_sample_ids: np.ndarray
    query_sample_ids: np.ndarray
    class_ids: np.ndarray  # (N,) original class id per episode-local label

    @property
    def n_way(self) -> int:
        return len(self.class_ids)


def _load_image(path: Path, shape: tuple[int, int, int]) -> np.ndarray:
    h, w, c = shape
    try:
        with Image.open(path) as img:
            img = img.convert("L" if c == 1 else "RGB")
            if img.size != (w, h):
                img = img.resize((w, h), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise IngestError(f"cannot read image {path}: {exc}") from exc
    if c == 1:
        arr = arr[:, :, None]
    return arr


def load_split(profile: DatasetProfile, split: str, root: str | Path) -> list[ImageSample]:
    """Load all samples of one split, resized to the profile shape.

    Class and file enumeration is sorted, so repeated loads return samples in
    identical order.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    root = Path(root)
    split_dir = root / split
    if not split_dir.is_dir():
        raise IngestError(f"split directory not found: {split_dir}")

    class_dirs = sorted(p for p in split_dir.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestError(f"no class directories under {split_dir}")

    manifest = root / f"{split}_classes.txt"
    if manifest.is_file():
        expected = sorted(line.strip() for line in manifest.read_text().splitlines() if line.strip())
        found = [p.name for p in class_dirs]
        if found != expected:
            missing = sorted(set(expected) - set(found))
            extra = sorted(set(found) - set(expected))
            raise IngestError(
                f"{split_dir} does not match manifest {manifest}: "
                f"missing={missing[:5]} extra={extra[:5]}"
            )

    if profile.split_classes is not None:
        expected_n = profile.split_classes.get(split)
        if expected_n is not None and len(class_dirs) != expected_n:
            raise IngestError(
                f"{split_dir} holds {len(class_dirs)} classes; profile "
                f"{profile.name!r} expects {expected_n} for split {split!r}"
            )

    samples: list[ImageSample] = []
    sample_id = _SPLIT_ID_OFFSET[split] * 100
    for class_idx, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise IngestError(f"empty class directory: {class_dir}")
        class_id = _SPLIT_ID_OFFSET[split] + class_idx
        for path in files:
            samples.append(
                ImageSample(pixels=_load_image(path, profile.image_shape), class_id=class_id, sample_id=sample_id)
            )
            sample_id += 1
    return samples


def sample_pretrain_batch(
    samples: list[ImageSample],
    num_originals: int,
    views_per_original: int,
    policy: AugmentationPolicy,
    rng: np.random.Generator,
) -> PretrainBatch:
    """Draw L distinct originals and Q independent augmentations of each."""
    if views_per_original < 1:
        raise SamplingError("views_per_original must be >= 1; the loss terms average over views")
    if num_originals > len(samples):
        raise SamplingError(
            f"requested {num_originals} originals from a pool of {len(samples)} samples"
        )
    chosen = rng.choice(len(samples), size=num_originals, replace=False)
    originals = np.stack([samples[i].pixels for i in chosen])
    views = []
    for i in chosen:
        for _ in range(views_per_original):
            views.append(policy.apply(samples[i].pixels, rng))
    augmented = np.stack(views)
    origin_index = np.repeat(np.arange(num_originals), views_per_original)
    return PretrainBatch(originals=originals, augmented=augmented, origin_index=origin_index)


def group_by_class(samples: list[ImageSample]) -> dict[int, list[int]]:
    by_class: dict[int, list[int]] = {}
    for idx, s in enumerate(samples):
        by_class.setdefault(s.class_id, []).append(idx)
    return by_class


def sample_episode(
    samples: list[ImageSample],
    n_way: int,
    k_shot: int,
    queries_per_class: int,
    rng: np.random.Generator,
) -> Episode:
    """Sample a class-balanced (N-way, K-shot) episode with disjoint support/query."""
    by_class = group_by_class(samples)
    need = k_shot + queries_per_class
    eligible = sorted(cid for cid, idxs in by_class.items() if len(idxs) >= need)
    if len(eligible) < n_way:
        raise SamplingError(
            f"need {n_way} classes with >= {need} samples each; only {len(eligible)} qualify"
        )
    class_ids = rng.choice(eligible, size=n_way, replace=False)

    sup_imgs, sup_labels, sup_ids = [], [], []
    qry_imgs, qry_labels, qry_ids = [], [], []
    for local, cid in enumerate(class_ids):
        pool = by_class[int(cid)]
        picked = rng.choice(len(pool), size=need, replace=False)
        for j in picked[:k_shot]:
            s = samples[pool[j]]
            sup_imgs.append(s.pixels)
            sup_labels.append(local)
            sup_ids.append(s.sample_id)
        for j in picked[k_shot:]:
            s = samples[pool[j]]
            qry_imgs.append(s.pixels)
            qry_labels.append(local)
            qry_ids.append(s.sample_id)

    return Episode(
        support_images=np.stack(sup_imgs),
        support_labels=np.asarray(sup_labels, dtype=np.int64),
        query_images=np.stack(qry_imgs),
        query_labels=np.asarray(qry_labels, dtype=np.int64),
        support_sample_ids=np.asarray(sup_ids, dtype=np.int64),
        query_sample_ids=np.asarray(qry_ids, dtype=np.int64),
        class_ids=np.asarray(class_ids, dtype=np.int64),
    )
