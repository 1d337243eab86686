#!/usr/bin/env python3
"""
Synthetic shape dataset for desk-scale experiments

Four generators: horizontal bar, vertical bar, checkerboard region and a
centered disk. Every sample is a pure function of (seed, split, index), so
nothing has to be cached for reruns to agree bit for bit.
"""

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .utils import ConfigError, ensure_directory, get_logger

logger = get_logger(__name__)

CLASS_NAMES = ("horizontal-bar", "vertical-bar", "checkerboard", "centered-disk")
SPLITS = {"train": 0, "val": 1}

# Intensity ranges (background, foreground)
BACKGROUND_RANGE = (0.0, 0.15)
FOREGROUND_RANGE = (0.7, 1.0)
MAJORITY = 0.5


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    num_classes: int = 4
    image_size: int = 32
    channels: int = 1
    train_size: int = 2000
    val_size: int = 500
    noise_std: float = 0.05

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigError(
                f"dataset.num_classes must be in [1, {len(CLASS_NAMES)}], got {self.num_classes}"
            )
        if self.image_size < 8:
            raise ConfigError(f"dataset.image_size must be >= 8, got {self.image_size}")
        if self.channels < 1:
            raise ConfigError(f"dataset.channels must be >= 1, got {self.channels}")
        if self.train_size < 0 or self.val_size < 0:
            raise ConfigError("dataset split sizes must be >= 0")
        if self.noise_std < 0:
            raise ConfigError(f"dataset.noise_std must be >= 0, got {self.noise_std}")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping, prefix: str = "dataset") -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"Unknown config key: {prefix}.{key}")
        return cls(**dict(data))


class Sample(NamedTuple):
    image: np.ndarray  # [C, H, W] in [0, 1]
    label: int
    mask: np.ndarray  # [H, W] bool foreground


def _horizontal_bar(rng: np.random.Generator, size: int) -> np.ndarray:
    thickness = int(rng.integers(size // 4, size // 4 + max(1, size // 8)))
    top = int(rng.integers(0, size - thickness + 1))
    mask = np.zeros((size, size), dtype=bool)
    mask[top:top + thickness, :] = True
    return mask


def _vertical_bar(rng: np.random.Generator, size: int) -> np.ndarray:
    return _horizontal_bar(rng, size).T.copy()


def _checkerboard(rng: np.random.Generator, size: int) -> np.ndarray:
    side = size // 2
    cell = max(1, size // 8)
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    yy, xx = np.mgrid[0:side, 0:side]
    board = ((yy // cell) + (xx // cell)) % 2 == 0
    mask = np.zeros((size, size), dtype=bool)
    mask[top:top + side, left:left + side] = board
    return mask


def _centered_disk(rng: np.random.Generator, size: int) -> np.ndarray:
    jitter = size // 16
    r_min = int(round(0.34 * size))
    r_max = int(round(0.41 * size))
    radius = float(rng.integers(r_min, r_max + 1))
    cy = (size - 1) / 2.0 + float(rng.integers(-jitter, jitter + 1))
    cx = (size - 1) / 2.0 + float(rng.integers(-jitter, jitter + 1))
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


GENERATORS = (_horizontal_bar, _vertical_bar, _checkerboard, _centered_disk)


def token_labels(mask: np.ndarray, label: int, patch_size: int) -> np.ndarray:
    """
    Dense per-token labels for one sample

    A patch takes class label + 1 when at least half of its pixels are
    foreground, else 0 (background). Row-major over the patch grid.
    """
    size = mask.shape[0]
    if size % patch_size:
        raise ConfigError(f"patch_size {patch_size} does not divide image size {size}")
    grid = size // patch_size
    fraction = mask.reshape(grid, patch_size, grid, patch_size).mean(axis=(1, 3))
    return np.where(fraction >= MAJORITY, label + 1, 0).reshape(-1).astype(np.int64)


class SyntheticDataset:
    """Lazily generated train/val splits of the shape dataset"""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        self._cache: Dict[str, Dict[str, np.ndarray]] = {}

    def split_size(self, split: str) -> int:
        if split not in SPLITS:
            raise ConfigError(f"Unknown split {split!r}, expected one of {sorted(SPLITS)}")
        return self.spec.train_size if split == "train" else self.spec.val_size

    def sample(self, split: str, index: int) -> Sample:
        size = self.split_size(split)
        if not 0 <= index < size:
            raise IndexError(f"Index {index} outside {split} split of size {size}")

        spec = self.spec
        rng = np.random.default_rng([spec.seed, SPLITS[split], index])
        label = index % spec.num_classes
        mask = GENERATORS[label](rng, spec.image_size)

        background = rng.uniform(*BACKGROUND_RANGE)
        foreground = rng.uniform(*FOREGROUND_RANGE, size=spec.channels)
        image = np.where(mask[None, :, :], foreground[:, None, None], background)
        image = image + rng.normal(0.0, spec.noise_std, size=image.shape)
        return Sample(np.clip(image, 0.0, 1.0), label, mask)

    def _materialise(self, split: str) -> Dict[str, np.ndarray]:
        if split not in self._cache:
            n = self.split_size(split)
            spec = self.spec
            images = np.empty((n, spec.channels, spec.image_size, spec.image_size))
            labels = np.empty(n, dtype=np.int64)
            masks = np.empty((n, spec.image_size, spec.image_size), dtype=bool)
            for i in range(n):
                images[i], labels[i], masks[i] = self.sample(split, i)
            for arr in (images, labels, masks):
                arr.setflags(write=False)
            self._cache[split] = {"images": images, "labels": labels, "masks": masks}
            logger.debug(f"Generated {split} split: {n} samples")
        return self._cache[split]

    def images(self, split: str, count: Optional[int] = None) -> np.ndarray:
        return self._materialise(split)["images"][:count]

    def labels(self, split: str, count: Optional[int] = None) -> np.ndarray:
        return self._materialise(split)["labels"][:count]

    def masks(self, split: str, count: Optional[int] = None) -> np.ndarray:
        return self._materialise(split)["masks"][:count]

    def token_labels(self, split: str, patch_size: int, count: Optional[int] = None) -> np.ndarray:
        """[n, num_patches] dense labels in 0..num_classes"""
        masks = self.masks(split, count)
        labels = self.labels(split, count)
        return np.stack(
            [token_labels(m, int(lbl), patch_size) for m, lbl in zip(masks, labels)]
        ) if len(masks) else np.empty((0, (self.spec.image_size // patch_size) ** 2), dtype=np.int64)

    def class_counts(self, split: str) -> List[int]:
        return np.bincount(self.labels(split), minlength=self.spec.num_classes).tolist()

    def export(self, split: str, directory, patch_size: Optional[int] = None) -> List[Path]:
        """Write a split as TensorFiles (images, labels, masks, optional token labels)"""
        from .persistence import write_tensor

        out = ensure_directory(directory)
        arrays = {
            "images": self.images(split),
            "labels": self.labels(split).astype(np.float64),
            "masks": self.masks(split).astype(np.float64),
        }
        if patch_size is not None:
            arrays["tokens"] = self.token_labels(split, patch_size).astype(np.float64)
        written = []
        for name, arr in arrays.items():
            written.append(write_tensor(out / f"{split}.{name}.tns", arr))
        logger.info(f"Exported {split} split ({self.split_size(split)} samples) to {out}")
        return written


def generate_dataset(spec: DatasetSpec) -> SyntheticDataset:
    return SyntheticDataset(spec)


def select_eligible(predictions: Sequence[int], labels: Sequence[int]) -> np.ndarray:
    """Indices of correctly classified samples"""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    return np.flatnonzero(predictions == labels)
