"""Dataset ingestion: CIFAR-10/100 plus a deterministic synthetic stand-in.

Training splits get the standard crop-and-flip augmentation (configurable);
test splits are never augmented. Stratified subsampling keeps an exact
per-class fraction and is seeded, so repeated ingests are identical.

The synthetic dataset generates 32x32 RGB images procedurally per index
(oriented color gratings plus distractors and noise), so it needs no
download, has CIFAR-shaped splits, and is fully reproducible. It exists for
desk-scale runs in environments where CIFAR cannot be fetched.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from urllib.error import URLError

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset, Subset
from torchvision import datasets as tv_datasets
from torchvision import transforms

from .errors import ConfigError, DataError

DATA_DIR_ENV = "NFE_DATA_DIR"

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4866, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)

DATASET_NAMES = ("cifar10", "cifar100", "synthetic")


@dataclass(frozen=True)
class DatasetSpec:
    """Descriptor for a train/test image-classification source."""

    name: str = "cifar10"
    subsample: float = 1.0
    subsample_seed: int = 0
    augment: bool = True
    data_dir: str | None = None
    synthetic_train_size: int = 50000
    synthetic_test_size: int = 10000
    synthetic_noise: float = 1.0
    synthetic_classes: int = 10
    synthetic_seed: int = 0

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise ConfigError(f"dataset must be one of {DATASET_NAMES}, got {self.name!r}")
        if not 0.0 < self.subsample <= 1.0:
            raise ConfigError(f"subsample fraction must be in (0, 1], got {self.subsample}")
        if self.synthetic_classes < 2:
            raise ConfigError("synthetic_classes must be >= 2")

    @property
    def num_classes(self) -> int:
        if self.name == "synthetic":
            return self.synthetic_classes
        return {"cifar10": 10, "cifar100": 100}[self.name]

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


def resolve_data_dir(spec: DatasetSpec) -> Path:
    if spec.data_dir:
        return Path(spec.data_dir)
    return Path(os.environ.get(DATA_DIR_ENV, "./data"))


class SyntheticImages(Dataset):
    """Procedural 32x32 RGB classification images, generated per index.

    Class c fixes only the orientation and spatial frequency of a grating;
    every sample draws its own phase, amplitude, color tint, a distractor
    grating with a random orientation and tint, and pixel noise, so nothing
    but the grating geometry separates the classes. Labels cycle through
    classes, keeping counts balanced. Images are roughly unit-scale; no
    further normalization is applied.
    """

    def __init__(
        self,
        size: int,
        num_classes: int = 10,
        noise: float = 1.0,
        seed: int = 0,
        split: str = "train",
        transform=None,
    ):
        self.size = size
        self.num_classes = num_classes
        self.noise = noise
        self.seed = seed
        self.split_id = {"train": 0, "test": 1}[split]
        self.transform = transform
        g = np.mgrid[0:32, 0:32].astype(np.float64) / 32.0
        self._yy, self._xx = g[0], g[1]

    def __len__(self) -> int:
        return self.size

    def label_of(self, index: int) -> int:
        return index % self.num_classes

    @property
    def targets(self) -> list[int]:
        return [self.label_of(i) for i in range(self.size)]

    def _grating(self, angle: float, freq: float, phase: float) -> np.ndarray:
        return np.sin(
            2 * np.pi * freq * (np.cos(angle) * self._xx + np.sin(angle) * self._yy)
            + phase
        )

    def __getitem__(self, index: int):
        label = self.label_of(index)
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.split_id, index)
        )
        rng = np.random.default_rng(ss)
        angle = np.pi * label / self.num_classes
        freq = 2.0 + (label % 4)
        wave = self._grating(angle, freq, rng.uniform(0, 2 * np.pi))
        tint = rng.uniform(0.4, 1.0, size=3)
        img = rng.uniform(0.6, 1.0) * tint[:, None, None] * wave[None]

        d_wave = self._grating(
            rng.uniform(0, np.pi), float(rng.integers(1, 6)), rng.uniform(0, 2 * np.pi)
        )
        d_tint = rng.uniform(0.4, 1.0, size=3)
        img = img + 0.55 * d_tint[:, None, None] * d_wave[None]
        img = img + self.noise * rng.standard_normal((3, 32, 32))

        tensor = torch.from_numpy(img.astype(np.float32))
        if self.transform is not None:
            tensor = self.transform(tensor)
        return tensor, label


def dataset_labels(ds) -> np.ndarray:
    """Labels of a dataset without materializing images."""
    if isinstance(ds, Subset):
        base = dataset_labels(ds.dataset)
        return base[np.asarray(ds.indices)]
    if hasattr(ds, "targets"):
        return np.asarray(ds.targets)
    if isinstance(ds, torch.utils.data.TensorDataset):
        return ds.tensors[1].numpy()
    raise DataError(f"cannot extract labels from {type(ds).__name__}")


def stratified_indices(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Per-class index selection of exactly round(fraction * class count)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    picked = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = max(1, int(round(fraction * len(idx))))
        picked.append(rng.permutation(idx)[:k])
    return np.sort(np.concatenate(picked))


def _cifar_transforms(spec: DatasetSpec):
    mean, std = (CIFAR10_MEAN, CIFAR10_STD) if spec.name == "cifar10" else (
        CIFAR100_MEAN, CIFAR100_STD)
    test = transforms.Compose([transforms.ToTensor(), transforms.Normalize(mean, std)])
    if not spec.augment:
        return test, test
    train = transforms.Compose(
        [
            transforms.RandomCrop(32, padding=4),
            transforms.RandomHorizontalFlip(),
            transforms.ToTensor(),
            transforms.Normalize(mean, std),
        ]
    )
    return train, test


def _synthetic_transforms(spec: DatasetSpec):
    if not spec.augment:
        return None, None
    train = transforms.Compose(
        [transforms.RandomCrop(32, padding=4), transforms.RandomHorizontalFlip()]
    )
    return train, None


def ingest_dataset(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Build (train, test) datasets per the descriptor.

    CIFAR archives are downloaded into the cache dir with checksum
    verification when absent; a missing or corrupt archive raises DataError.
    Subsampling is stratified and seeded on both splits.
    """
    if spec.name in ("cifar10", "cifar100"):
        cls = tv_datasets.CIFAR10 if spec.name == "cifar10" else tv_datasets.CIFAR100
        root = str(resolve_data_dir(spec))
        train_tf, test_tf = _cifar_transforms(spec)
        try:
            train_ds = cls(root, train=True, download=True, transform=train_tf)
            test_ds = cls(root, train=False, download=True, transform=test_tf)
        except (URLError, OSError, RuntimeError) as exc:
            raise DataError(
                f"{spec.name} unavailable under {root!r} and could not be fetched "
                f"({exc}); point {DATA_DIR_ENV} at an existing copy or use the "
                "synthetic dataset"
            ) from exc
    else:
        train_tf, test_tf = _synthetic_transforms(spec)
        train_ds = SyntheticImages(
            spec.synthetic_train_size, spec.num_classes, spec.synthetic_noise,
            seed=spec.synthetic_seed, split="train", transform=train_tf,
        )
        test_ds = SyntheticImages(
            spec.synthetic_test_size, spec.num_classes, spec.synthetic_noise,
            seed=spec.synthetic_seed, split="test", transform=test_tf,
        )

    if spec.subsample < 1.0:
        train_idx = stratified_indices(
            dataset_labels(train_ds), spec.subsample, spec.subsample_seed
        )
        test_idx = stratified_indices(
            dataset_labels(test_ds), spec.subsample, spec.subsample_seed + 1
        )
        train_ds = Subset(train_ds, train_idx.tolist())
        test_ds = Subset(test_ds, test_idx.tolist())
    return train_ds, test_ds


def make_loader(
    ds: Dataset, batch_size: int, shuffle: bool, seed: int = 0
) -> DataLoader:
    """Single-worker loader; shuffling is driven by a seeded generator."""
    generator = torch.Generator().manual_seed(seed) if shuffle else None
    return DataLoader(
        ds, batch_size=batch_size, shuffle=shuffle, num_workers=0, generator=generator
    )
