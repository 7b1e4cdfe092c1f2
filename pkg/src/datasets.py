#!/usr/bin/env python3
"""
Dataset ingestion: CIFAR-10 binary batches, MNIST IDX files and seeded synthetic images.
"""
import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
from dotenv import load_dotenv
from torch.utils.data import DataLoader, TensorDataset

from .utils import FormatError, InputError, log, print_section_header

load_dotenv()

DATA_ROOT_ENV = "FAT_DATA_ROOT"

CIFAR10_RECORD_BYTES = 3073
CIFAR10_SHAPE = (3, 32, 32)
CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
MNIST_TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")

SOURCES = ("cifar10-binary", "mnist-idx", "synthetic")


@dataclass
class DatasetSpec:
    """
    Which data to load and how much of it.

    Attributes:
        source: cifar10-binary, mnist-idx or synthetic
        root: Directory holding the source files (falls back to $FAT_DATA_ROOT)
        subset_size: Class-balanced number of training examples
        test_size: Class-balanced number of test examples
        class_count: Number of classes K
        image_size: Side length of synthetic images
        channels: Channels of synthetic images
        seed: Seed for subset selection and synthetic generation
    """
    source: str = "synthetic"
    root: Optional[str] = None
    subset_size: int = 5000
    test_size: int = 1000
    class_count: int = 10
    image_size: int = 32
    channels: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.source not in SOURCES:
            raise InputError(f"Unknown dataset source '{self.source}', expected one of {SOURCES}")
        if self.class_count < 2:
            raise InputError(f"class_count must be >= 2, got {self.class_count}")
        if self.subset_size < self.class_count or self.test_size < self.class_count:
            raise InputError("subset_size and test_size must hold at least one example per class")

    def resolved_root(self) -> str:
        root = self.root or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise FileNotFoundError(f"No dataset root configured (set dataset.root or ${DATA_ROOT_ENV})")
        return os.path.expanduser(root)


@dataclass
class ImageDataset:
    """
    Images in [0, 1] with integer labels and stable example ids.

    Attributes:
        images: Float tensor [N, C, H, W]
        labels: Long tensor [N]
        ids: Long tensor [N]; row index into per-example buffers
        num_classes: Number of classes K
    """
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    ids: torch.Tensor = field(default=None)

    def __post_init__(self):
        if self.ids is None:
            self.ids = torch.arange(self.images.shape[0], dtype=torch.long)
        if self.images.shape[0] != self.labels.shape[0]:
            raise InputError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> List[int]:
        return torch.bincount(self.labels, minlength=self.num_classes).tolist()

    def loader(self, batch_size: int, seed: int = 0, shuffle: bool = True) -> DataLoader:
        """
        Batches of (x, y, ids); the order is a function of seed only.
        """
        generator = torch.Generator()
        generator.manual_seed(int(seed))
        return DataLoader(TensorDataset(self.images, self.labels, self.ids),
                          batch_size=batch_size, shuffle=shuffle, generator=generator)

    def subset(self, indices) -> "ImageDataset":
        """Rows at indices; ids are renumbered from 0."""
        index = torch.as_tensor(indices, dtype=torch.long)
        return ImageDataset(self.images[index], self.labels[index], self.num_classes)

    def head(self, n: int) -> "ImageDataset":
        """A class-balanced subset of about n rows (deterministic)."""
        if n >= len(self):
            return self
        return self.subset(balanced_indices(self.labels.numpy(), self.num_classes, n, seed=0))

    def with_images(self, images: torch.Tensor) -> "ImageDataset":
        """Same labels and ids, replaced images."""
        return ImageDataset(images, self.labels.clone(), self.num_classes, self.ids.clone())


def balanced_indices(labels: np.ndarray, num_classes: int, total: int, seed: int) -> np.ndarray:
    """
    Picks total // num_classes indices per class from a seeded permutation.

    Raises:
        InputError: If a class has fewer examples than required
    """
    per_class = total // num_classes
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in range(num_classes):
        members = np.flatnonzero(labels == cls)
        if len(members) < per_class:
            raise InputError(f"Class {cls} has {len(members)} examples, {per_class} requested")
        chosen.append(np.sort(rng.permutation(members)[:per_class]))
    return np.sort(np.concatenate(chosen))


class BinaryDatasetReader:
    """
    Parses CIFAR-10 binary batches and MNIST IDX files.

    Attributes:
        total_records: Count of parsed records
        total_bytes: Count of parsed bytes
        total_files: Count of parsed files
    """

    def __init__(self):
        self.total_records = 0
        self.total_bytes = 0
        self.total_files = 0

    def read_cifar10_batch(self, file_path: str) -> Tuple[np.ndarray, np.ndarray]:
        """
        Reads one CIFAR-10 binary batch (1 label byte + 3072 pixel bytes per record).

        Returns:
            Tuple of (uint8 images [n, 3, 32, 32], uint8 labels [n])

        Raises:
            FormatError: If the file is not a whole number of records or a label exceeds 9
        """
        with open(file_path, "rb") as f_in:
            raw = f_in.read()
        if len(raw) == 0 or len(raw) % CIFAR10_RECORD_BYTES != 0:
            whole = len(raw) - len(raw) % CIFAR10_RECORD_BYTES
            raise FormatError(f"Length {len(raw)} is not a multiple of {CIFAR10_RECORD_BYTES}-byte records",
                              file_path, whole)
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR10_RECORD_BYTES)
        labels = records[:, 0].copy()
        bad = np.flatnonzero(labels > 9)
        if bad.size:
            raise FormatError(f"Label {labels[bad[0]]} out of range", file_path,
                              int(bad[0]) * CIFAR10_RECORD_BYTES)
        images = records[:, 1:].reshape(-1, *CIFAR10_SHAPE).copy()
        self._count(file_path, len(labels), len(raw))
        return images, labels

    def read_idx(self, file_path: str, expected_magic: int) -> np.ndarray:
        """
        Reads an IDX file (big-endian magic, big-endian uint32 dimensions, uint8 data).

        Raises:
            FormatError: On a wrong magic, truncated header or truncated data
        """
        with open(file_path, "rb") as f_in:
            raw = f_in.read()
        if len(raw) < 4:
            raise FormatError(f"Incomplete IDX magic ({len(raw)} bytes)", file_path, 0)
        magic = int.from_bytes(raw[0:4], "big")
        if magic != expected_magic:
            raise FormatError(f"Bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", file_path, 0)
        ndim = raw[3]
        header_end = 4 + 4 * ndim
        if len(raw) < header_end:
            raise FormatError(f"Truncated IDX header ({len(raw)} bytes)", file_path, 4)
        dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
        count = int(np.prod(dims))
        if len(raw) - header_end != count:
            raise FormatError(f"IDX data length {len(raw) - header_end} does not match dims {dims}",
                              file_path, header_end)
        self._count(file_path, dims[0], len(raw))
        return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims).copy()

    def _count(self, file_path: str, records: int, size: int) -> None:
        self.total_records += records
        self.total_bytes += size
        self.total_files += 1
        log.info(f"Parsed {os.path.basename(file_path)} ({records} records, {size / 1024:.1f} KiB)")

    def log_summary(self) -> None:
        log.info(f"Files parsed: {self.total_files}")
        log.info(f"Records parsed: {self.total_records}")
        log.info(f"Bytes parsed: {self.total_bytes / (1024 * 1024):.2f} MiB")


def _load_cifar10(root: str, reader: BinaryDatasetReader):
    base = os.path.join(root, "cifar-10-batches-bin") if os.path.isdir(os.path.join(root, "cifar-10-batches-bin")) else root

    def read(files):
        parts = [reader.read_cifar10_batch(os.path.join(base, name)) for name in files]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    return read(CIFAR10_TRAIN_FILES), read(CIFAR10_TEST_FILES)


def _load_mnist(root: str, reader: BinaryDatasetReader):
    def read(files):
        images = reader.read_idx(os.path.join(root, files[0]), IDX_IMAGES_MAGIC)
        labels = reader.read_idx(os.path.join(root, files[1]), IDX_LABELS_MAGIC)
        if images.shape[0] != labels.shape[0]:
            raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", os.path.join(root, files[1]), 8)
        return images[:, None, :, :], labels

    return read(MNIST_TRAIN_FILES), read(MNIST_TEST_FILES)


def make_synthetic(spec: DatasetSpec, count: int, seed: int) -> ImageDataset:
    """
    Gaussian-blob images: each class has a smooth mean image, examples add pixel noise.

    The class means depend on spec.seed only, so train and test splits share them.
    """
    means_gen = torch.Generator()
    means_gen.manual_seed(int(spec.seed))
    coarse = torch.rand(spec.class_count, spec.channels, 4, 4, generator=means_gen)
    means = torch.nn.functional.interpolate(coarse, size=(spec.image_size, spec.image_size),
                                            mode="bilinear", align_corners=False)
    means = 0.2 + 0.6 * means

    per_class = count // spec.class_count
    labels = torch.arange(spec.class_count).repeat_interleave(per_class)
    noise_gen = torch.Generator()
    noise_gen.manual_seed(int(seed))
    noise = 0.15 * torch.randn(labels.shape[0], spec.channels, spec.image_size, spec.image_size,
                               generator=noise_gen)
    images = torch.clamp(means[labels] + noise, 0.0, 1.0)
    return ImageDataset(images, labels, spec.class_count)


def load_dataset(spec: DatasetSpec) -> Tuple[ImageDataset, ImageDataset]:
    """
    Loads the train and test splits described by spec, class-balanced and seeded.

    Returns:
        Tuple of (train, test)

    Raises:
        FileNotFoundError: If a source file is missing
        FormatError: If a source file is malformed
        InputError: If the spec is invalid
    """
    spec.validate()
    print_section_header(f"Loading dataset ({spec.source})")
    if spec.source == "synthetic":
        train = make_synthetic(spec, spec.subset_size, seed=spec.seed * 2 + 1)
        test = make_synthetic(spec, spec.test_size, seed=spec.seed * 2 + 2)
        log.info(f"Synthetic dataset: {len(train)} train / {len(test)} test, K={spec.class_count}")
        return train, test

    root = spec.resolved_root()
    reader = BinaryDatasetReader()
    if spec.source == "cifar10-binary":
        (train_x, train_y), (test_x, test_y) = _load_cifar10(root, reader)
    else:
        (train_x, train_y), (test_x, test_y) = _load_mnist(root, reader)
    reader.log_summary()

    num_classes = spec.class_count
    keep_train = balanced_indices(train_y, num_classes, spec.subset_size, spec.seed)
    keep_test = balanced_indices(test_y, num_classes, spec.test_size, spec.seed + 1)

    def to_dataset(images: np.ndarray, labels: np.ndarray, keep: np.ndarray) -> ImageDataset:
        x = torch.from_numpy(images[keep].astype(np.float32) / 255.0)
        y = torch.from_numpy(labels[keep].astype(np.int64))
        return ImageDataset(x, y, num_classes)

    train = to_dataset(train_x, train_y, keep_train)
    test = to_dataset(test_x, test_y, keep_test)
    log.info(f"Subset: {len(train)} train / {len(test)} test, class counts {train.class_counts()}")
    return train, test
