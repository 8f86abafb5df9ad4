from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import numpy.typing as npt

from masked_dpsgd.core_math import SeededRng
from masked_dpsgd.domain import Dataset

LOGGER = logging.getLogger("masked_dpsgd")

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_IMAGE_SHAPE = (3, 32, 32)


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class IdxMagicError(IdxFormatError):
    """Unknown magic number."""


class IdxTruncatedError(IdxFormatError):
    """Header or payload ends early."""


class IdxDimensionError(IdxFormatError):
    """Declared dimensions do not describe the payload."""


class CifarFormatError(ValueError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SamplingError(ValueError):
    """Raised when a batch cannot be drawn from the dataset."""


@dataclass(frozen=True)
class IdxHeader:
    magic: int
    dims: tuple[int, ...]

    @property
    def byte_length(self) -> int:
        return 4 + 4 * len(self.dims)

    @property
    def payload_length(self) -> int:
        return math.prod(self.dims)

    @property
    def is_images(self) -> bool:
        return self.magic == IDX_IMAGES_MAGIC


@dataclass(frozen=True, eq=False)
class IdxData:
    header: IdxHeader
    values: np.ndarray


def parse_idx_header(payload: bytes) -> IdxHeader:
    if len(payload) < 4:
        raise IdxTruncatedError(f"header needs 4 magic bytes, got {len(payload)}", offset=len(payload))
    (magic,) = struct.unpack_from(">I", payload, 0)
    if magic == IDX_LABELS_MAGIC:
        ndim = 1
    elif magic == IDX_IMAGES_MAGIC:
        ndim = 3
    else:
        raise IdxMagicError(f"unsupported magic 0x{magic:08x}", offset=0)
    end = 4 + 4 * ndim
    if len(payload) < end:
        raise IdxTruncatedError(f"header declares {ndim} dimensions but ends early", offset=len(payload))
    dims = struct.unpack_from(f">{ndim}I", payload, 4)
    for position, size in enumerate(dims):
        if size < 1:
            raise IdxDimensionError(f"dimension {position} is zero", offset=4 + 4 * position)
    return IdxHeader(magic=magic, dims=tuple(int(size) for size in dims))


def parse_idx(payload: bytes) -> IdxData:
    """Decode an IDX file: images become N x (H*W) floats in [0, 1], labels become int64."""
    header = parse_idx_header(payload)
    start = header.byte_length
    expected = header.payload_length
    actual = len(payload) - start
    if actual < expected:
        raise IdxTruncatedError(
            f"payload holds {actual} bytes, dimensions {header.dims} need {expected}", offset=len(payload)
        )
    if actual > expected:
        raise IdxDimensionError(
            f"payload holds {actual} bytes, dimensions {header.dims} describe {expected}", offset=start + expected
        )
    raw = np.frombuffer(payload, dtype=np.uint8, count=expected, offset=start)
    if header.is_images:
        count, rows, cols = header.dims
        values: np.ndarray = raw.reshape(count, rows * cols).astype(np.float64) / 255.0
    else:
        values = raw.astype(np.int64)
    return IdxData(header=header, values=values)


def serialize_idx(data: IdxData) -> bytes:
    header = data.header
    if header.is_images:
        body = np.rint(np.asarray(data.values, dtype=np.float64) * 255.0)
    else:
        body = np.asarray(data.values)
    if body.size != header.payload_length:
        raise IdxDimensionError(
            f"values hold {body.size} entries, header describes {header.payload_length}", offset=header.byte_length
        )
    if body.size and (body.min() < 0 or body.max() > 255):
        raise IdxDimensionError("values fall outside the unsigned byte range", offset=header.byte_length)
    prefix = struct.pack(f">I{len(header.dims)}I", header.magic, *header.dims)
    return prefix + body.astype(np.uint8).tobytes()


def load_idx_dataset(
    images_path: str | Path, labels_path: str | Path, limit: int | None = None
) -> tuple[Dataset, tuple[int, ...]]:
    images = parse_idx(Path(images_path).read_bytes())
    labels = parse_idx(Path(labels_path).read_bytes())
    if not images.header.is_images:
        raise IdxMagicError(f"{images_path} is not an image file", offset=0)
    if labels.header.is_images:
        raise IdxMagicError(f"{labels_path} is not a label file", offset=0)
    if images.values.shape[0] != labels.values.shape[0]:
        raise IdxDimensionError(
            f"{images.values.shape[0]} images but {labels.values.shape[0]} labels", offset=4
        )
    features = images.values
    targets = labels.values
    if limit is not None:
        features = features[:limit]
        targets = targets[:limit]
    classes = max(10, int(targets.max()) + 1)
    _, rows, cols = images.header.dims
    LOGGER.info("idx dataset loaded: path=%s samples=%s shape=%sx%s", images_path, targets.size, rows, cols)
    return Dataset(features=features, labels=targets, classes=classes), (1, rows, cols)


def parse_cifar_batch(payload: bytes) -> Dataset:
    """Decode one CIFAR-10 binary batch: records of 1 label byte plus 3072 channel-major pixel bytes."""
    if not payload:
        raise CifarFormatError("empty batch", offset=0)
    if len(payload) % CIFAR_RECORD_BYTES:
        whole = len(payload) // CIFAR_RECORD_BYTES
        raise CifarFormatError(
            f"batch ends inside record {whole}", offset=whole * CIFAR_RECORD_BYTES
        )
    records = np.frombuffer(payload, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.flatnonzero(labels > 9)[0])
        raise CifarFormatError(f"label {labels[bad]} out of range", offset=bad * CIFAR_RECORD_BYTES)
    features = records[:, 1:].astype(np.float64) / 255.0
    return Dataset(features=features, labels=labels, classes=10)


def load_cifar_dataset(paths: Sequence[str | Path], limit: int | None = None) -> tuple[Dataset, tuple[int, ...]]:
    parts = [parse_cifar_batch(Path(path).read_bytes()) for path in paths]
    features = np.concatenate([part.features for part in parts])
    labels = np.concatenate([part.labels for part in parts])
    if limit is not None:
        features = features[:limit]
        labels = labels[:limit]
    return Dataset(features=features, labels=labels, classes=10), CIFAR_IMAGE_SHAPE


def synth_classification(seed: int, n: int, features: int, classes: int, margin: float) -> Dataset:
    """Unit-variance Gaussian blobs whose centers sit `margin` apart."""
    if n < 1 or features < 1 or classes < 1:
        raise ValueError("n, features and classes must all be >= 1")
    rng = SeededRng(seed)
    centers = np.zeros((classes, features))
    if classes <= features:
        centers[np.arange(classes), np.arange(classes)] = margin / math.sqrt(2.0)
    else:
        centers[:, 0] = margin * np.arange(classes)
    labels = (np.arange(n) % classes)[rng.permutation(n)]
    points = centers[labels] + rng.standard_normal((n, features))
    return Dataset(features=points, labels=labels.astype(np.int64), classes=classes)


def train_test_split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < fraction < 1:
        raise ValueError(f"test fraction must lie in (0, 1), got {fraction}")
    test_count = max(1, int(round(fraction * dataset.size)))
    if test_count >= dataset.size:
        raise ValueError(f"dataset of {dataset.size} samples is too small to split at fraction {fraction}")
    order = SeededRng(seed).permutation(dataset.size)
    return dataset.subset(order[test_count:]), dataset.subset(order[:test_count])


class BatchSampler:
    """Fixed-size uniform sampling without replacement; single owner of its stream."""

    def __init__(self, rng: SeededRng, dataset_size: int, batch_size: int) -> None:
        if batch_size < 1:
            raise SamplingError(f"batch size must be >= 1, got {batch_size}")
        if batch_size > dataset_size:
            raise SamplingError(f"batch size {batch_size} exceeds dataset size {dataset_size}")
        self.rng = rng
        self.dataset_size = dataset_size
        self.batch_size = batch_size

    @property
    def sampling_rate(self) -> float:
        return self.batch_size / self.dataset_size

    @property
    def epoch_steps(self) -> int:
        return math.ceil(self.dataset_size / self.batch_size)

    def sample(self) -> npt.NDArray[np.int64]:
        return self.rng.choice_without_replacement(self.dataset_size, self.batch_size)


def sample_batch(sampler: BatchSampler) -> npt.NDArray[np.int64]:
    return sampler.sample()


def label_histogram(labels: npt.NDArray[np.int64], classes: int) -> list[int]:
    return [int(count) for count in np.bincount(labels, minlength=classes)]
