from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

# Flat d-dimensional parameter or gradient vector.
ParamVector = npt.NDArray[np.float64]
# B rows, each a ParamVector of the same length.
GradBatch = npt.NDArray[np.float64]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: npt.NDArray[np.float64]
    ones_count: int

    def __post_init__(self) -> None:
        if self.bits.ndim != 1 or self.bits.size < 1:
            raise ValueError("mask bits must be a non-empty 1-d array")
        if int(np.count_nonzero(self.bits)) != self.ones_count:
            raise ValueError(
                f"ones_count={self.ones_count} does not match bits ({int(np.count_nonzero(self.bits))} ones)"
            )

    @property
    def size(self) -> int:
        return int(self.bits.size)

    @property
    def active(self) -> npt.NDArray[np.bool_]:
        return self.bits != 0.0

    def indices(self) -> npt.NDArray[np.int64]:
        return np.flatnonzero(self.bits).astype(np.int64)

    @classmethod
    def from_indices(cls, d: int, indices: npt.ArrayLike) -> BinaryMask:
        bits = np.zeros(d, dtype=np.float64)
        bits[np.asarray(indices, dtype=np.int64)] = 1.0
        return cls(bits=bits, ones_count=int(np.count_nonzero(bits)))

    @classmethod
    def all_ones(cls, d: int) -> BinaryMask:
        return cls(bits=np.ones(d, dtype=np.float64), ones_count=d)


@dataclass(frozen=True, eq=False)
class Dataset:
    features: npt.NDArray[np.float64]
    labels: npt.NDArray[np.int64]
    classes: int

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise ValueError("features must be an N x F matrix")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("labels must have one entry per feature row")
        if self.features.shape[0] < 1:
            raise ValueError("dataset must hold at least one sample")
        if self.classes < 1:
            raise ValueError("classes must be >= 1")
        if self.labels.size and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.classes):
            raise ValueError(f"every label must lie in [0, {self.classes})")

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_count(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: npt.ArrayLike) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(features=self.features[idx], labels=self.labels[idx], classes=self.classes)
