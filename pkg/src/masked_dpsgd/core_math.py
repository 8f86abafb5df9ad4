from __future__ import annotations

import numpy as np
import numpy.typing as npt

from masked_dpsgd.domain import BinaryMask, GradBatch, ParamVector


class MathDomainError(ValueError):
    """Raised when a vector primitive receives input outside its domain."""


class SeededRng:
    """Single-owner seeded stream; never share one instance across concurrent tasks."""

    def __init__(self, seed: int) -> None:
        if not isinstance(seed, (int, np.integer)) or seed < 0 or seed >= 2**64:
            raise MathDomainError(f"seed must be a 64-bit unsigned integer, got {seed!r}")
        self.seed = int(seed)
        self.draws = 0
        self._generator = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, stream: int) -> SeededRng:
        """Independent child stream keyed by (seed, stream); does not advance this stream."""
        state = np.random.SeedSequence([self.seed, stream]).generate_state(1, dtype=np.uint64)[0]
        return SeededRng(int(state))

    def standard_normal(self, size: int | tuple[int, ...]) -> npt.NDArray[np.float64]:
        self.draws += 1
        return self._generator.standard_normal(size)

    def choice_without_replacement(self, population: int, count: int) -> npt.NDArray[np.int64]:
        self.draws += 1
        return self._generator.choice(population, size=count, replace=False).astype(np.int64)

    def permutation(self, population: int) -> npt.NDArray[np.int64]:
        self.draws += 1
        return self._generator.permutation(population).astype(np.int64)

    def uniform(self, low: float, high: float, size: int | tuple[int, ...]) -> npt.NDArray[np.float64]:
        self.draws += 1
        return self._generator.uniform(low, high, size=size)


def as_vector(values: npt.ArrayLike, name: str = "vector") -> ParamVector:
    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1 or vector.size < 1:
        raise MathDomainError(f"{name} must be a non-empty 1-d vector")
    if not np.all(np.isfinite(vector)):
        bad = int(np.flatnonzero(~np.isfinite(vector))[0])
        raise MathDomainError(f"{name} has a non-finite entry at index {bad}")
    return vector


def l2_norm(v: npt.ArrayLike) -> float:
    vector = as_vector(v)
    return float(row_norms(vector[None, :])[0])


def row_norms(batch: GradBatch) -> npt.NDArray[np.float64]:
    """Euclidean norm of every row; rows whose squares overflow are rescaled by their largest entry."""
    values = np.asarray(batch, dtype=np.float64)
    with np.errstate(over="ignore"):
        norms = np.sqrt(np.sum(values * values, axis=1))
    overflowed = np.isinf(norms) & np.all(np.isfinite(values), axis=1)
    if np.any(overflowed):
        rows = values[overflowed]
        scale = np.max(np.abs(rows), axis=1)
        with np.errstate(over="ignore"):
            norms[overflowed] = scale * np.sqrt(np.sum((rows / scale[:, None]) ** 2, axis=1))
    return norms


def topk_mask(v: npt.ArrayLike, k: int) -> BinaryMask:
    vector = as_vector(v)
    d = vector.size
    if not isinstance(k, (int, np.integer)) or k < 1 or k > d:
        raise MathDomainError(f"k must be in [1, {d}], got {k!r}")
    # stable sort keeps the lower index first among equal magnitudes
    order = np.argsort(-np.abs(vector), kind="stable")
    return BinaryMask.from_indices(d, order[:k])


def retained_count(r: float, d: int) -> int:
    return max(1, int(np.floor(r * d)))


def energy_retention(v: npt.ArrayLike, m: BinaryMask) -> float:
    vector = as_vector(v)
    _check_lengths(m, vector)
    squares = vector * vector
    total = np.sum(squares)
    if total == 0.0:
        raise MathDomainError("energy retention is undefined for the zero vector")
    return float(np.sum(squares[m.active]) / total)


def masked_apply(m: BinaryMask, v: npt.ArrayLike) -> ParamVector:
    vector = np.asarray(v, dtype=np.float64)
    _check_lengths(m, vector)
    return m.bits * vector


def gaussian_vector(rng: SeededRng, d: int, std: float) -> ParamVector:
    if d < 1:
        raise MathDomainError(f"d must be >= 1, got {d}")
    if not np.isfinite(std) or std < 0:
        raise MathDomainError(f"std must be a finite value >= 0, got {std}")
    if std == 0:
        return np.zeros(d, dtype=np.float64)
    return std * rng.standard_normal(d)


def _check_lengths(m: BinaryMask, vector: np.ndarray) -> None:
    if vector.shape[-1] != m.size:
        raise MathDomainError(f"length mismatch: mask has {m.size} entries, vector has {vector.shape[-1]}")
