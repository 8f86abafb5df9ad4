"""Private optimizers: importance-masked adaptive clipping and the plain DP-SGD baseline.

Every step consumes one ledger step per noisy aggregation. Per-sample
gradients are produced in chunks of `chunk_size` rows and reduced in a fixed
chunk order, so seeded runs are bit-reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import numpy.typing as npt

from masked_dpsgd.core_math import SeededRng, as_vector, gaussian_vector, masked_apply, retained_count, row_norms
from masked_dpsgd.domain import BinaryMask, GradBatch, ParamVector
from masked_dpsgd.models import Model, per_sample_grads
from masked_dpsgd.privacy import PrivacyLedger

LOGGER = logging.getLogger("masked_dpsgd")

SCHEDULE_MODES = ("fixed", "linear")
NORM_SLACK = 1e-9


class OptimizerError(ValueError):
    """Raised when an optimizer contract is breached."""


@dataclass(frozen=True, eq=False)
class ImportanceState:
    scores: ParamVector
    steps_accumulated: int = 0
    finalized: bool = False
    sorted_order: npt.NDArray[np.int64] | None = None
    retention: float = 1.0
    mask: BinaryMask | None = None

    @property
    def size(self) -> int:
        return int(self.scores.size)


@dataclass(frozen=True, eq=False)
class ClipState:
    alpha: ParamVector
    beta: ParamVector
    mu: float
    gamma1: float
    gamma2: float
    clip: float
    sigma: float

    def __post_init__(self) -> None:
        if self.alpha.shape != self.beta.shape or self.alpha.ndim != 1:
            raise OptimizerError("alpha and beta must be 1-d vectors of equal length")
        if np.any(self.beta < 0):
            raise OptimizerError("beta must be >= 0 in every coordinate")
        if not self.mu > 0:
            raise OptimizerError(f"mu must be > 0, got {self.mu}")
        for name, value in (("gamma1", self.gamma1), ("gamma2", self.gamma2)):
            if not 0 <= value <= 1:
                raise OptimizerError(f"{name} must lie in [0, 1], got {value}")
        if not self.clip > 0:
            raise OptimizerError(f"clip bound must be > 0, got {self.clip}")
        if not self.sigma >= 0:
            raise OptimizerError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class UnfreezeSchedule:
    mode: str
    r0: float
    total_steps: int

    def __post_init__(self) -> None:
        if self.mode not in SCHEDULE_MODES:
            raise OptimizerError(f"schedule mode must be one of {', '.join(SCHEDULE_MODES)}, got {self.mode!r}")
        if not 0 < self.r0 <= 1:
            raise OptimizerError(f"initial retention must lie in (0, 1], got {self.r0}")
        if self.total_steps < 1:
            raise OptimizerError("schedule needs total_steps >= 1")


def new_importance_state(d: int) -> ImportanceState:
    return ImportanceState(scores=np.zeros(d, dtype=np.float64))


def importance_accumulate(state: ImportanceState, g_t: npt.ArrayLike) -> ImportanceState:
    grad = as_vector(g_t, "gradient")
    if grad.size != state.size:
        raise OptimizerError(f"gradient has {grad.size} entries, scores have {state.size}")
    if state.finalized:
        raise OptimizerError("scores are already finalized")
    return replace(state, scores=state.scores + np.abs(grad), steps_accumulated=state.steps_accumulated + 1)


def finalize_scores(state: ImportanceState) -> ImportanceState:
    if state.steps_accumulated < 1:
        raise OptimizerError("cannot finalize importance scores without any accumulated step")
    scores = state.scores / state.steps_accumulated
    order = np.argsort(-scores, kind="stable").astype(np.int64)
    return replace(state, scores=scores, finalized=True, sorted_order=order)


def uniform_importance(d: int) -> ImportanceState:
    """Finalized state with equal scores; only meaningful with full retention."""
    return replace(
        new_importance_state(d),
        finalized=True,
        sorted_order=np.arange(d, dtype=np.int64),
        mask=BinaryMask.all_ones(d),
    )


def build_mask(state: ImportanceState, r: float) -> BinaryMask:
    if not state.finalized or state.sorted_order is None:
        raise OptimizerError("importance scores must be finalized before building a mask")
    if not 0 < r <= 1:
        raise OptimizerError(f"retention must lie in (0, 1], got {r}")
    k = retained_count(r, state.size)
    return BinaryMask.from_indices(state.size, state.sorted_order[:k])


def refresh_mask(state: ImportanceState, r: float) -> ImportanceState:
    return replace(state, retention=r, mask=build_mask(state, r))


def retention_at(schedule: UnfreezeSchedule, t: int) -> float:
    if t < 0 or t > schedule.total_steps:
        raise OptimizerError(f"step t={t} outside [0, {schedule.total_steps}]")
    if schedule.mode == "fixed":
        return schedule.r0
    return schedule.r0 + (1.0 - schedule.r0) * t / schedule.total_steps


def new_clip_state(
    d: int,
    *,
    clip: float,
    sigma: float,
    mu: float = 1e-6,
    gamma1: float = 0.9,
    gamma2: float = 0.999,
    alpha0: float = 0.0,
    beta0: float = 1.0,
) -> ClipState:
    return ClipState(
        alpha=np.full(d, alpha0, dtype=np.float64),
        beta=np.full(d, beta0, dtype=np.float64),
        mu=mu,
        gamma1=gamma1,
        gamma2=gamma2,
        clip=clip,
        sigma=sigma,
    )


def standardize(g: npt.ArrayLike, cs: ClipState) -> npt.NDArray[np.float64]:
    values = np.asarray(g, dtype=np.float64)
    _check_width(values, cs.alpha.size)
    return (values - cs.alpha) / (np.sqrt(cs.beta) + cs.mu)


def restore(g_std: npt.ArrayLike, cs: ClipState) -> npt.NDArray[np.float64]:
    values = np.asarray(g_std, dtype=np.float64)
    _check_width(values, cs.alpha.size)
    return values * (np.sqrt(cs.beta) + cs.mu) + cs.alpha


def clip_per_sample(g: npt.ArrayLike, clip: float) -> npt.NDArray[np.float64]:
    """Rescale each row (or the single vector) to norm at most `clip`; rows inside the ball pass unchanged."""
    if not clip > 0:
        raise OptimizerError(f"clip bound must be > 0, got {clip}")
    values = np.asarray(g, dtype=np.float64)
    if values.ndim == 1:
        return values / max(1.0, float(row_norms(values[None, :])[0]) / clip)
    return values / np.maximum(1.0, row_norms(values) / clip)[:, None]


def clipped_sum(batch: GradBatch, clip: float) -> ParamVector:
    return clip_per_sample(batch, clip).sum(axis=0)


def noisy_aggregate(batch: GradBatch, mask: BinaryMask, cs: ClipState, rng: SeededRng, batch_size: int) -> ParamVector:
    rows = np.asarray(batch, dtype=np.float64)
    _check_rows(rows, mask, cs.clip)
    return _noise_and_average(rows.sum(axis=0), mask, cs, rng, batch_size)


def ema_update(cs: ClipState, g_hat: npt.ArrayLike, active: npt.NDArray[np.bool_] | None = None) -> ClipState:
    update = np.asarray(g_hat, dtype=np.float64)
    _check_width(update, cs.alpha.size)
    alpha = cs.gamma1 * cs.alpha + (1.0 - cs.gamma1) * update
    # the variance update reads the pre-update mean
    deviation = update - cs.alpha
    beta = cs.gamma2 * cs.beta + (1.0 - cs.gamma2) * deviation * deviation
    if active is not None:
        alpha = np.where(active, alpha, cs.alpha)
        beta = np.where(active, beta, cs.beta)
    return replace(cs, alpha=alpha, beta=beta)


def sgd_step(
    model: Model,
    params: ParamVector,
    features: npt.NDArray[np.float64],
    labels: npt.NDArray[np.int64],
    lr: float,
    *,
    chunk_size: int = 128,
) -> ParamVector:
    total = _chunked_sum(model, params, features, labels, chunk_size, lambda rows: rows)
    return params - lr * (total / features.shape[0])


def dpsgd_step(
    model: Model,
    params: ParamVector,
    features: npt.NDArray[np.float64],
    labels: npt.NDArray[np.int64],
    cs: ClipState,
    rng: SeededRng,
    lr: float,
    *,
    ledger: PrivacyLedger | None = None,
    chunk_size: int = 128,
) -> ParamVector:
    update = private_gradient(model, params, features, labels, cs, rng, ledger=ledger, chunk_size=chunk_size)
    return params - lr * update


def private_gradient(
    model: Model,
    params: ParamVector,
    features: npt.NDArray[np.float64],
    labels: npt.NDArray[np.int64],
    cs: ClipState,
    rng: SeededRng,
    *,
    ledger: PrivacyLedger | None = None,
    chunk_size: int = 128,
) -> ParamVector:
    """Clipped, noised batch-mean gradient with unmasked noise; one ledger step."""
    mask = BinaryMask.all_ones(params.size)

    def transform(rows: GradBatch) -> GradBatch:
        clipped = clip_per_sample(rows, cs.clip)
        _check_rows(clipped, mask, cs.clip)
        return clipped

    total = _chunked_sum(model, params, features, labels, chunk_size, transform)
    aggregate = _noise_and_average(total, mask, cs, rng, features.shape[0])
    if ledger is not None:
        ledger.step()
    return aggregate


def adadpigu_step(
    model: Model,
    params: ParamVector,
    features: npt.NDArray[np.float64],
    labels: npt.NDArray[np.int64],
    state: ImportanceState,
    cs: ClipState,
    schedule: UnfreezeSchedule,
    rng: SeededRng,
    lr: float,
    t: int,
    *,
    ledger: PrivacyLedger | None = None,
    heuristic_topk: bool = False,
    chunk_size: int = 128,
) -> tuple[ParamVector, ClipState, ImportanceState]:
    r_t = retention_at(schedule, t)
    d = params.size
    if heuristic_topk:
        # per-sample pruning replaces the fixed mask
        if state.mask is None or state.mask.ones_count != d:
            state = replace(state, mask=BinaryMask.all_ones(d))
        state = replace(state, retention=r_t)
    elif state.mask is None or r_t != state.retention:
        state = refresh_mask(state, r_t)
    mask = state.mask
    assert mask is not None
    keep = retained_count(r_t, d)

    def transform(rows: GradBatch) -> GradBatch:
        masked = masked_apply(mask, rows)
        scaled = masked_apply(mask, standardize(masked, cs))
        if heuristic_topk:
            scaled = _rowwise_topk(scaled, keep)
        clipped = clip_per_sample(scaled, cs.clip)
        _check_rows(clipped, mask, cs.clip)
        return clipped

    total = _chunked_sum(model, params, features, labels, chunk_size, transform)
    noisy = _noise_and_average(total, mask, cs, rng, features.shape[0])
    if ledger is not None:
        ledger.step()
    g_hat = masked_apply(mask, restore(noisy, cs))
    new_params = params - lr * g_hat
    new_cs = ema_update(cs, g_hat, active=mask.active)
    return new_params, new_cs, state


def pretrain_importance(
    model: Model,
    params: ParamVector,
    draw_batch: Callable[[], tuple[npt.NDArray[np.float64], npt.NDArray[np.int64]]],
    cs: ClipState,
    rng: SeededRng,
    lr: float,
    steps: int,
    *,
    ledger: PrivacyLedger | None = None,
    chunk_size: int = 128,
) -> tuple[ParamVector, ImportanceState]:
    """Run `steps` DP-SGD steps and score each coordinate by its mean absolute privatized gradient."""
    if steps < 1:
        raise OptimizerError("importance pretraining needs at least one step")
    state = new_importance_state(params.size)
    for _ in range(steps):
        features, labels = draw_batch()
        update = private_gradient(model, params, features, labels, cs, rng, ledger=ledger, chunk_size=chunk_size)
        params = params - lr * update
        state = importance_accumulate(state, update)
    state = finalize_scores(state)
    LOGGER.info(
        "importance pretraining complete: steps=%s max_score=%.6g min_score=%.6g",
        steps,
        float(state.scores.max()),
        float(state.scores.min()),
    )
    return params, state


def _chunked_sum(
    model: Model,
    params: ParamVector,
    features: npt.NDArray[np.float64],
    labels: npt.NDArray[np.int64],
    chunk_size: int,
    transform: Callable[[GradBatch], GradBatch],
) -> ParamVector:
    if chunk_size < 1:
        raise OptimizerError("chunk_size must be >= 1")
    batch = features.shape[0]
    if batch < 1:
        raise OptimizerError("batch must hold at least one sample")
    total = np.zeros(params.size, dtype=np.float64)
    for start in range(0, batch, chunk_size):
        stop = start + chunk_size
        rows = per_sample_grads(model, params, features[start:stop], labels[start:stop])
        total += transform(rows).sum(axis=0)
    return total


def _noise_and_average(total: ParamVector, mask: BinaryMask, cs: ClipState, rng: SeededRng, batch_size: int) -> ParamVector:
    if batch_size < 1:
        raise OptimizerError("batch_size must be >= 1")
    # noise is drawn for every coordinate so masked and unmasked runs consume the stream alike
    noise = gaussian_vector(rng, total.size, cs.sigma * cs.clip)
    return (total + masked_apply(mask, noise)) / batch_size


def _rowwise_topk(rows: GradBatch, keep: int) -> GradBatch:
    order = np.argsort(-np.abs(rows), axis=1, kind="stable")[:, :keep]
    selected = np.zeros(rows.shape, dtype=bool)
    np.put_along_axis(selected, order, True, axis=1)
    return np.where(selected, rows, 0.0)


def _check_rows(rows: GradBatch, mask: BinaryMask, clip: float) -> None:
    if rows.ndim != 2 or rows.shape[1] != mask.size:
        raise OptimizerError(f"expected rows of width {mask.size}, got shape {rows.shape}")
    norms = row_norms(rows)
    if np.any(norms > clip * (1.0 + NORM_SLACK)):
        bad = int(np.flatnonzero(norms > clip * (1.0 + NORM_SLACK))[0])
        raise OptimizerError(f"row {bad} has norm {norms[bad]:.6g} above clip bound {clip}")
    if mask.ones_count < mask.size and np.any(rows[:, ~mask.active] != 0.0):
        raise OptimizerError("rows carry non-zero entries outside the mask")


def _check_width(values: np.ndarray, d: int) -> None:
    if values.shape[-1] != d:
        raise OptimizerError(f"length mismatch: expected {d} coordinates, got {values.shape[-1]}")
