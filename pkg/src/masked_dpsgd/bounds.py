"""Numeric checks of the convergence bounds on quadratic objectives.

The objective is L(theta) = mean_i 0.5 * ||theta - x_i||^2, which is exactly
quadratic with unit Hessian, so the smoothness constant G is 1 and both the
minimizer (the mean of the points) and min L are known in closed form.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
import numpy.typing as npt

from masked_dpsgd.core_math import SeededRng, energy_retention, gaussian_vector, retained_count, topk_mask
from masked_dpsgd.data import BatchSampler
from masked_dpsgd.dp_optim import clip_per_sample
from masked_dpsgd.domain import BinaryMask
from masked_dpsgd.models import QuadraticModel

LOGGER = logging.getLogger("masked_dpsgd")

ABSOLUTE_SLACK = 1e-9
STATISTICAL_Z = 4.0


class BoundCheckError(AssertionError):
    def __init__(self, report: BoundReport) -> None:
        super().__init__(f"{report.name} bound violated: lhs={report.lhs!r} rhs={report.rhs!r} slack={report.slack!r}")
        self.report = report


@dataclass(frozen=True)
class BoundReport:
    name: str
    lhs: float
    rhs: float
    slack: float
    holds: bool
    details: dict[str, Any] = field(default_factory=dict)

    @property
    def margin(self) -> float:
        return self.rhs + self.slack - self.lhs

    def to_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload["margin"] = self.margin
        return payload

    def require(self) -> BoundReport:
        if not self.holds:
            raise BoundCheckError(self)
        return self


def _objective(points: npt.NDArray[np.float64], theta: npt.NDArray[np.float64]) -> float:
    diff = theta[None, :] - points
    return float(np.mean(0.5 * np.sum(diff * diff, axis=1)))


def check_clipped_sgd_bound(
    *,
    clip: float,
    lr: float,
    steps: int,
    sigma: float = 0.0,
    theta1: Sequence[float] = (1.0, 0.0),
    points: npt.ArrayLike | None = None,
    trials: int = 32,
    seed: int = 0,
) -> BoundReport:
    """Average <grad L, mean clipped gradient> against the smoothness bound for full-batch clipped SGD.

    The asserted right-hand side is (L(theta1) - min L) / (T * lr) + lr * G * (C^2 + d sigma^2 C^2 / B^2) / 2.
    The shorter form with lr * G * C^2 / (2T) is reported as `stated_rhs` but not asserted.
    """
    if clip <= 0 or lr <= 0 or steps < 1 or sigma < 0:
        raise ValueError("need clip > 0, lr > 0, steps >= 1, sigma >= 0")
    start = np.asarray(theta1, dtype=np.float64)
    d = start.size
    cloud = np.zeros((1, d)) if points is None else np.asarray(points, dtype=np.float64)
    model = QuadraticModel(d)
    batch = cloud.shape[0]
    labels = np.zeros(batch, dtype=np.int64)
    center = QuadraticModel.minimizer(cloud)
    smoothness = model.smoothness
    runs = trials if sigma > 0 else 1
    rng = SeededRng(seed)

    per_run: list[float] = []
    for _ in range(runs):
        theta = start.copy()
        inner_total = 0.0
        for _ in range(steps):
            _, grads = model.loss_and_grads(theta, cloud, labels)
            mean_clipped = clip_per_sample(grads, clip).sum(axis=0) / batch
            inner_total += float(np.dot(theta - center, mean_clipped))
            noise = gaussian_vector(rng, d, sigma * clip)
            theta = theta - lr * (mean_clipped + noise / batch)
        per_run.append(inner_total / steps)

    lhs = float(np.mean(per_run))
    stderr = float(np.std(per_run, ddof=1) / math.sqrt(runs)) if runs > 1 else 0.0
    loss_gap = _objective(cloud, start) - model.minimum_loss(cloud)
    noise_energy = d * sigma**2 * clip**2 / batch**2
    rhs = loss_gap / (steps * lr) + lr * smoothness * (clip**2 + noise_energy) / 2.0
    stated_rhs = loss_gap / (steps * lr) + lr * smoothness * clip**2 / (2.0 * steps)
    slack = ABSOLUTE_SLACK + STATISTICAL_Z * stderr
    report = BoundReport(
        name="clipped_sgd_inner_product",
        lhs=lhs,
        rhs=rhs,
        slack=slack,
        holds=lhs <= rhs + slack,
        details={
            "clip": clip,
            "lr": lr,
            "steps": steps,
            "sigma": sigma,
            "trials": runs,
            "loss_gap": loss_gap,
            "stated_rhs": stated_rhs,
            "stated_holds": lhs <= stated_rhs + slack,
        },
    )
    LOGGER.info("bound check: name=%s lhs=%.6g rhs=%.6g holds=%s", report.name, lhs, rhs, report.holds)
    return report


def masked_noisy_sgd_rhs(
    *,
    loss_gap: float,
    alpha_min: float,
    sigma_g2: float,
    batch_size: int,
    dim: int,
    sigma: float,
    steps: int,
    smoothness: float = 1.0,
) -> float:
    root = math.sqrt(steps)
    return 2.0 * smoothness * loss_gap / (alpha_min * root) + (sigma_g2 / batch_size + dim * sigma**2 / batch_size**2) / root


def _quadratic_cloud(rng: SeededRng, points: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    cloud = rng.standard_normal((points, dim))
    center = cloud.mean(axis=0)
    # unequal offsets so a top-k mask has a well-defined ranking
    theta1 = center + np.linspace(3.0, 0.3, dim)
    return cloud, theta1


def check_masked_noisy_sgd_bound(
    *,
    retention: float,
    sigma: float,
    batch_size: int = 16,
    steps: int = 400,
    dim: int = 10,
    points: int = 64,
    seed: int = 0,
) -> BoundReport:
    """Mean squared gradient norm of masked noisy SGD (lr = 1/(G sqrt T)) against its bound."""
    if sigma < 0 or steps < 1:
        raise ValueError("need sigma >= 0 and steps >= 1")
    rng = SeededRng(seed)
    cloud, theta = _quadratic_cloud(rng, points, dim)
    model = QuadraticModel(dim)
    smoothness = model.smoothness
    lr = 1.0 / (smoothness * math.sqrt(steps))
    center = QuadraticModel.minimizer(cloud)
    mask = topk_mask(theta - center, retained_count(retention, dim))
    sampler = BatchSampler(rng.derive(1), points, batch_size)
    noise_rng = rng.derive(2)
    labels = np.zeros(batch_size, dtype=np.int64)

    loss_gap = _objective(cloud, theta) - model.minimum_loss(cloud)
    squared_total = 0.0
    alpha_min = 1.0
    for _ in range(steps):
        full_grad = theta - center
        energy = float(np.dot(full_grad, full_grad))
        squared_total += energy
        if energy > 0:
            alpha_min = min(alpha_min, energy_retention(full_grad, mask))
        idx = sampler.sample()
        _, grads = model.loss_and_grads(theta, cloud[idx], labels)
        noise = gaussian_vector(noise_rng, dim, sigma)
        update = grads.sum(axis=0) / batch_size + noise / batch_size
        theta = theta - lr * mask.bits * update

    lhs = squared_total / steps
    deviations = cloud - center
    sigma_g2 = float(np.max(np.sum(deviations * deviations, axis=1)))
    rhs = masked_noisy_sgd_rhs(
        loss_gap=loss_gap,
        alpha_min=alpha_min,
        sigma_g2=sigma_g2,
        batch_size=batch_size,
        dim=dim,
        sigma=sigma,
        steps=steps,
        smoothness=smoothness,
    )
    report = BoundReport(
        name="masked_noisy_sgd_gradient_norm",
        lhs=lhs,
        rhs=rhs,
        slack=ABSOLUTE_SLACK,
        holds=lhs <= rhs + ABSOLUTE_SLACK,
        details={
            "retention": retention,
            "active": mask.ones_count,
            "sigma": sigma,
            "batch_size": batch_size,
            "steps": steps,
            "dim": dim,
            "lr": lr,
            "alpha_min": alpha_min,
            "sigma_g2": sigma_g2,
            "loss_gap": loss_gap,
        },
    )
    LOGGER.info("bound check: name=%s lhs=%.6g rhs=%.6g holds=%s", report.name, lhs, rhs, report.holds)
    return report


def masked_dpsgd_rhs(
    *,
    loss_drop: float,
    lr: float,
    clip: float,
    alpha: float,
    dim: int,
    sigma: float,
    batch_size: int,
    smoothness: float = 1.0,
) -> float:
    return loss_drop / lr + smoothness * lr / 2.0 * (clip**2 + alpha * dim * sigma**2 * clip**2 / batch_size)


def check_masked_dpsgd_bound(
    *,
    retention: float,
    sigma: float,
    clip: float = 1.0,
    lr: float = 0.05,
    batch_size: int = 16,
    steps: int = 200,
    dim: int = 10,
    points: int = 64,
    seed: int = 0,
) -> BoundReport:
    """Qualitative check for masked, clipped, noised SGD.

    Passes when the realized average inner product is finite and the
    per-step right-hand side grows with both sigma and d. The strict
    inequality on realized values is reported, not asserted.
    """
    if sigma < 0 or steps < 1 or clip <= 0 or lr <= 0:
        raise ValueError("need sigma >= 0, steps >= 1, clip > 0, lr > 0")
    rng = SeededRng(seed)
    cloud, theta = _quadratic_cloud(rng, points, dim)
    model = QuadraticModel(dim)
    center = QuadraticModel.minimizer(cloud)
    mask: BinaryMask = topk_mask(theta - center, retained_count(retention, dim))
    sampler = BatchSampler(rng.derive(1), points, batch_size)
    noise_rng = rng.derive(2)
    labels = np.zeros(batch_size, dtype=np.int64)

    start_loss = _objective(cloud, theta)
    inner_total = 0.0
    alpha_total = 0.0
    for _ in range(steps):
        full_grad = theta - center
        if np.any(full_grad != 0):
            alpha_total += energy_retention(full_grad, mask)
        idx = sampler.sample()
        _, grads = model.loss_and_grads(theta, cloud[idx], labels)
        clipped = clip_per_sample(grads * mask.bits, clip)
        noise = gaussian_vector(noise_rng, dim, sigma * clip)
        update = (clipped.sum(axis=0) + mask.bits * noise) / batch_size
        inner_total += float(np.dot(full_grad, update))
        theta = theta - lr * update

    lhs = inner_total / steps
    alpha_mean = alpha_total / steps
    loss_drop = (start_loss - _objective(cloud, theta)) / steps
    shared = {"loss_drop": loss_drop, "lr": lr, "clip": clip, "alpha": alpha_mean, "batch_size": batch_size}
    rhs = masked_dpsgd_rhs(dim=dim, sigma=sigma, **shared)
    rhs_more_noise = masked_dpsgd_rhs(dim=dim, sigma=sigma + 1.0, **shared)
    rhs_more_dims = masked_dpsgd_rhs(dim=2 * dim, sigma=sigma, **shared)
    monotone = rhs_more_noise >= rhs and rhs_more_dims >= rhs
    report = BoundReport(
        name="masked_clipped_dpsgd_qualitative",
        lhs=lhs,
        rhs=rhs,
        slack=ABSOLUTE_SLACK,
        holds=math.isfinite(lhs) and math.isfinite(rhs) and monotone,
        details={
            "retention": retention,
            "sigma": sigma,
            "clip": clip,
            "alpha_mean": alpha_mean,
            "rhs_sigma_plus_one": rhs_more_noise,
            "rhs_double_dim": rhs_more_dims,
            "strict_holds": lhs <= rhs + ABSOLUTE_SLACK,
        },
    )
    LOGGER.info("bound check: name=%s lhs=%.6g rhs=%.6g holds=%s", report.name, lhs, rhs, report.holds)
    return report


def default_bound_grid() -> list[BoundReport]:
    reports = [
        check_clipped_sgd_bound(clip=clip, lr=0.1, steps=100, sigma=sigma)
        for clip in (0.5, 1.0, 10.0)
        for sigma in (0.0, 0.5, 1.0)
    ]
    reports += [
        check_masked_noisy_sgd_bound(retention=retention, sigma=sigma)
        for retention in (0.3, 0.5, 1.0)
        for sigma in (0.0, 1.0, 2.0)
    ]
    reports += [check_masked_dpsgd_bound(retention=0.5, sigma=sigma) for sigma in (0.0, 1.0)]
    return reports
