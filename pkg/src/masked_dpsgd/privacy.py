from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable

from masked_dpsgd.domain import BinaryMask

LOGGER = logging.getLogger("masked_dpsgd")

DEFAULT_ORDERS: tuple[float, ...] = (1.25, 1.5) + tuple(float(order) for order in range(2, 257))
AGREEMENT_TOLERANCE = 0.05

# Published noise multipliers keyed by dataset and target epsilon. They are
# configuration presets, not outputs of the accountants below.
NOISE_PRESETS: dict[str, dict[int, float]] = {
    "mnist": {2: 4.64, 4: 2.49, 6: 1.79, 8: 1.45, 10: 1.25, 12: 1.12},
    "cifar10": {2: 3.62, 4: 1.98, 6: 1.45, 8: 1.2, 10: 1.05, 12: 0.95},
}


class PrivacyParameterError(ValueError):
    """Raised when an accountant receives parameters outside their valid range."""


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[float, ...]
    rdp_epsilons: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.orders) != len(self.rdp_epsilons):
            raise PrivacyParameterError("orders and rdp_epsilons must have the same length")
        previous = 1.0
        for order, value in zip(self.orders, self.rdp_epsilons):
            if order <= previous:
                raise PrivacyParameterError("orders must be > 1 and strictly increasing")
            if not math.isfinite(value) or value < 0:
                raise PrivacyParameterError(f"rdp epsilon at order {order} must be finite and >= 0")
            previous = order

    def scaled(self, factor: float) -> RdpCurve:
        return RdpCurve(self.orders, tuple(factor * value for value in self.rdp_epsilons))

    def __add__(self, other: RdpCurve) -> RdpCurve:
        if self.orders != other.orders:
            raise PrivacyParameterError("curves can only be composed on the same order grid")
        return RdpCurve(self.orders, tuple(a + b for a, b in zip(self.rdp_epsilons, other.rdp_epsilons)))


def _require_delta(delta: float, allow_one: bool = False) -> None:
    upper_ok = delta <= 1 if allow_one else delta < 1
    if not (delta > 0 and upper_ok):
        raise PrivacyParameterError(f"delta must lie in (0, {'1]' if allow_one else '1)'}, got {delta}")


def _require_rate(q: float) -> None:
    if not (0 < q <= 1):
        raise PrivacyParameterError(f"sampling rate q must lie in (0, 1], got {q}")


def gaussian_sigma_for(sensitivity: float, eps: float, delta: float) -> float:
    if sensitivity <= 0:
        raise PrivacyParameterError(f"sensitivity must be > 0, got {sensitivity}")
    if eps <= 0:
        raise PrivacyParameterError(f"eps must be > 0, got {eps}")
    _require_delta(delta)
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / eps


def dpsgd_sigma(eps: float, delta: float, q: float, steps: int) -> float:
    """Noise multiplier that keeps `steps` subsampled Gaussian steps within (eps, delta)."""
    if eps <= 0:
        raise PrivacyParameterError(f"eps must be > 0, got {eps}")
    if steps < 1:
        raise PrivacyParameterError(f"steps must be >= 1, got {steps}")
    _require_delta(delta)
    _require_rate(q)
    return 2.0 * q * math.sqrt(steps * math.log(1.0 / delta)) / eps


def dpsgd_epsilon(sigma: float, delta: float, q: float, steps: int) -> float:
    if steps < 0:
        raise PrivacyParameterError(f"steps must be >= 0, got {steps}")
    if sigma < 0:
        raise PrivacyParameterError(f"sigma must be >= 0, got {sigma}")
    _require_delta(delta)
    _require_rate(q)
    if steps == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    return 2.0 * q * math.sqrt(steps * math.log(1.0 / delta)) / sigma


def rdp_to_dp(alpha: float, rdp_eps: float, delta: float) -> float:
    if alpha <= 1:
        raise PrivacyParameterError(f"order alpha must be > 1, got {alpha}")
    _require_delta(delta, allow_one=True)
    return rdp_eps + math.log(1.0 / delta) / (alpha - 1.0)


def moment_bound_curve(q: float, sigma: float, orders: Iterable[float] = DEFAULT_ORDERS) -> RdpCurve:
    """Per-step curve q^2 (alpha - 1) / sigma^2 from the log-moment bound q^2 lambda^2 / sigma^2 at lambda = alpha - 1."""
    _require_rate(q)
    if sigma <= 0:
        raise PrivacyParameterError(f"sigma must be > 0, got {sigma}")
    grid = tuple(float(order) for order in orders)
    return RdpCurve(grid, tuple(q * q * (order - 1.0) / (sigma * sigma) for order in grid))


def compose_and_convert_with_order(curve: RdpCurve, steps: int, delta: float) -> tuple[float, float]:
    if steps < 1:
        raise PrivacyParameterError(f"steps must be >= 1, got {steps}")
    if not curve.orders:
        raise PrivacyParameterError("order grid is empty")
    composed = curve.scaled(float(steps))
    best = min(
        ((rdp_to_dp(order, value, delta), order) for order, value in zip(composed.orders, composed.rdp_epsilons)),
        key=lambda pair: pair[0],
    )
    return best


def compose_and_convert(curve: RdpCurve, steps: int, delta: float) -> float:
    eps, _ = compose_and_convert_with_order(curve, steps, delta)
    return eps


def optimal_order(q: float, sigma: float, steps: int, delta: float) -> float:
    """Stationary point of steps * q^2 (alpha - 1) / sigma^2 + log(1/delta) / (alpha - 1)."""
    _require_rate(q)
    _require_delta(delta)
    if sigma <= 0 or steps < 1:
        raise PrivacyParameterError("optimal order needs sigma > 0 and steps >= 1")
    return 1.0 + sigma * math.sqrt(math.log(1.0 / delta) / steps) / q


def grid_dpsgd_epsilon(
    q: float, sigma: float, steps: int, delta: float, orders: Iterable[float] = DEFAULT_ORDERS
) -> float:
    """Moment-bound accountant minimized over the order grid plus the stationary order."""
    if steps == 0:
        return 0.0
    base = tuple(float(order) for order in orders)
    if not base:
        raise PrivacyParameterError("order grid is empty")
    stationary = optimal_order(q, sigma, steps, delta)
    if stationary <= base[0] or stationary >= base[-1]:
        LOGGER.warning(
            "accountant optimum outside order grid: order=%.4f grid=[%s, %s] q=%s sigma=%s steps=%s",
            stationary,
            base[0],
            base[-1],
            q,
            sigma,
            steps,
        )
    # the stationary order is the continuous minimizer, so this reproduces the closed form up to rounding
    grid = tuple(sorted(set(base) | {stationary}))
    eps, order = compose_and_convert_with_order(moment_bound_curve(q, sigma, grid), steps, delta)
    LOGGER.debug("grid accountant: eps=%s order=%s", eps, order)
    return eps


def delta_for_epsilon(curve: RdpCurve, steps: int, eps: float) -> float:
    """Smallest delta over the grid for which the composed curve converts to `eps`."""
    if steps < 1:
        raise PrivacyParameterError(f"steps must be >= 1, got {steps}")
    if not curve.orders:
        raise PrivacyParameterError("order grid is empty")
    best = 1.0
    for order, value in zip(curve.orders, curve.rdp_epsilons):
        exponent = -(order - 1.0) * (eps - steps * value)
        if exponent < 0:
            best = min(best, math.exp(exponent))
    return best


def amplify_by_subsampling(eps: float, delta: float, q: float) -> tuple[float, float]:
    _require_rate(q)
    if eps < 0:
        raise PrivacyParameterError(f"eps must be >= 0, got {eps}")
    return math.log1p(q * math.expm1(eps)), q * delta


def accountants_agree(q: float, sigma: float, steps: int, delta: float, tolerance: float = AGREEMENT_TOLERANCE) -> bool:
    """Cross-check of the two accountants.

    The grid always carries the stationary order, so for valid inputs the two agree by construction.
    """
    closed = dpsgd_epsilon(sigma, delta, q, steps)
    grid = grid_dpsgd_epsilon(q, sigma, steps, delta)
    if closed == 0.0:
        return grid == 0.0
    gap = abs(grid - closed) / closed
    if gap > tolerance:
        LOGGER.warning("accountants disagree: closed_form=%s grid=%s relative_gap=%.4f", closed, grid, gap)
        return False
    return True


@dataclass
class PrivacyLedger:
    """Budget bookkeeping for one training run; single writer."""

    q: float
    sigma: float
    delta: float
    steps: int = 0

    def __post_init__(self) -> None:
        _require_rate(self.q)
        _require_delta(self.delta)
        if self.sigma < 0:
            raise PrivacyParameterError(f"sigma must be >= 0, got {self.sigma}")
        if self.steps < 0:
            raise PrivacyParameterError("steps must be >= 0")

    @classmethod
    def for_sampling(cls, batch_size: int, dataset_size: int, sigma: float, delta: float) -> PrivacyLedger:
        if batch_size < 1 or dataset_size < batch_size:
            raise PrivacyParameterError(f"need 1 <= batch_size <= dataset_size, got B={batch_size} N={dataset_size}")
        return cls(q=batch_size / dataset_size, sigma=sigma, delta=delta)

    def step(self, count: int = 1) -> None:
        self.steps += count

    def epsilon(self) -> float:
        return dpsgd_epsilon(self.sigma, self.delta, self.q, self.steps)

    def grid_epsilon(self) -> float:
        if self.steps == 0:
            return 0.0
        if self.sigma == 0:
            return math.inf
        return grid_dpsgd_epsilon(self.q, self.sigma, self.steps, self.delta)


def masked_mechanism_budget(ledger: PrivacyLedger, mask: BinaryMask) -> float:
    """Budget of the masked mechanism; a data-independent mask is post-processing, so it costs nothing."""
    LOGGER.debug("masked budget: active=%s of %s", mask.ones_count, mask.size)
    return ledger.epsilon()


def preset_sigma(dataset: str, eps: float) -> float:
    table = NOISE_PRESETS.get(dataset)
    if table is None:
        raise PrivacyParameterError(f"no noise presets for dataset {dataset!r} (known: {', '.join(NOISE_PRESETS)})")
    key = int(eps)
    if key != eps or key not in table:
        raise PrivacyParameterError(f"no {dataset} preset for eps={eps} (known: {sorted(table)})")
    return table[key]
