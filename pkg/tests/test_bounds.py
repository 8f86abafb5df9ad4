import math

import pytest

from masked_dpsgd.bounds import (
    BoundCheckError,
    BoundReport,
    check_clipped_sgd_bound,
    check_masked_dpsgd_bound,
    check_masked_noisy_sgd_bound,
    masked_dpsgd_rhs,
    masked_noisy_sgd_rhs,
)


def test_clipped_sgd_reference_case() -> None:
    report = check_clipped_sgd_bound(clip=10.0, lr=0.1, steps=100)
    # theta_t = 0.9^t, so the average inner product is sum(0.81^t) / 100
    assert report.lhs == pytest.approx((1 - 0.81**100) / 0.19 / 100, rel=1e-9)
    assert report.holds
    assert report.details["stated_holds"]
    assert report.details["trials"] == 1


@pytest.mark.parametrize("clip", [0.5, 1.0, 10.0])
@pytest.mark.parametrize("sigma", [0.0, 0.5, 1.0])
def test_clipped_sgd_bound_holds_on_grid(clip: float, sigma: float) -> None:
    report = check_clipped_sgd_bound(clip=clip, lr=0.1, steps=100, sigma=sigma)
    assert report.require() is report


def test_clipped_sgd_with_vanishing_clip() -> None:
    report = check_clipped_sgd_bound(clip=1e-8, lr=0.1, steps=50)
    assert report.lhs <= 1e-7
    assert report.holds


def test_clipped_sgd_single_step() -> None:
    report = check_clipped_sgd_bound(clip=10.0, lr=0.1, steps=1)
    assert report.lhs == 1.0
    assert report.holds


def test_clipped_sgd_rejects_bad_arguments() -> None:
    with pytest.raises(ValueError):
        check_clipped_sgd_bound(clip=0.0, lr=0.1, steps=10)
    with pytest.raises(ValueError):
        check_clipped_sgd_bound(clip=1.0, lr=0.1, steps=0)


@pytest.mark.parametrize("retention", [0.3, 0.5, 1.0])
@pytest.mark.parametrize("sigma", [0.0, 1.0, 2.0])
def test_masked_noisy_sgd_bound_holds_on_grid(retention: float, sigma: float) -> None:
    report = check_masked_noisy_sgd_bound(retention=retention, sigma=sigma)
    assert report.require() is report
    assert 0.0 < report.details["alpha_min"] <= 1.0


def test_masked_noisy_sgd_full_batch_full_mask() -> None:
    report = check_masked_noisy_sgd_bound(retention=1.0, sigma=0.0, batch_size=64, points=64)
    assert report.details["alpha_min"] == 1.0
    assert report.details["active"] == 10
    assert report.holds


def test_noise_term_grows_with_sigma_squared() -> None:
    shared = {"loss_gap": 2.0, "alpha_min": 0.5, "sigma_g2": 3.0, "batch_size": 8, "dim": 10, "steps": 400}
    low = masked_noisy_sgd_rhs(sigma=1.0, **shared)
    high = masked_noisy_sgd_rhs(sigma=2.0, **shared)
    assert high - low == pytest.approx(3 * 10 * 1.0 / (8**2 * math.sqrt(400)), rel=1e-12)


def test_masked_dpsgd_rhs_is_monotone() -> None:
    shared = {"loss_drop": 0.01, "lr": 0.05, "clip": 1.0, "alpha": 0.8, "batch_size": 16}
    base = masked_dpsgd_rhs(dim=10, sigma=1.0, **shared)
    assert masked_dpsgd_rhs(dim=10, sigma=2.0, **shared) > base
    assert masked_dpsgd_rhs(dim=20, sigma=1.0, **shared) > base


@pytest.mark.parametrize("sigma", [0.0, 1.0])
def test_masked_dpsgd_qualitative_check(sigma: float) -> None:
    report = check_masked_dpsgd_bound(retention=0.5, sigma=sigma)
    assert report.holds
    assert math.isfinite(report.lhs)
    assert report.details["rhs_sigma_plus_one"] >= report.rhs


def test_failed_report_raises_on_require() -> None:
    report = BoundReport(name="demo", lhs=2.0, rhs=1.0, slack=0.0, holds=False)
    assert report.margin == -1.0
    with pytest.raises(BoundCheckError) as excinfo:
        report.require()
    assert excinfo.value.report is report
    assert report.to_dict()["margin"] == -1.0
