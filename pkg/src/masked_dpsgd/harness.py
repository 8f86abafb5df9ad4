from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from masked_dpsgd.config import ConfigError, RunConfig, with_overrides
from masked_dpsgd.core_math import SeededRng
from masked_dpsgd.data import (
    BatchSampler,
    load_cifar_dataset,
    load_idx_dataset,
    parse_cifar_batch,
    sample_batch,
    synth_classification,
    train_test_split,
)
from masked_dpsgd.domain import Dataset
from masked_dpsgd.dp_optim import (
    ImportanceState,
    UnfreezeSchedule,
    adadpigu_step,
    dpsgd_step,
    new_clip_state,
    pretrain_importance,
    sgd_step,
    uniform_importance,
)
from masked_dpsgd.models import Network, accuracy, build_model, dataset_loss, init_params
from masked_dpsgd.privacy import PrivacyLedger, dpsgd_sigma, preset_sigma

LOGGER = logging.getLogger("masked_dpsgd")

SWEEP_AXES = {"retention": "retention", "epsilon": "target_epsilon", "batch_size": "batch_size"}
SEED_POLICIES = ("shared", "offset")
SAMPLER_STREAM = 1
NOISE_STREAM = 2


class TrainingError(RuntimeError):
    """Raised when a run fails after validation; names the step and the module that failed."""

    def __init__(self, message: str, *, step: int, module: str) -> None:
        super().__init__(f"{message} (step={step} module={module})")
        self.step = step
        self.module = module


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    eps_spent: float | None
    retention_r_t: float
    wall_time: float


@dataclass(frozen=True)
class RunResult:
    output: Path
    records: tuple[MetricsRecord, ...]
    sigma: float | None
    q: float
    total_steps: int
    ledger_steps: int
    final_test_acc: float
    eps_spent: float | None


@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: float
    seed: int
    status: str
    sigma: float | None
    final_test_acc: float | None
    eps_spent: float | None
    output: str
    error: str = ""


def _finite_or_none(value: float | None) -> float | None:
    if value is None or not math.isfinite(value):
        return None
    return value


def _dataset_paths(config: RunConfig) -> list[str]:
    if config.dataset == "idx":
        candidates = [config.train_images, config.train_labels, config.test_images, config.test_labels]
    else:
        candidates = [*config.cifar_batches, config.cifar_test_batch]
    return [path for path in candidates if path]


def load_datasets(config: RunConfig) -> tuple[Dataset, Dataset, tuple[int, ...]]:
    """Return (train, test, model input shape) for the configured source."""
    if config.dataset == "synthetic":
        full = synth_classification(
            config.seed, config.synth_n, config.synth_features, config.synth_classes, config.synth_margin
        )
        train, test = train_test_split(full, config.test_fraction, config.seed)
        return train, test, (config.synth_features,)

    missing = [path for path in _dataset_paths(config) if not Path(path).exists()]
    if missing:
        raise ConfigError(f"dataset file does not exist: {', '.join(missing)}")

    if config.dataset == "idx":
        assert config.train_images and config.train_labels
        train, shape = load_idx_dataset(config.train_images, config.train_labels, config.limit_train)
        if config.test_images and config.test_labels:
            test, _ = load_idx_dataset(config.test_images, config.test_labels, config.limit_test)
        else:
            train, test = train_test_split(train, config.test_fraction, config.seed)
        return train, test, shape

    train, shape = load_cifar_dataset(config.cifar_batches, config.limit_train)
    if config.cifar_test_batch:
        test = parse_cifar_batch(Path(config.cifar_test_batch).read_bytes())
        if config.limit_test is not None:
            test = test.subset(np.arange(min(config.limit_test, test.size)))
    else:
        train, test = train_test_split(train, config.test_fraction, config.seed)
    return train, test, shape


def resolve_sigma(config: RunConfig, q: float, total_steps: int) -> float | None:
    if not config.is_private:
        return None
    if config.sigma is not None:
        return config.sigma
    assert config.target_epsilon is not None
    if config.sigma_preset is not None:
        return preset_sigma(config.sigma_preset, config.target_epsilon)
    return dpsgd_sigma(config.target_epsilon, config.delta, q, total_steps)


def _model_input_shape(config: RunConfig, shape: tuple[int, ...]) -> tuple[int, ...]:
    if config.model in ("cnn_mnist", "cnn_cifar"):
        return shape
    return (int(np.prod(shape)),)


def _failing_module(exc: BaseException) -> str:
    return type(exc).__module__.rsplit(".", 1)[-1]


def _json_line(payload: dict[str, Any]) -> str:
    return json.dumps(payload, allow_nan=False) + "\n"


def run_experiment(config: RunConfig) -> RunResult:
    """Train one configuration and write its metrics file (header, one line per epoch, summary)."""
    started = time.perf_counter()
    train, test, raw_shape = load_datasets(config)
    if config.batch_size > train.size:
        raise ConfigError(f"batch_size {config.batch_size} exceeds the {train.size} training samples")
    model = build_model(config.model, _model_input_shape(config, raw_shape), train.classes, config.hidden)
    params = init_params(model, config.seed)
    root_rng = SeededRng(config.seed)
    sampler = BatchSampler(root_rng.derive(SAMPLER_STREAM), train.size, config.batch_size)
    noise_rng = root_rng.derive(NOISE_STREAM)

    steps_per_epoch = sampler.epoch_steps
    total_steps = config.epochs * steps_per_epoch
    pretrain_steps = config.pretrain_steps if config.optimizer == "adadpigu" and not config.heuristic_topk else 0
    accounted_steps = total_steps + pretrain_steps
    q = sampler.sampling_rate
    sigma = resolve_sigma(config, q, accounted_steps)
    ledger = PrivacyLedger(q=q, sigma=sigma, delta=config.delta) if sigma is not None else None
    clip_state = new_clip_state(
        model.param_count,
        clip=config.clip,
        sigma=sigma or 0.0,
        mu=config.mu,
        gamma1=config.gamma1,
        gamma2=config.gamma2,
        alpha0=config.alpha0,
        beta0=config.beta0,
    )
    LOGGER.info(
        "run start: optimizer=%s model=%s params=%s train=%s test=%s q=%.6g sigma=%s steps=%s pretrain=%s",
        config.optimizer,
        config.model,
        model.param_count,
        train.size,
        test.size,
        q,
        sigma,
        total_steps,
        pretrain_steps,
    )

    def draw_batch() -> tuple[np.ndarray, np.ndarray]:
        idx = sample_batch(sampler)
        return train.features[idx], train.labels[idx]

    importance: ImportanceState | None = None
    schedule: UnfreezeSchedule | None = None
    if config.optimizer == "adadpigu":
        if config.heuristic_topk:
            LOGGER.warning("per-sample top-k pruning enabled: the masked-mechanism guarantee no longer applies")
        if pretrain_steps > 0:
            try:
                params, importance = pretrain_importance(
                    model, params, draw_batch, clip_state, noise_rng, config.lr, pretrain_steps,
                    ledger=ledger, chunk_size=config.chunk_size,
                )
            except (ArithmeticError, ValueError) as exc:
                raise TrainingError(f"importance pretraining failed: {exc}", step=0, module=_failing_module(exc)) from exc
        else:
            importance = uniform_importance(model.param_count)
        schedule = UnfreezeSchedule(config.schedule, config.retention, total_steps)

    records: list[MetricsRecord] = []
    output = Path(config.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    lines = [_json_line({"type": "header", "config": config.to_dict(), "sigma": sigma, "q": q,
                         "steps_per_epoch": steps_per_epoch, "total_steps": total_steps,
                         "pretrain_steps": pretrain_steps, "param_count": model.param_count,
                         "architecture": model.describe()})]
    retention_now = 1.0
    for t in range(total_steps):
        features, labels = draw_batch()
        try:
            if config.optimizer == "sgd":
                params = sgd_step(model, params, features, labels, config.lr, chunk_size=config.chunk_size)
            elif config.optimizer == "dpsgd":
                params = dpsgd_step(
                    model, params, features, labels, clip_state, noise_rng, config.lr,
                    ledger=ledger, chunk_size=config.chunk_size,
                )
            else:
                assert importance is not None and schedule is not None
                params, clip_state, importance = adadpigu_step(
                    model, params, features, labels, importance, clip_state, schedule, noise_rng, config.lr, t,
                    ledger=ledger, heuristic_topk=config.heuristic_topk, chunk_size=config.chunk_size,
                )
                retention_now = importance.retention
        except (ArithmeticError, ValueError) as exc:
            raise TrainingError(str(exc), step=t, module=_failing_module(exc)) from exc
        if not np.all(np.isfinite(params)):
            raise TrainingError("parameters became non-finite", step=t, module="dp_optim")

        if (t + 1) % steps_per_epoch == 0:
            record = _evaluate(model, params, train, test, config, t + 1, (t + 1) // steps_per_epoch,
                               ledger, retention_now, started)
            records.append(record)
            lines.append(_json_line({"type": "epoch", **asdict(record)}))
            LOGGER.info(
                "epoch complete: epoch=%s train_loss=%.4f test_acc=%.4f eps=%s",
                record.epoch, record.train_loss, record.test_acc, record.eps_spent,
            )

    final = records[-1]
    ledger_steps = ledger.steps if ledger is not None else 0
    grid_eps = _finite_or_none(ledger.grid_epsilon()) if ledger is not None else None
    summary = {
        "type": "summary",
        "final_test_acc": final.test_acc,
        "final_train_acc": final.train_acc,
        "eps_spent": final.eps_spent,
        "eps_grid": grid_eps,
        "delta": config.delta if ledger is not None else None,
        "sigma": sigma,
        "ledger_steps": ledger_steps,
        "steps": total_steps,
    }
    lines.append(_json_line(summary))
    output.write_text("".join(lines), encoding="utf-8")
    LOGGER.info(
        "run complete: optimizer=%s epochs=%s final_test_acc=%.4f eps=%s output=%s elapsed=%.2fs",
        config.optimizer, config.epochs, final.test_acc, final.eps_spent, output, time.perf_counter() - started,
    )
    return RunResult(
        output=output,
        records=tuple(records),
        sigma=sigma,
        q=q,
        total_steps=total_steps,
        ledger_steps=ledger_steps,
        final_test_acc=final.test_acc,
        eps_spent=final.eps_spent,
    )


def _evaluate(
    model: Network,
    params: np.ndarray,
    train: Dataset,
    test: Dataset,
    config: RunConfig,
    step: int,
    epoch: int,
    ledger: PrivacyLedger | None,
    retention: float,
    started: float,
) -> MetricsRecord:
    eps = _finite_or_none(ledger.epsilon()) if ledger is not None else None
    return MetricsRecord(
        step=step,
        epoch=epoch,
        train_loss=dataset_loss(model, params, train),
        train_acc=accuracy(model, params, train),
        test_acc=accuracy(model, params, test),
        eps_spent=eps,
        retention_r_t=retention,
        wall_time=round(time.perf_counter() - started, 3) if config.record_wall_time else 0.0,
    )


def read_metrics(path: str | Path) -> Iterator[dict[str, Any]]:
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                yield json.loads(line)


def sweep_configs(
    base: RunConfig, axis: str, values: Sequence[float], output_dir: Path, seed_policy: str = "shared"
) -> list[tuple[float, RunConfig | ConfigError]]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {', '.join(SWEEP_AXES)}, got {axis!r}")
    if seed_policy not in SEED_POLICIES:
        raise ConfigError(f"seed policy must be one of {', '.join(SEED_POLICIES)}, got {seed_policy!r}")
    if len(values) < 2:
        raise ConfigError("a sweep needs at least two axis values")
    planned: list[tuple[float, RunConfig | ConfigError]] = []
    for index, value in enumerate(values):
        changes: dict[str, Any] = {
            "seed": base.seed + index if seed_policy == "offset" else base.seed,
            "output": str(output_dir / f"run_{axis}_{index:02d}.jsonl"),
        }
        if axis == "epsilon":
            changes.update(target_epsilon=value, sigma=None)
        elif axis == "batch_size":
            changes["batch_size"] = int(value)
        else:
            changes["retention"] = value
        try:
            planned.append((value, with_overrides(base, **changes)))
        except ConfigError as exc:
            planned.append((value, exc))
    return planned


def _sweep_one(axis: str, value: float, config: RunConfig) -> SweepRow:
    try:
        result = run_experiment(config)
    except (ConfigError, TrainingError, ArithmeticError, ValueError, OSError) as exc:
        LOGGER.error("sweep run failed: axis=%s value=%s error=%s", axis, value, exc)
        return SweepRow(axis, value, config.seed, "failed", None, None, None, config.output, str(exc))
    return SweepRow(
        axis, value, config.seed, "ok", result.sigma, result.final_test_acc, result.eps_spent, str(result.output)
    )


def sweep(
    base: RunConfig,
    axis: str,
    values: Sequence[float],
    output_dir: str | Path,
    *,
    seed_policy: str = "shared",
    workers: int = 1,
) -> list[SweepRow]:
    """One run per axis value, then a CSV summary; failed runs are marked and the sweep continues."""
    directory = Path(output_dir)
    planned = sweep_configs(base, axis, values, directory, seed_policy)
    directory.mkdir(parents=True, exist_ok=True)

    rows: list[SweepRow | None] = [None] * len(planned)
    runnable: list[tuple[int, float, RunConfig]] = []
    for index, (value, item) in enumerate(planned):
        if isinstance(item, ConfigError):
            rows[index] = SweepRow(axis, value, base.seed, "failed", None, None, None, "", str(item))
        else:
            runnable.append((index, value, item))

    if workers > 1 and len(runnable) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {index: pool.submit(_sweep_one, axis, value, config) for index, value, config in runnable}
            for index, future in futures.items():
                rows[index] = future.result()
    else:
        for index, value, config in runnable:
            rows[index] = _sweep_one(axis, value, config)

    finished = [row for row in rows if row is not None]
    write_sweep_summary(finished, directory / "sweep_summary.csv")
    LOGGER.info(
        "sweep complete: axis=%s runs=%s failed=%s output_dir=%s",
        axis, len(finished), sum(1 for row in finished if row.status != "ok"), directory,
    )
    return finished


def write_sweep_summary(rows: Sequence[SweepRow], path: Path) -> None:
    names = list(SweepRow.__dataclass_fields__)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=names)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: "" if value is None else value for key, value in asdict(row).items()})


def seeded_copies(config: RunConfig, seeds: Sequence[int], output_dir: Path, label: str) -> list[RunConfig]:
    return [replace(config, seed=seed, output=str(output_dir / f"{label}_seed{seed}.jsonl")) for seed in seeds]
