from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from masked_dpsgd.dp_optim import SCHEDULE_MODES
from masked_dpsgd.models import MODEL_NAMES
from masked_dpsgd.privacy import NOISE_PRESETS

DATASET_KINDS = ("synthetic", "idx", "cifar10")
OPTIMIZERS = ("sgd", "dpsgd", "adadpigu")
PRIVATE_OPTIMIZERS = ("dpsgd", "adadpigu")
IMAGE_MODELS = ("cnn_mnist", "cnn_cifar")


class ConfigError(ValueError):
    """Raised when a run configuration is invalid; lists every offending field."""

    def __init__(self, problems: list[str] | tuple[str, ...] | str) -> None:
        self.problems = (problems,) if isinstance(problems, str) else tuple(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "synthetic"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    cifar_batches: tuple[str, ...] = ()
    cifar_test_batch: str | None = None
    limit_train: int | None = None
    limit_test: int | None = None
    synth_n: int = 2000
    synth_features: int = 20
    synth_classes: int = 4
    synth_margin: float = 10.0
    test_fraction: float = 0.2
    model: str = "logreg"
    hidden: int = 64
    optimizer: str = "adadpigu"
    batch_size: int = 64
    lr: float = 0.1
    epochs: int = 5
    pretrain_steps: int = 0
    retention: float = 0.6
    schedule: str = "fixed"
    heuristic_topk: bool = False
    clip: float = 1.0
    sigma: float | None = None
    target_epsilon: float | None = None
    sigma_preset: str | None = None
    delta: float = 1e-5
    mu: float = 1e-6
    gamma1: float = 0.9
    gamma2: float = 0.999
    alpha0: float = 0.0
    beta0: float = 1.0
    seed: int = 0
    output: str = "out/metrics.jsonl"
    chunk_size: int = 128
    record_wall_time: bool = False

    @property
    def is_private(self) -> bool:
        return self.optimizer in PRIVATE_OPTIMIZERS

    def to_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload["cifar_batches"] = list(self.cifar_batches)
        return payload


FIELD_NAMES = tuple(item.name for item in fields(RunConfig))
_DEFAULTS = RunConfig()


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _optional_int(data: Mapping[str, Any], key: str, minimum: int, problems: list[str], nullable: bool = False) -> Any:
    value = data.get(key, getattr(_DEFAULTS, key))
    if value is None and nullable:
        return None
    if not _is_int(value) or value < minimum:
        problems.append(f"{key} must be int >= {minimum}")
    return value


def _optional_float(
    data: Mapping[str, Any],
    key: str,
    problems: list[str],
    *,
    low: float | None = None,
    high: float | None = None,
    low_open: bool = False,
    high_open: bool = False,
    nullable: bool = False,
) -> Any:
    value = data.get(key, getattr(_DEFAULTS, key))
    if value is None and nullable:
        return None
    if not _is_number(value):
        problems.append(f"{key} must be a number")
        return value
    value = float(value)
    if low is not None and (value < low or (low_open and value == low)):
        problems.append(f"{key} must be {'>' if low_open else '>='} {low}")
    if high is not None and (value > high or (high_open and value == high)):
        problems.append(f"{key} must be {'<' if high_open else '<='} {high}")
    return value


def _optional_bool(data: Mapping[str, Any], key: str, problems: list[str]) -> Any:
    value = data.get(key, getattr(_DEFAULTS, key))
    if not isinstance(value, bool):
        problems.append(f"{key} must be bool")
    return value


def _optional_choice(data: Mapping[str, Any], key: str, choices: tuple[str, ...], problems: list[str]) -> Any:
    value = data.get(key, getattr(_DEFAULTS, key))
    if value not in choices:
        problems.append(f"{key} must be one of {', '.join(choices)} (got {value!r})")
    return value


def _optional_str(data: Mapping[str, Any], key: str, problems: list[str]) -> str | None:
    value = data.get(key, getattr(_DEFAULTS, key))
    if value is None:
        return None
    if not isinstance(value, str) or not value.strip():
        problems.append(f"{key} must be a non-empty string")
        return None
    return value.strip()


def _optional_str_list(data: Mapping[str, Any], key: str, problems: list[str]) -> tuple[str, ...]:
    value = data.get(key, [])
    if isinstance(value, tuple):
        value = list(value)
    if not isinstance(value, list):
        problems.append(f"{key} must be a list of strings")
        return ()
    normalized: list[str] = []
    for idx, item in enumerate(value):
        if not isinstance(item, str) or not item.strip():
            problems.append(f"{key}[{idx}] must be a non-empty string")
            continue
        normalized.append(item.strip())
    return tuple(normalized)


def _read_yaml(path: str | Path) -> dict[str, Any]:
    resolved = Path(path)
    if not resolved.exists():
        raise ConfigError(f"Config file does not exist: {resolved}")
    with resolved.open("r", encoding="utf-8") as handle:
        payload = yaml.safe_load(handle) or {}
    if not isinstance(payload, dict):
        raise ConfigError(f"Config root must be a mapping: {resolved}")
    return payload


def build_run_config(data: Mapping[str, Any]) -> RunConfig:
    """Validate a flat mapping into a RunConfig, collecting every problem before raising."""
    problems: list[str] = []
    unknown = sorted(set(data) - set(FIELD_NAMES))
    for key in unknown:
        problems.append(f"unknown key: {key}")

    values: dict[str, Any] = {
        "dataset": _optional_choice(data, "dataset", DATASET_KINDS, problems),
        "train_images": _optional_str(data, "train_images", problems),
        "train_labels": _optional_str(data, "train_labels", problems),
        "test_images": _optional_str(data, "test_images", problems),
        "test_labels": _optional_str(data, "test_labels", problems),
        "cifar_batches": _optional_str_list(data, "cifar_batches", problems),
        "cifar_test_batch": _optional_str(data, "cifar_test_batch", problems),
        "limit_train": _optional_int(data, "limit_train", 1, problems, nullable=True),
        "limit_test": _optional_int(data, "limit_test", 1, problems, nullable=True),
        "synth_n": _optional_int(data, "synth_n", 2, problems),
        "synth_features": _optional_int(data, "synth_features", 1, problems),
        "synth_classes": _optional_int(data, "synth_classes", 1, problems),
        "synth_margin": _optional_float(data, "synth_margin", problems, low=0.0),
        "test_fraction": _optional_float(data, "test_fraction", problems, low=0.0, high=1.0, low_open=True, high_open=True),
        "model": _optional_choice(data, "model", MODEL_NAMES, problems),
        "hidden": _optional_int(data, "hidden", 1, problems),
        "optimizer": _optional_choice(data, "optimizer", OPTIMIZERS, problems),
        "batch_size": _optional_int(data, "batch_size", 1, problems),
        "lr": _optional_float(data, "lr", problems, low=0.0, low_open=True),
        "epochs": _optional_int(data, "epochs", 1, problems),
        "pretrain_steps": _optional_int(data, "pretrain_steps", 0, problems),
        "retention": _optional_float(data, "retention", problems, low=0.0, high=1.0, low_open=True),
        "schedule": _optional_choice(data, "schedule", SCHEDULE_MODES, problems),
        "heuristic_topk": _optional_bool(data, "heuristic_topk", problems),
        "clip": _optional_float(data, "clip", problems, low=0.0, low_open=True),
        "sigma": _optional_float(data, "sigma", problems, low=0.0, nullable=True),
        "target_epsilon": _optional_float(data, "target_epsilon", problems, low=0.0, low_open=True, nullable=True),
        "sigma_preset": _optional_str(data, "sigma_preset", problems),
        "delta": _optional_float(data, "delta", problems, low=0.0, high=1.0, low_open=True, high_open=True),
        "mu": _optional_float(data, "mu", problems, low=0.0, low_open=True),
        "gamma1": _optional_float(data, "gamma1", problems, low=0.0, high=1.0),
        "gamma2": _optional_float(data, "gamma2", problems, low=0.0, high=1.0),
        "alpha0": _optional_float(data, "alpha0", problems),
        "beta0": _optional_float(data, "beta0", problems, low=0.0),
        "seed": _optional_int(data, "seed", 0, problems),
        "output": _optional_str(data, "output", problems),
        "chunk_size": _optional_int(data, "chunk_size", 1, problems),
        "record_wall_time": _optional_bool(data, "record_wall_time", problems),
    }
    if values["output"] is None:
        problems.append("output must be a non-empty string")
    _check_cross_field(values, problems)
    if problems:
        raise ConfigError(problems)
    return RunConfig(**values)


def _check_cross_field(values: dict[str, Any], problems: list[str]) -> None:
    dataset = values["dataset"]
    if dataset == "idx" and not (values["train_images"] and values["train_labels"]):
        problems.append("dataset idx needs train_images and train_labels")
    if dataset == "idx" and bool(values["test_images"]) != bool(values["test_labels"]):
        problems.append("test_images and test_labels must be given together")
    if dataset == "cifar10" and not values["cifar_batches"]:
        problems.append("dataset cifar10 needs a non-empty cifar_batches list")
    if values["model"] in IMAGE_MODELS and dataset == "synthetic":
        problems.append(f"model {values['model']} needs an image dataset (idx or cifar10)")

    sigma = values["sigma"]
    target = values["target_epsilon"]
    preset = values["sigma_preset"]
    if values["optimizer"] in PRIVATE_OPTIMIZERS:
        if (sigma is None) == (target is None):
            problems.append("exactly one of sigma or target_epsilon must be set for a private optimizer")
        if preset is not None:
            if target is None:
                problems.append("sigma_preset selects a preset by target_epsilon, which is missing")
            elif preset not in NOISE_PRESETS:
                problems.append(f"sigma_preset must be one of {', '.join(NOISE_PRESETS)}")
            elif not _is_number(target) or float(target) not in {float(key) for key in NOISE_PRESETS[preset]}:
                problems.append(f"no {preset} preset for target_epsilon={target} (known: {sorted(NOISE_PRESETS[preset])})")
    else:
        if target is not None or preset is not None:
            problems.append("target_epsilon and sigma_preset apply only to private optimizers")
        if _is_number(sigma) and sigma != 0:
            problems.append("sgd runs without noise; sigma must be absent or 0")

    if values["optimizer"] == "adadpigu" and values["pretrain_steps"] == 0 and not values["heuristic_topk"]:
        if _is_number(values["retention"]) and values["retention"] != 1.0:
            problems.append("pretrain_steps = 0 is only valid with retention = 1 (no importance scores to rank)")

    batch = values["batch_size"]
    if dataset == "synthetic" and _is_int(batch) and _is_int(values["synth_n"]) and _is_number(values["test_fraction"]):
        train_size = values["synth_n"] - max(1, int(round(values["test_fraction"] * values["synth_n"])))
        if batch > train_size:
            problems.append(f"batch_size {batch} exceeds the {train_size} synthetic training samples")


def load_run_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read the YAML file (if any) and apply command-line overrides; flags win."""
    payload: dict[str, Any] = _read_yaml(path) if path is not None else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            payload[key] = value
    return build_run_config(payload)


def with_overrides(config: RunConfig, **changes: Any) -> RunConfig:
    payload = config.to_dict()
    payload.update(changes)
    return build_run_config(payload)
