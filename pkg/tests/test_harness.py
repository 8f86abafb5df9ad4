import csv
import json
from pathlib import Path

import pytest

import masked_dpsgd.harness as harness_module
from masked_dpsgd.config import ConfigError, RunConfig, build_run_config, load_run_config, with_overrides
from masked_dpsgd.harness import TrainingError, read_metrics, run_experiment, sweep
from masked_dpsgd.models import ModelError
from masked_dpsgd.privacy import dpsgd_epsilon


def _small_config(tmp_path: Path, **changes) -> RunConfig:
    payload = {
        "dataset": "synthetic",
        "synth_n": 500,
        "synth_features": 8,
        "synth_classes": 3,
        "synth_margin": 8.0,
        "model": "logreg",
        "optimizer": "adadpigu",
        "batch_size": 25,
        "lr": 0.2,
        "epochs": 2,
        "pretrain_steps": 5,
        "retention": 0.6,
        "clip": 1.0,
        "sigma": 1.0,
        "seed": 0,
        "output": str(tmp_path / "run.jsonl"),
    }
    payload.update(changes)
    return build_run_config(payload)


def test_sgd_separates_synthetic_blobs(tmp_path: Path) -> None:
    config = load_run_config("data/synthetic_sgd.yaml", {"output": str(tmp_path / "sgd.jsonl")})
    result = run_experiment(config)
    assert result.records[-1].train_acc >= 0.99
    assert result.eps_spent is None
    assert result.ledger_steps == 0


def test_metrics_file_layout(tmp_path: Path) -> None:
    config = _small_config(tmp_path)
    result = run_experiment(config)
    lines = list(read_metrics(result.output))

    assert lines[0]["type"] == "header"
    assert lines[0]["config"]["optimizer"] == "adadpigu"
    assert [layer["kind"] for layer in lines[0]["architecture"]] == ["dense"]
    assert lines[0]["architecture"][0]["params"] == [[3, 8], [3]]
    assert [line["epoch"] for line in lines[1:-1]] == [1, 2]
    summary = lines[-1]
    assert summary["type"] == "summary"
    assert summary["final_test_acc"] == lines[-2]["test_acc"]
    assert summary["eps_spent"] == lines[-2]["eps_spent"]


def test_seeded_runs_are_byte_identical(tmp_path: Path) -> None:
    config = _small_config(tmp_path)
    first = run_experiment(config).output.read_bytes()
    second = run_experiment(config).output.read_bytes()
    assert first == second


def test_masked_run_reduces_to_dpsgd_run(tmp_path: Path) -> None:
    shared = {
        "pretrain_steps": 0,
        "retention": 1.0,
        "mu": 1.0,
        "alpha0": 0.0,
        "beta0": 0.0,
        "gamma1": 1.0,
        "gamma2": 1.0,
    }
    masked = run_experiment(_small_config(tmp_path, output=str(tmp_path / "masked.jsonl"), **shared))
    baseline = run_experiment(
        _small_config(tmp_path, optimizer="dpsgd", output=str(tmp_path / "dpsgd.jsonl"), **shared)
    )

    def epoch_lines(path: Path) -> list[str]:
        return [line for line in path.read_text(encoding="utf-8").splitlines() if '"type": "epoch"' in line]

    assert epoch_lines(masked.output) == epoch_lines(baseline.output)
    assert len(epoch_lines(masked.output)) == 2


def test_ledger_counts_pretraining_and_training_steps(tmp_path: Path) -> None:
    result = run_experiment(_small_config(tmp_path))
    # 400 training samples at batch 25 give 16 steps per epoch
    assert result.total_steps == 32
    assert result.ledger_steps == 37
    assert result.eps_spent == dpsgd_epsilon(1.0, 1e-5, 25 / 400, 37)
    eps_history = [record.eps_spent for record in result.records]
    assert eps_history == sorted(eps_history)


def test_every_batch_comes_from_sample_batch(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    drawn: list[int] = []
    original = harness_module.sample_batch

    def counting_sample(sampler):
        batch = original(sampler)
        drawn.append(batch.size)
        return batch

    monkeypatch.setattr(harness_module, "sample_batch", counting_sample)
    result = run_experiment(_small_config(tmp_path))
    assert len(drawn) == result.ledger_steps
    assert set(drawn) == {25}


def test_target_epsilon_is_met_exactly(tmp_path: Path) -> None:
    result = run_experiment(_small_config(tmp_path, sigma=None, target_epsilon=3.0))
    assert result.eps_spent == pytest.approx(3.0, rel=1e-9)


def test_noise_preset_sets_sigma(tmp_path: Path) -> None:
    result = run_experiment(_small_config(tmp_path, sigma=None, target_epsilon=4, sigma_preset="mnist"))
    assert result.sigma == 2.49


def test_linear_schedule_reaches_full_retention(tmp_path: Path) -> None:
    result = run_experiment(_small_config(tmp_path, schedule="linear", retention=0.2))
    assert result.records[0].retention_r_t < result.records[-1].retention_r_t
    assert result.records[-1].retention_r_t == pytest.approx(1.0 - 0.8 / 32)


def test_missing_dataset_files_are_config_errors(tmp_path: Path) -> None:
    labels = tmp_path / "labels.idx"
    labels.write_bytes(b"")
    config = _small_config(
        tmp_path, dataset="idx", train_images=str(tmp_path / "absent.idx"), train_labels=str(labels)
    )
    with pytest.raises(ConfigError, match="absent.idx"):
        run_experiment(config)


def test_step_failure_names_step_and_module(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    def broken_step(*args, **kwargs):
        raise ModelError("non-finite gradient at sample index 0")

    monkeypatch.setattr(harness_module, "adadpigu_step", broken_step)
    with pytest.raises(TrainingError) as excinfo:
        run_experiment(_small_config(tmp_path))
    assert excinfo.value.step == 0
    assert excinfo.value.module == "models"


def test_retention_sweep_writes_rows_and_csv(tmp_path: Path) -> None:
    rows = sweep(_small_config(tmp_path, epochs=1), "retention", [0.2, 0.4, 0.6, 0.8], tmp_path / "sweep")

    assert [row.value for row in rows] == [0.2, 0.4, 0.6, 0.8]
    assert all(row.status == "ok" for row in rows)
    with (tmp_path / "sweep" / "sweep_summary.csv").open(encoding="utf-8") as handle:
        table = list(csv.DictReader(handle))
    assert len(table) == 4
    assert table[0]["axis"] == "retention"
    for row in rows:
        assert Path(row.output).exists()


def test_epsilon_sweep_uses_presets(tmp_path: Path) -> None:
    base = _small_config(tmp_path, epochs=1, sigma=None, target_epsilon=4, sigma_preset="mnist")
    rows = sweep(base, "epsilon", [2, 4], tmp_path / "eps")
    assert [row.sigma for row in rows] == [4.64, 2.49]


def test_sweep_marks_failed_runs_and_continues(tmp_path: Path) -> None:
    rows = sweep(_small_config(tmp_path, epochs=1), "retention", [0.5, 1.5], tmp_path / "sweep")
    assert [row.status for row in rows] == ["ok", "failed"]
    assert "retention" in rows[1].error


def test_sweep_needs_two_values(tmp_path: Path) -> None:
    base = _small_config(tmp_path)
    with pytest.raises(ConfigError):
        sweep(base, "retention", [], tmp_path / "sweep")
    with pytest.raises(ConfigError):
        sweep(base, "retention", [0.5], tmp_path / "sweep")
    with pytest.raises(ConfigError):
        sweep(base, "momentum", [0.1, 0.2], tmp_path / "sweep")


def test_sweep_results_do_not_depend_on_worker_count(tmp_path: Path) -> None:
    base = _small_config(tmp_path, epochs=1)
    serial = sweep(base, "batch_size", [20, 25, 40], tmp_path / "serial")
    parallel = sweep(base, "batch_size", [20, 25, 40], tmp_path / "parallel", workers=2)
    assert [row.final_test_acc for row in serial] == [row.final_test_acc for row in parallel]
    assert [row.eps_spent for row in serial] == [row.eps_spent for row in parallel]


def test_offset_seed_policy(tmp_path: Path) -> None:
    rows = sweep(_small_config(tmp_path, epochs=1), "retention", [0.4, 0.8], tmp_path / "sweep", seed_policy="offset")
    assert [row.seed for row in rows] == [0, 1]
    header = json.loads(Path(rows[1].output).read_text(encoding="utf-8").splitlines()[0])
    assert header["config"]["seed"] == 1


def test_sgd_run_rejects_batch_larger_than_training_set(tmp_path: Path) -> None:
    config = with_overrides(_small_config(tmp_path), optimizer="sgd", sigma=None, synth_n=500)
    with pytest.raises(ConfigError):
        with_overrides(config, batch_size=450)
