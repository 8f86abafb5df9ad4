import textwrap
from pathlib import Path

import pytest

from masked_dpsgd.config import ConfigError, build_run_config, load_run_config, with_overrides


def test_load_synthetic_sgd_config() -> None:
    config = load_run_config("data/synthetic_sgd.yaml")
    assert config.dataset == "synthetic"
    assert config.optimizer == "sgd"
    assert config.synth_margin == 10.0
    assert config.is_private is False


@pytest.mark.parametrize(
    "path",
    [
        "data/synthetic_sgd.yaml",
        "data/synthetic_adadpigu.yaml",
        "data/mnist_mlp_adadpigu.yaml",
        "data/mnist_mlp_dpsgd.yaml",
        "data/mnist_cnn_full.yaml",
    ],
)
def test_shipped_configs_validate(path: str) -> None:
    config = load_run_config(path)
    assert config.output.endswith(".jsonl")


def test_missing_config_file(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="does not exist"):
        load_run_config(tmp_path / "absent.yaml")


def test_config_root_must_be_mapping(tmp_path: Path) -> None:
    config_path = tmp_path / "run.yaml"
    config_path.write_text("- a\n- b\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="mapping"):
        load_run_config(config_path)


def test_every_problem_is_reported(tmp_path: Path) -> None:
    config_path = tmp_path / "run.yaml"
    config_path.write_text(
        textwrap.dedent(
            """
            optimizer: sgd
            batch_size: 0
            lr: -1
            delta: 2.0
            model: transformer
            colour: blue
            """
        ),
        encoding="utf-8",
    )

    with pytest.raises(ConfigError) as excinfo:
        load_run_config(config_path)

    problems = excinfo.value.problems
    assert "unknown key: colour" in problems
    assert any(problem.startswith("batch_size") for problem in problems)
    assert any(problem.startswith("lr") for problem in problems)
    assert any(problem.startswith("delta") for problem in problems)
    assert any(problem.startswith("model") for problem in problems)


def test_private_optimizer_needs_exactly_one_noise_source() -> None:
    with pytest.raises(ConfigError, match="exactly one of sigma or target_epsilon"):
        build_run_config({"optimizer": "dpsgd"})
    with pytest.raises(ConfigError, match="exactly one of sigma or target_epsilon"):
        build_run_config({"optimizer": "dpsgd", "sigma": 1.0, "target_epsilon": 2.0})
    assert build_run_config({"optimizer": "dpsgd", "sigma": 1.0}).sigma == 1.0


def test_sigma_preset_rules() -> None:
    config = build_run_config({"optimizer": "dpsgd", "target_epsilon": 4, "sigma_preset": "mnist"})
    assert config.sigma_preset == "mnist"
    with pytest.raises(ConfigError, match="target_epsilon, which is missing"):
        build_run_config({"optimizer": "dpsgd", "sigma": 1.0, "sigma_preset": "mnist"})
    with pytest.raises(ConfigError, match="sigma_preset must be one of"):
        build_run_config({"optimizer": "dpsgd", "target_epsilon": 4, "sigma_preset": "svhn"})
    with pytest.raises(ConfigError, match="no mnist preset"):
        build_run_config({"optimizer": "dpsgd", "target_epsilon": 5, "sigma_preset": "mnist"})


def test_sgd_rejects_privacy_settings() -> None:
    with pytest.raises(ConfigError):
        build_run_config({"optimizer": "sgd", "sigma": 1.0})
    with pytest.raises(ConfigError):
        build_run_config({"optimizer": "sgd", "target_epsilon": 2.0})
    assert build_run_config({"optimizer": "sgd", "sigma": 0}).sigma == 0.0


def test_masked_optimizer_without_pretraining_needs_full_retention() -> None:
    with pytest.raises(ConfigError, match="pretrain_steps = 0"):
        build_run_config({"optimizer": "adadpigu", "sigma": 1.0, "retention": 0.5})
    assert build_run_config({"optimizer": "adadpigu", "sigma": 1.0, "retention": 1.0}).retention == 1.0
    heuristic = build_run_config({"optimizer": "adadpigu", "sigma": 1.0, "retention": 0.5, "heuristic_topk": True})
    assert heuristic.heuristic_topk is True


def test_dataset_specific_requirements() -> None:
    with pytest.raises(ConfigError, match="train_images and train_labels"):
        build_run_config({"optimizer": "sgd", "dataset": "idx"})
    with pytest.raises(ConfigError, match="cifar_batches"):
        build_run_config({"optimizer": "sgd", "dataset": "cifar10"})
    with pytest.raises(ConfigError, match="needs an image dataset"):
        build_run_config({"optimizer": "sgd", "model": "cnn_mnist"})
    with pytest.raises(ConfigError, match="exceeds the"):
        build_run_config({"optimizer": "sgd", "synth_n": 50, "batch_size": 45})


def test_overrides_win_over_file_values() -> None:
    config = load_run_config("data/synthetic_sgd.yaml", {"epochs": 2, "lr": None, "seed": 9})
    assert config.epochs == 2
    assert config.lr == 0.1
    assert config.seed == 9


def test_with_overrides_revalidates() -> None:
    base = load_run_config("data/synthetic_adadpigu.yaml")
    assert with_overrides(base, retention=0.3).retention == 0.3
    with pytest.raises(ConfigError):
        with_overrides(base, retention=1.5)
