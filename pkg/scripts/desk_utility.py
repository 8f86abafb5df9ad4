"""Desk-scale utility check on an MNIST subset.

Usage: PYTHONPATH=src python scripts/desk_utility.py --workers 3
"""

from __future__ import annotations

import argparse
import statistics
import sys
from pathlib import Path

from masked_dpsgd.config import ConfigError, load_run_config
from masked_dpsgd.harness import TrainingError, run_experiment, seeded_copies, sweep

SEEDS = (0, 1, 2)
RETENTION_GRID = (0.05, 0.1, 0.2, 0.4, 0.6, 0.8)
MIN_ACCURACY = 0.90


def _median_accuracy(config_path: str, output_dir: Path, label: str) -> tuple[float, list[float]]:
    base = load_run_config(config_path)
    accuracies = [run_experiment(config).final_test_acc for config in seeded_copies(base, SEEDS, output_dir, label)]
    return statistics.median(accuracies), accuracies


def main() -> int:
    parser = argparse.ArgumentParser(description="Compare masked training with the DP-SGD baseline at eps = 4.")
    parser.add_argument("--masked-config", default="data/mnist_mlp_adadpigu.yaml")
    parser.add_argument("--baseline-config", default="data/mnist_mlp_dpsgd.yaml")
    parser.add_argument("--output-dir", default="out/desk_utility")
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args()

    output_dir = Path(args.output_dir)
    errors: list[str] = []
    try:
        masked, masked_runs = _median_accuracy(args.masked_config, output_dir, "masked")
        baseline, baseline_runs = _median_accuracy(args.baseline_config, output_dir, "baseline")
        rows = sweep(
            load_run_config(args.masked_config),
            "retention",
            RETENTION_GRID,
            output_dir / "retention",
            workers=args.workers,
        )
    except (ConfigError, OSError) as exc:
        print(f"[NG] {exc}")
        return 1
    except TrainingError as exc:
        print(f"[NG] training failed: step={exc.step} module={exc.module} error={exc}")
        return 1

    if masked < baseline:
        errors.append(f"masked median {masked:.4f} below baseline median {baseline:.4f}")
    for name, value in (("masked", masked), ("baseline", baseline)):
        if value < MIN_ACCURACY:
            errors.append(f"{name} median {value:.4f} below {MIN_ACCURACY}")
    low = [row.final_test_acc for row in rows if row.value <= 0.2 and row.final_test_acc is not None]
    # rows are ordered by increasing retention
    if not all(earlier <= later for earlier, later in zip(low, low[1:])):
        errors.append("accuracy does not degrade monotonically below retention 0.2")

    print(f"[INFO] masked_runs={','.join(f'{acc:.4f}' for acc in masked_runs)}")
    print(f"[INFO] baseline_runs={','.join(f'{acc:.4f}' for acc in baseline_runs)}")
    for row in rows:
        print(f"[INFO] retention={row.value} status={row.status} test_acc={row.final_test_acc}")
    if errors:
        for error in errors:
            print(f"[NG] {error}")
        return 1
    print(f"[OK] masked median {masked:.4f} >= baseline median {baseline:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
