from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

import numpy as np

from masked_dpsgd.bounds import (
    BoundCheckError,
    BoundReport,
    check_clipped_sgd_bound,
    check_masked_noisy_sgd_bound,
    check_masked_dpsgd_bound,
    default_bound_grid,
)
from masked_dpsgd.config import ConfigError, load_run_config
from masked_dpsgd.data import CifarFormatError, IdxFormatError, label_histogram, parse_idx
from masked_dpsgd.harness import SWEEP_AXES, SEED_POLICIES, TrainingError, run_experiment, sweep
from masked_dpsgd.privacy import (
    PrivacyParameterError,
    accountants_agree,
    amplify_by_subsampling,
    dpsgd_epsilon,
    dpsgd_sigma,
    grid_dpsgd_epsilon,
)

LOGGER = logging.getLogger("masked_dpsgd")

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_BOUND = 3
BOUND_NAMES = ("clipped-sgd", "masked-sgd", "masked-dpsgd", "all")

# (flag, dest, type) for every RunConfig field settable from the command line.
_RUN_FLAGS: tuple[tuple[str, str, Any], ...] = (
    ("--dataset", "dataset", str),
    ("--train-images", "train_images", str),
    ("--train-labels", "train_labels", str),
    ("--test-images", "test_images", str),
    ("--test-labels", "test_labels", str),
    ("--cifar-test-batch", "cifar_test_batch", str),
    ("--limit-train", "limit_train", int),
    ("--limit-test", "limit_test", int),
    ("--synth-n", "synth_n", int),
    ("--synth-features", "synth_features", int),
    ("--synth-classes", "synth_classes", int),
    ("--synth-margin", "synth_margin", float),
    ("--test-fraction", "test_fraction", float),
    ("--model", "model", str),
    ("--hidden", "hidden", int),
    ("--optimizer", "optimizer", str),
    ("--batch-size", "batch_size", int),
    ("--lr", "lr", float),
    ("--epochs", "epochs", int),
    ("--pretrain-steps", "pretrain_steps", int),
    ("--retention", "retention", float),
    ("--schedule", "schedule", str),
    ("--clip", "clip", float),
    ("--sigma", "sigma", float),
    ("--target-epsilon", "target_epsilon", float),
    ("--sigma-preset", "sigma_preset", str),
    ("--delta", "delta", float),
    ("--mu", "mu", float),
    ("--gamma1", "gamma1", float),
    ("--gamma2", "gamma2", float),
    ("--alpha0", "alpha0", float),
    ("--beta0", "beta0", float),
    ("--seed", "seed", int),
    ("--output", "output", str),
    ("--chunk-size", "chunk_size", int),
)
_RUN_SWITCHES: tuple[tuple[str, str], ...] = (
    ("--heuristic-topk", "heuristic_topk"),
    ("--record-wall-time", "record_wall_time"),
)


def configure_logging(log_level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="YAML run configuration; flags override its keys")
    for flag, dest, kind in _RUN_FLAGS:
        parser.add_argument(flag, dest=dest, type=kind, default=None)
    parser.add_argument("--cifar-batch", dest="cifar_batches", action="append", default=None)
    for flag, dest in _RUN_SWITCHES:
        parser.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=None)


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    keys = [dest for _, dest, _ in _RUN_FLAGS] + [dest for _, dest in _RUN_SWITCHES] + ["cifar_batches"]
    return {key: getattr(args, key) for key in keys if getattr(args, key) is not None}


def run_train_command(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, _overrides(args))
    result = run_experiment(config)
    LOGGER.info(
        "train complete: output=%s final_test_acc=%.4f eps=%s ledger_steps=%s",
        result.output,
        result.final_test_acc,
        result.eps_spent,
        result.ledger_steps,
    )
    print(result.output)
    return 0


def _parse_values(raw: str) -> list[float]:
    values: list[float] = []
    for token in raw.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            values.append(float(token))
        except ValueError as exc:
            raise ConfigError(f"--values entry is not a number: {token!r}") from exc
    return values


def run_sweep_command(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, _overrides(args))
    rows = sweep(
        config,
        args.axis,
        _parse_values(args.values),
        args.output_dir,
        seed_policy=args.seed_policy,
        workers=args.workers,
    )
    print("value,status,sigma,final_test_acc,eps_spent")
    for row in rows:
        print(f"{row.value},{row.status},{row.sigma},{row.final_test_acc},{row.eps_spent}")
    print(Path(args.output_dir) / "sweep_summary.csv")
    return 0


def run_accountant_command(args: argparse.Namespace) -> int:
    if (args.eps is None) == (args.sigma is None):
        raise ConfigError("accountant: give exactly one of --eps or --sigma")
    if args.eps is not None:
        sigma = dpsgd_sigma(args.eps, args.delta, args.q, args.steps)
        eps = args.eps
    else:
        sigma = args.sigma
        eps = dpsgd_epsilon(sigma, args.delta, args.q, args.steps)
    grid_eps = grid_dpsgd_epsilon(args.q, sigma, args.steps, args.delta)
    agree = accountants_agree(args.q, sigma, args.steps, args.delta)
    amplified_eps, amplified_delta = amplify_by_subsampling(eps, args.delta, args.q)
    LOGGER.info(
        "accountant complete: q=%s steps=%s delta=%s sigma=%.6g eps=%.6g grid_eps=%.6g",
        args.q,
        args.steps,
        args.delta,
        sigma,
        eps,
        grid_eps,
    )
    print(f"sigma={sigma:.6f}")
    print(f"eps_closed_form={eps:.6f}")
    print(f"eps_grid={grid_eps:.6f}")
    print(f"accountants_agree={agree}")
    print(f"amplified_eps={amplified_eps:.6f}")
    print(f"amplified_delta={amplified_delta:.6g}")
    return 0


def _print_report(report: BoundReport) -> None:
    print(json.dumps(report.to_dict(), sort_keys=True, default=float))


def run_check_bounds_command(args: argparse.Namespace) -> int:
    if args.bound == "all":
        reports = default_bound_grid()
    elif args.bound == "clipped-sgd":
        reports = [check_clipped_sgd_bound(clip=args.clip, lr=args.lr, steps=args.steps, sigma=args.sigma, seed=args.seed)]
    elif args.bound == "masked-sgd":
        reports = [
            check_masked_noisy_sgd_bound(
                retention=args.retention,
                sigma=args.sigma,
                batch_size=args.batch_size,
                steps=args.steps,
                dim=args.dim,
                seed=args.seed,
            )
        ]
    else:
        reports = [
            check_masked_dpsgd_bound(
                retention=args.retention,
                sigma=args.sigma,
                clip=args.clip,
                lr=args.lr,
                batch_size=args.batch_size,
                steps=args.steps,
                dim=args.dim,
                seed=args.seed,
            )
        ]
    for report in reports:
        _print_report(report)
    failed = [report for report in reports if not report.holds]
    stated_failed = [report.name for report in reports if not report.details.get("stated_holds", True)]
    print(f"summary reports={len(reports)} failed={len(failed)} stated_failed={','.join(stated_failed) or 'none'}")
    if stated_failed:
        LOGGER.warning("stated bound exceeded (not asserted): %s", ", ".join(stated_failed))
    LOGGER.info("check-bounds complete: reports=%s failed=%s", len(reports), len(failed))
    if failed:
        failed[0].require()
    return 0


def run_parse_idx_command(args: argparse.Namespace) -> int:
    data = parse_idx(Path(args.path).read_bytes())
    header = data.header
    print(f"magic=0x{header.magic:08x}")
    print(f"dims={','.join(str(size) for size in header.dims)}")
    print(f"shape={','.join(str(size) for size in data.values.shape)}")
    if header.is_images:
        print(f"pixel_min={float(np.min(data.values)):.6f}")
        print(f"pixel_max={float(np.max(data.values)):.6f}")
    else:
        classes = max(10, int(np.max(data.values)) + 1)
        print(f"label_histogram={','.join(str(count) for count in label_histogram(data.values, classes))}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="masked-dpsgd: importance-masked differentially private SGD")
    parser.add_argument("--log-level", default="INFO", help="Logging level (DEBUG/INFO/WARNING/ERROR)")
    subparsers = parser.add_subparsers(dest="command", required=True)

    train_parser = subparsers.add_parser("train", help="Train one configuration and write a metrics file")
    _add_run_flags(train_parser)
    train_parser.set_defaults(handler=run_train_command)

    sweep_parser = subparsers.add_parser("sweep", help="Run one configuration per axis value")
    _add_run_flags(sweep_parser)
    sweep_parser.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sweep_parser.add_argument("--values", required=True, help="Comma-separated axis values, e.g. 0.2,0.4,0.6")
    sweep_parser.add_argument("--output-dir", default="out/sweep")
    sweep_parser.add_argument("--seed-policy", default="shared", choices=SEED_POLICIES)
    sweep_parser.add_argument("--workers", type=int, default=1)
    sweep_parser.set_defaults(handler=run_sweep_command)

    accountant_parser = subparsers.add_parser("accountant", help="Convert between noise multiplier and epsilon")
    accountant_parser.add_argument("--eps", type=float, default=None)
    accountant_parser.add_argument("--sigma", type=float, default=None)
    accountant_parser.add_argument("--delta", type=float, default=1e-5)
    accountant_parser.add_argument("--q", type=float, required=True)
    accountant_parser.add_argument("--steps", type=int, required=True)
    accountant_parser.set_defaults(handler=run_accountant_command)

    bounds_parser = subparsers.add_parser("check-bounds", help="Check convergence bounds on quadratic objectives")
    bounds_parser.add_argument("--bound", default="all", choices=BOUND_NAMES)
    bounds_parser.add_argument("--clip", type=float, default=10.0)
    bounds_parser.add_argument("--lr", type=float, default=0.1)
    bounds_parser.add_argument("--steps", type=int, default=100)
    bounds_parser.add_argument("--sigma", type=float, default=0.0)
    bounds_parser.add_argument("--retention", type=float, default=0.5)
    bounds_parser.add_argument("--batch-size", type=int, default=16)
    bounds_parser.add_argument("--dim", type=int, default=10)
    bounds_parser.add_argument("--seed", type=int, default=0)
    bounds_parser.set_defaults(handler=run_check_bounds_command)

    idx_parser = subparsers.add_parser("parse-idx", help="Inspect an IDX image or label file")
    idx_parser.add_argument("path")
    idx_parser.set_defaults(handler=run_parse_idx_command)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return int(args.handler(args))
    except (ConfigError, PrivacyParameterError, IdxFormatError, CifarFormatError) as exc:
        LOGGER.error("Invalid input: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BoundCheckError as exc:
        LOGGER.error("Bound check failed: %s", exc)
        print(f"bound check failed: lhs={exc.report.lhs!r} rhs={exc.report.rhs!r}", file=sys.stderr)
        return EXIT_BOUND
    except TrainingError as exc:
        LOGGER.error("Training failed: step=%s module=%s error=%s", exc.step, exc.module, exc)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        LOGGER.exception("Unhandled error: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
