"""CLI entrypoint: gen-data, train, check, diagnose.

stdout carries only machine-readable JSON or CSV; everything for humans goes
to stderr through `setnet.display`.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, Field, ValidationError

import setnet
from setnet import display
from setnet.config import GenSpec, ModelConfig, RunConfig, Settings, canonical_json, load_run_config, load_settings
from setnet.data import generate, read_dataset, write_dataset
from setnet.diagnostics import mean_ratio, run_profile_sweep
from setnet.errors import (
    CheckpointError,
    ConfigError,
    DatasetParseError,
    DivergenceError,
    SetNetError,
)
from setnet.models import build, save_checkpoint
from setnet.suites import SuiteContext, get_registry
from setnet.suites.builtin import register_builtin_suites
from setnet.training import train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

TASKS = {"normal-var": "normal_var", "toy-shapes": "toy_shapes"}
FAMILIES = {
    "deepsets": "deep_sets",
    "deepsets-pp": "deep_sets_pp",
    "set-transformer": "set_transformer",
    "set-transformer-pp": "set_transformer_pp",
}
PROFILE_CSV_HEADER = "family,depth,seed,layer_index,grad_norm"
WALL_TIME_OFF_NOTE = "not recorded; the column holds 0.0 (pass --wall-time to measure)"


class RunManifest(BaseModel):
    """Record of one command: resolved config, artifacts and their hashes."""

    command: str
    config: dict[str, Any]
    config_sha256: str
    artifacts: dict[str, str] = Field(default_factory=dict)
    versions: dict[str, str] = Field(default_factory=dict)
    seed: int
    notes: dict[str, str] = Field(default_factory=dict)
    wall_seconds: float = 0.0

    @property
    def digest(self) -> str:
        """SHA-256 of everything except the wall time."""
        return hashlib.sha256(canonical_json(self.model_dump(mode="json", exclude={"wall_seconds"}))).hexdigest()

    def to_json(self) -> str:
        payload = self.model_dump(mode="json")
        payload["digest"] = self.digest
        return json.dumps(payload, sort_keys=True, indent=2)


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict[str, str]:
    return {"setnet": setnet.__version__, "numpy": np.__version__, "python": platform.python_version()}


def make_manifest(
    command: str,
    config: dict[str, Any],
    artifacts: Sequence[Path],
    seed: int,
    wall_seconds: float,
    notes: dict[str, str] | None = None,
) -> RunManifest:
    return RunManifest(
        command=command,
        config=config,
        config_sha256=hashlib.sha256(canonical_json(config)).hexdigest(),
        artifacts={Path(p).name: _sha256(p) for p in artifacts},
        versions=_versions(),
        seed=seed,
        notes=notes or {},
        wall_seconds=wall_seconds,
    )


def _emit(manifest: RunManifest, path: Path) -> None:
    text = manifest.to_json()
    Path(path).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_gen_data(args: argparse.Namespace, settings: Settings) -> int:
    start = time.perf_counter()
    spec = GenSpec(
        task=TASKS[args.task],
        n_sets=args.n_sets,
        set_size=args.set_size,
        seed=args.seed,
        n_classes=args.n_classes,
        noise_scale=args.noise_scale,
    )
    dataset = generate(spec)
    out = Path(args.out)
    write_dataset(dataset, out)
    display.print_success(f"wrote {dataset.n_sets} sets of {dataset.set_size} x {dataset.dim} to {out}")
    manifest = make_manifest(
        "gen-data", spec.model_dump(mode="json"), [out], spec.seed, time.perf_counter() - start
    )
    _emit(manifest, out.with_name(out.name + ".manifest.json"))
    return EXIT_OK


def _apply_train_overrides(run: RunConfig, args: argparse.Namespace) -> RunConfig:
    updates = {
        key: value
        for key, value in {
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "learning_rate": args.learning_rate,
            "seed": args.seed,
        }.items()
        if value is not None
    }
    if args.wall_time:
        updates["record_wall_time"] = True
    train_config = run.train.model_validate({**run.train.model_dump(), **updates})
    return run.model_copy(update={"train": train_config})


def cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    start = time.perf_counter()
    run = _apply_train_overrides(load_run_config(args.config), args)
    train_path = args.train_data or run.data.train
    test_path = args.test_data or run.data.test
    if train_path is None or test_path is None:
        raise ConfigError("data", "train and test datasets are required (--train-data/--test-data or data.*)")

    model = build(run.model)
    train_ds, test_ds = read_dataset(train_path), read_dataset(test_path)
    display.print_banner("train", {
        "family": model.config.family,
        "depth": model.config.encoder_depth,
        "parameters": model.num_parameters,
        "train sets": train_ds.n_sets,
        "test sets": test_ds.n_sets,
        "epochs": run.train.epochs,
    })

    def on_epoch(row: Any) -> None:
        display.print_epoch(row.epoch, row.train_loss, row.test_loss, row.grad_norm_first, row.grad_norm_last)

    result = train(model, train_ds, test_ds, run.train, on_epoch=on_epoch)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path, checkpoint_path = out_dir / "metrics.csv", out_dir / "model.setn"
    result.history.write_csv(metrics_path)
    save_checkpoint(result.model, checkpoint_path)

    resolved = {
        "model": result.model.config.model_dump(mode="json"),
        "train": run.train.model_dump(mode="json"),
        "data": {"train": _sha256(train_path), "test": _sha256(test_path)},
    }
    notes = {} if run.train.record_wall_time else {"metrics.wall_seconds": WALL_TIME_OFF_NOTE}
    manifest = make_manifest(
        "train", resolved, [metrics_path, checkpoint_path], run.train.seed, time.perf_counter() - start, notes
    )
    _emit(manifest, out_dir / "manifest.json")

    if result.history.diverged:
        display.print_error(f"training diverged: {result.history.divergence_reason}")
        return EXIT_DIVERGED
    display.print_success(f"final test loss {result.history.final_test_loss}")
    return EXIT_OK


def cmd_check(args: argparse.Namespace, settings: Settings) -> int:
    registry = get_registry()
    config: ModelConfig | None = None
    if args.config is not None:
        config = load_run_config(args.config).model
    reports = registry.run(args.suite, SuiteContext(config=config, diagnostics=settings.diagnostics))
    passed = all(r.passed for r in reports)
    display.print_report_table(reports)
    print(json.dumps(
        {"suite": args.suite, "passed": passed, "reports": [r.to_dict() for r in reports]},
        sort_keys=True,
        indent=2,
    ))
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def _int_list(text: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def cmd_diagnose(args: argparse.Namespace, settings: Settings) -> int:
    start = time.perf_counter()
    family = FAMILIES[args.family]
    base = ModelConfig(
        family=family,
        input_dim=1,
        hidden_dim=args.hidden_dim,
        heads=args.heads,
        inducing_points=args.inducing_points,
        wq_scale=args.wq_scale,
    )
    configs = [base.model_copy(update={"encoder_depth": depth}).resolve() for depth in args.depths]
    spec = GenSpec(task="normal_var", n_sets=args.n_sets, set_size=args.set_size, seed=args.data_seed)
    dataset = generate(spec)

    profiles = run_profile_sweep(
        configs, dataset.batch(), dataset.targets, args.seeds, threads=settings.runtime.threads
    )

    lines = [PROFILE_CSV_HEADER]
    for profile in profiles:
        for layer_index, _, norm in profile.layer_rows():
            lines.append(f"{args.family},{profile.depth},{profile.seed},{layer_index},{norm!r}")
    csv_text = "\n".join(lines) + "\n"

    summary = [
        (args.family, depth, mean_ratio(p for p in profiles if p.depth == depth)) for depth in args.depths
    ]
    display.print_profile_summary(summary)

    if args.out is None:
        sys.stdout.write(csv_text)
        return EXIT_OK
    out = Path(args.out)
    out.write_text(csv_text, encoding="utf-8")
    resolved = {
        "model": base.model_dump(mode="json"),
        "depths": args.depths,
        "seeds": args.seeds,
        "data": spec.model_dump(mode="json"),
    }
    manifest = make_manifest("diagnose", resolved, [out], args.data_seed, time.perf_counter() - start)
    _emit(manifest, out.with_name(out.name + ".manifest.json"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="setnet",
        description="Deep Sets / Set Transformer toolkit with gradient diagnostics",
    )
    parser.add_argument("--settings", type=Path, help="Path to config.yaml")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Generate a synthetic SETD dataset")
    gen.add_argument("--task", choices=sorted(TASKS), required=True)
    gen.add_argument("--n-sets", type=int, required=True)
    gen.add_argument("--set-size", type=int, required=True)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--n-classes", type=int, default=4, help="toy-shapes classes (<= 4)")
    gen.add_argument("--noise-scale", type=float, default=0.05, help="toy-shapes point noise")
    gen.set_defaults(handler=cmd_gen_data)

    tr = sub.add_parser("train", help="Train a model from a run config")
    tr.add_argument("--config", type=Path, required=True, help="JSON or YAML run config")
    tr.add_argument("--train-data", type=Path)
    tr.add_argument("--test-data", type=Path)
    tr.add_argument("--out-dir", type=Path, required=True)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--learning-rate", type=float)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--wall-time", action="store_true", help="Record per-epoch wall time in the CSV")
    tr.set_defaults(handler=cmd_train)

    ck = sub.add_parser("check", help="Run a diagnostics suite; exit 0 iff every check passes")
    ck.add_argument("--suite", required=True)
    ck.add_argument("--config", type=Path, help="Run config providing the model under test")
    ck.set_defaults(handler=cmd_check)

    dg = sub.add_parser("diagnose", help="Per-layer gradient norms across depths and seeds")
    dg.add_argument("--family", choices=sorted(FAMILIES), required=True)
    dg.add_argument("--depths", type=_int_list, required=True)
    dg.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    dg.add_argument("--out", type=Path, help="CSV path (stdout when omitted)")
    dg.add_argument("--hidden-dim", type=int, default=64)
    dg.add_argument("--heads", type=int, default=4)
    dg.add_argument("--inducing-points", type=int, default=16)
    dg.add_argument("--wq-scale", type=float, default=1.0)
    dg.add_argument("--n-sets", type=int, default=16)
    dg.add_argument("--set-size", type=int, default=50)
    dg.add_argument("--data-seed", type=int, default=0)
    dg.set_defaults(handler=cmd_diagnose)
    return parser


def _validation_keys(error: ValidationError) -> str:
    return ", ".join(".".join(str(part) for part in e["loc"]) or "<root>" for e in error.errors())


def run(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, dispatch, and map failures onto exit codes."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    handler: Callable[[argparse.Namespace, Settings], int] = args.handler
    try:
        settings = load_settings(args.settings)
        display.setup_logging("DEBUG" if args.verbose else settings.runtime.log_level)
        register_builtin_suites()
        return handler(args, settings)
    except ValidationError as e:
        display.print_error(f"invalid configuration keys: {_validation_keys(e)}")
        return EXIT_USAGE
    except ConfigError as e:
        display.print_error(str(e))
        return EXIT_USAGE
    except (DatasetParseError, CheckpointError, OSError) as e:
        display.print_error(str(e))
        return EXIT_IO
    except DivergenceError as e:
        display.print_error(str(e))
        return EXIT_DIVERGED
    except SetNetError as e:
        display.print_error(str(e))
        return EXIT_USAGE


def main() -> None:
    """CLI entrypoint."""
    sys.exit(run())


if __name__ == "__main__":
    main()
