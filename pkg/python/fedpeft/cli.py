"""``fedpeft`` command line: run, ablate, sweep, clients, methods and cost.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .config import ExperimentConfig, apply_overrides, load_config, parse_override
from .costs import (
    PRESETS,
    OpsConvention,
    PeftMethod,
    PruningScope,
    comm_for,
    cost_grid,
    format_cost_table,
    get_preset,
    ops_for,
    reconciliation_report,
    toy_arch,
    write_cost_csv,
)
from .errors import ConfigError, FedPeftError, InputError
from .logs import configure_logging
from .orchestrator import (
    STREAM_ADAPTER,
    STREAM_BACKBONE,
    STREAM_CLIENT,
    STREAM_DATA,
    STREAM_PARTITION,
    STREAM_PRUNING,
    STREAM_SELECTION,
    ExperimentResult,
    run_experiment,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

RUN_ROOT_ENV = "FEDPEFT_RUN_ROOT"
MANIFEST_FORMAT_VERSION = 1
ABLATION_PRUNING = ("none", "random", "importance")
ABLATION_SELECTION = ("random", "loss")
ABLATION_DEFAULT_SPARSITY = 0.5
# Baselines merge with FedAvg; importance-pruned cells merge head blocks by importance.
ABLATION_AGGREGATION = {"none": "fedavg", "random": "fedavg", "importance": "weighted"}
# FedAvg baseline against importance pruning with loss-based selection and weighted merging.
COMPARISON_VARIANTS = {
    "fedavg": {"pruning.mode": "none", "federation.selection": "random", "aggregation.mode": "fedavg"},
    "pruned": {"pruning.mode": "importance", "federation.selection": "loss", "aggregation.mode": "weighted"},
}
COMPARISON_DEFAULT_SPARSITY = 0.9
COMPARISON_COLUMNS = ("variant", "sparsity", "final_accuracy", "convergence_round", "bytes", "ops")
TOY_PROMPT_TOKENS = 4


class UsageError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    """Everything needed to reproduce a run directory."""

    command: str
    config: dict[str, Any]
    overrides: dict[str, Any]
    seeds: dict[str, Any]
    started_at: str = field(default_factory=_now)
    finished_at: str | None = None
    status: str = "running"
    error: str | None = None
    outputs: dict[str, str] = field(default_factory=dict)
    round_wall_times: list[float] = field(default_factory=list)
    tool_version: str = __version__
    format_version: int = MANIFEST_FORMAT_VERSION

    @classmethod
    def for_config(cls, command: str, config: ExperimentConfig, overrides: dict[str, Any]) -> "RunManifest":
        seeds = {
            "experiment": config.experiment.seed,
            "streams": {
                "backbone": [STREAM_BACKBONE],
                "adapter": [STREAM_ADAPTER],
                "data": [STREAM_DATA],
                "partition": [STREAM_PARTITION],
                "selection": [STREAM_SELECTION],
                "client": [STREAM_CLIENT, "round", "client"],
                "pruning": [STREAM_PRUNING, "round", "client"],
            },
        }
        return cls(command=command, config=config.to_dict(), overrides=dict(overrides), seeds=seeds)

    def finish(self, status: str, error: str | None = None) -> None:
        self.status = status
        self.error = error
        self.finished_at = _now()

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _add_override_flags(parser: argparse.ArgumentParser, sweep: bool = False) -> None:
    parser.add_argument("config", help="experiment TOML file")
    parser.add_argument("--rounds", type=int, help="number of federated rounds")
    if not sweep:
        parser.add_argument("--sparsity", type=float, help="fraction of heads pruned per client")
    parser.add_argument("--selection", choices=ABLATION_SELECTION, help="client selection mode")
    parser.add_argument("--aggregation", choices=("fedavg", "weighted"), help="server merge mode")
    parser.add_argument("--pruning", choices=ABLATION_PRUNING, help="head pruning mode")
    parser.add_argument("--seed", type=int, help="experiment seed")
    parser.add_argument("--threads", type=int, help="client training threads")
    parser.add_argument("--set", dest="assignments", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config value (repeatable)")
    parser.add_argument("--run-dir", type=Path, help=f"output directory (default: ${RUN_ROOT_ENV}/<name>-<time>)")


_FLAG_KEYS = {
    "rounds": "experiment.rounds",
    "sparsity": "pruning.sparsity",
    "selection": "federation.selection",
    "aggregation": "aggregation.mode",
    "pruning": "pruning.mode",
    "seed": "experiment.seed",
    "threads": "federation.threads",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedpeft", description="Federated PEFT simulator with head pruning")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="trace, debug, info, warn or error (default: from config)")
    parser.add_argument("--log-json", action="store_true", help="emit JSON log lines")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    _add_override_flags(run)
    run.set_defaults(handler=cmd_run)

    ablate = sub.add_parser("ablate", help="pruning x selection grid on one config")
    _add_override_flags(ablate)
    ablate.set_defaults(handler=cmd_ablate)

    sweep = sub.add_parser("sweep", help="final accuracy and cost over a sparsity grid")
    _add_override_flags(sweep, sweep=True)
    sweep.add_argument("--sparsity", dest="sparsities", required=True, help="comma-separated sparsities, e.g. 0,0.5,0.9")
    sweep.set_defaults(handler=cmd_sweep)

    clients = sub.add_parser("clients", help="FedAvg baseline vs importance pruning over client counts")
    _add_override_flags(clients)
    clients.add_argument("--clients", dest="client_counts", required=True, metavar="N/K,...",
                         help="total/per-round client counts, e.g. 10/2,100/2")
    clients.set_defaults(handler=cmd_clients)

    methods = sub.add_parser("methods", help="PEFT methods on the simulator's model: trained LoRA ranks and cost rows")
    _add_override_flags(methods)
    methods.add_argument("--rank", dest="ranks", default=None, help="comma-separated LoRA ranks (default: config rank)")
    methods.add_argument("--prompt-tokens", type=int, default=TOY_PROMPT_TOKENS,
                         help=f"prompt length for the prompt methods (default: {TOY_PROMPT_TOKENS})")
    methods.set_defaults(handler=cmd_methods)

    cost = sub.add_parser("cost", help="training OPs and upload bytes for a preset")
    cost.add_argument("arch", help=f"preset: {', '.join(PRESETS)}")
    cost.add_argument("method", help="fft, lora, ia3, prompt-tuning, p-tuning, or all to compare every method")
    cost.add_argument("--sparsity", dest="sparsities", default="0", help="comma-separated sparsities (default: 0)")
    cost.add_argument("--rank", type=int, help="LoRA rank (default: 16)")
    cost.add_argument("--seq-len", type=int, help="token length T (default: 512)")
    cost.add_argument("--prompt-tokens", type=int, help="prompt length T_p (default: 100)")
    cost.add_argument("--scope", choices=[s.value for s in PruningScope], default=PruningScope.TRAINABLE.value)
    cost.add_argument("--csv", type=Path, help="also write the long-format cost table here")
    cost.add_argument("--reconcile", action="store_true", help="print the T5-Small reconciliation report")
    cost.set_defaults(handler=cmd_cost)
    return parser


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"not a comma-separated list of numbers: {text!r}") from None


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"not a comma-separated list of integers: {text!r}") from None


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    for assignment in args.assignments:
        key, value = parse_override(assignment)
        overrides[key] = value
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return overrides


def _resolve_config(args: argparse.Namespace) -> tuple[ExperimentConfig, dict[str, Any]]:
    overrides = _overrides(args)
    config = apply_overrides(load_config(args.config), overrides)
    configure_logging(args.log_level or config.logging.level, args.log_json or config.logging.json)
    return config, overrides


def _run_dir(args: argparse.Namespace, config: ExperimentConfig) -> Path:
    if args.run_dir is not None:
        return args.run_dir
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    candidate = root / f"{config.experiment.name}-{stamp}"
    suffix = 1
    while candidate.exists():
        candidate = root / f"{config.experiment.name}-{stamp}-{suffix}"
        suffix += 1
    return candidate


def _execute(command: str, config: ExperimentConfig, overrides: dict[str, Any], run_dir: Path) -> ExperimentResult:
    """One experiment with its manifest; the manifest records failures too."""
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.for_config(command, config, overrides)
    manifest_path = run_dir / "manifest.json"
    manifest.outputs = {
        "metrics": str(run_dir / "metrics.jsonl"),
        "summary": str(run_dir / "summary.csv"),
        "checkpoints": str(run_dir / "checkpoints"),
    }
    manifest.write(manifest_path)

    def record_wall_time(metrics) -> None:
        manifest.round_wall_times.append(metrics.wall_time)

    try:
        result = run_experiment(config, run_dir, on_round=record_wall_time)
    except Exception as exc:
        manifest.finish("failed", f"{type(exc).__name__}: {exc}")
        manifest.write(manifest_path)
        raise
    if result.checkpoint_path is not None:
        manifest.outputs["final_checkpoint"] = str(result.checkpoint_path)
    manifest.finish("completed")
    manifest.write(manifest_path)
    return result


def cmd_run(args: argparse.Namespace) -> int:
    config, overrides = _resolve_config(args)
    run_dir = _run_dir(args, config)
    result = _execute("run", config, overrides, run_dir)
    converged = result.convergence_round if result.convergence_round is not None else "not reached"
    print(
        f"{config.experiment.name}: {len(result.metrics)} rounds, final accuracy {result.final_accuracy:.4f}, "
        f"convergence round {converged}, uploaded {result.total_bytes} bytes -> {run_dir}"
    )
    return EXIT_OK


def _write_rows(path: Path, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)
    return path


def _result_row(result: ExperimentResult) -> list[Any]:
    converged = "" if result.convergence_round is None else result.convergence_round
    return [repr(result.final_accuracy), converged, result.total_bytes, repr(result.total_ops)]


def cmd_ablate(args: argparse.Namespace) -> int:
    config, overrides = _resolve_config(args)
    run_dir = _run_dir(args, config)
    sparsity = config.pruning.sparsity or ABLATION_DEFAULT_SPARSITY
    rows = []
    for pruning in ABLATION_PRUNING:
        for selection in ABLATION_SELECTION:
            cell_sparsity = 0.0 if pruning == "none" else sparsity
            cell = {
                "pruning.mode": pruning,
                "pruning.sparsity": cell_sparsity,
                "federation.selection": selection,
                "aggregation.mode": ABLATION_AGGREGATION[pruning],
            }
            cell_config = apply_overrides(config, cell)
            logger.info(
                "ablation cell pruning=%s selection=%s aggregation=%s", pruning, selection, ABLATION_AGGREGATION[pruning]
            )
            result = _execute("ablate", cell_config, {**overrides, **cell}, run_dir / f"{pruning}-{selection}")
            rows.append([pruning, selection, ABLATION_AGGREGATION[pruning], repr(cell_sparsity), *_result_row(result)])
    path = _write_rows(
        run_dir / "ablation.csv",
        ("pruning", "selection", "aggregation", "sparsity", "final_accuracy", "convergence_round", "bytes", "ops"),
        rows,
    )
    for row in rows:
        print(f"{row[0]:<11} {row[1]:<7} {row[2]:<8} acc={float(row[4]):.4f} conv={row[5] or '-':<4} bytes={row[6]}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    sparsities = _parse_floats(args.sparsities)
    if not sparsities:
        raise UsageError("--sparsity needs at least one value")
    config, overrides = _resolve_config(args)
    run_dir = _run_dir(args, config)
    pruning = config.pruning.mode if config.pruning.mode != "none" else "importance"
    rows = []
    for sparsity in sparsities:
        cell = {"pruning.mode": pruning, "pruning.sparsity": sparsity}
        result = _execute("sweep", apply_overrides(config, cell), {**overrides, **cell}, run_dir / f"sparsity-{sparsity:g}")
        rows.append([repr(sparsity), *_result_row(result)])
    path = _write_rows(
        run_dir / "sweep.csv", ("sparsity", "final_accuracy", "convergence_round", "bytes", "ops"), rows
    )
    print(f"wrote {path}")
    return EXIT_OK


def _parse_client_counts(text: str) -> list[tuple[int, int]]:
    counts = []
    for part in text.split(","):
        if not part.strip():
            continue
        total, sep, per_round = part.partition("/")
        try:
            counts.append((int(total), int(per_round)))
        except ValueError:
            raise UsageError(f"client counts are written N/K, got {part.strip()!r}") from None
        if not sep:
            raise UsageError(f"client counts are written N/K, got {part.strip()!r}")
    if not counts:
        raise UsageError("--clients needs at least one N/K pair")
    return counts


def _comparison_sparsity(config: ExperimentConfig) -> float:
    return config.pruning.sparsity or COMPARISON_DEFAULT_SPARSITY


def _run_variants(
    command: str,
    config: ExperimentConfig,
    overrides: dict[str, Any],
    cell_dir: Path,
    base: dict[str, Any],
) -> list[list[Any]]:
    """Both comparison variants on ``config`` with ``base`` applied; one row each."""
    sparsity = _comparison_sparsity(config)
    rows = []
    for variant, settings in COMPARISON_VARIANTS.items():
        cell_sparsity = 0.0 if settings["pruning.mode"] == "none" else sparsity
        cell = {**base, **settings, "pruning.sparsity": cell_sparsity}
        result = _execute(command, apply_overrides(config, cell), {**overrides, **cell}, cell_dir / variant)
        rows.append([variant, repr(cell_sparsity), *_result_row(result)])
    return rows


def cmd_clients(args: argparse.Namespace) -> int:
    counts = _parse_client_counts(args.client_counts)
    config, overrides = _resolve_config(args)
    run_dir = _run_dir(args, config)
    rows = []
    for n_clients, per_round in counts:
        base = {"federation.n_clients": n_clients, "federation.clients_per_round": per_round}
        logger.info("client configuration %d/%d", n_clients, per_round)
        for row in _run_variants("clients", config, overrides, run_dir / f"{n_clients}-{per_round}", base):
            rows.append([n_clients, per_round, *row])
    path = _write_rows(run_dir / "clients.csv", ("n_clients", "clients_per_round", *COMPARISON_COLUMNS), rows)
    for row in rows:
        print(f"{row[0]}/{row[1]:<4} {row[2]:<7} acc={float(row[4]):.4f} conv={row[5] or '-':<4} bytes={row[6]}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_methods(args: argparse.Namespace) -> int:
    config, overrides = _resolve_config(args)
    ranks = _parse_ints(args.ranks) if args.ranks is not None else [config.model.rank]
    if not ranks:
        raise UsageError("--rank needs at least one value")
    run_dir = _run_dir(args, config)
    sparsity = _comparison_sparsity(config)
    columns = ("method", "rank", *COMPARISON_COLUMNS, "comm_bytes", "ops_per_sequence")
    rows = []
    for rank in ranks:
        ranked = apply_overrides(config, {"model.rank": rank})
        arch = toy_arch(ranked.model)
        logger.info("method cell lora rank=%d", rank)
        for row in _run_variants("methods", config, overrides, run_dir / f"rank-{rank}", {"model.rank": rank}):
            cell_sparsity = float(row[1])
            report = ops_for(arch, PeftMethod.LORA, cell_sparsity, OpsConvention.STANDARD_MAC)
            rows.append([PeftMethod.LORA.value, rank, *row, report.comm_bytes, repr(report.total)])
    # The remaining methods are not trained by the simulator; their rows carry costs only.
    arch = toy_arch(config.model).with_(prompt_tokens=args.prompt_tokens)
    for method in PeftMethod:
        if method is PeftMethod.LORA:
            continue
        for variant, cell_sparsity in (("fedavg", 0.0), ("pruned", sparsity)):
            report = ops_for(arch, method, cell_sparsity, OpsConvention.STANDARD_MAC)
            rows.append([method.value, "", variant, repr(cell_sparsity), "", "", "", "",
                         comm_for(arch, method, cell_sparsity), repr(report.total)])
    path = _write_rows(run_dir / "methods.csv", columns, rows)
    for row in rows:
        accuracy = f"{float(row[4]):.4f}" if row[4] else "-"
        print(f"{row[0]:<13} r={row[1] or '-':<3} {row[2]:<7} acc={accuracy:<6} comm={row[8]} ops={float(row[9]):.0f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_cost(args: argparse.Namespace) -> int:
    configure_logging(args.log_level or "info", args.log_json)
    try:
        arch = get_preset(args.arch)
    except InputError as exc:
        raise UsageError(str(exc)) from None
    changes = {
        name: value
        for name, value in (("rank", args.rank), ("seq_len", args.seq_len), ("prompt_tokens", args.prompt_tokens))
        if value is not None
    }
    if changes:
        arch = arch.with_(**changes)
    try:
        methods = [m.value for m in PeftMethod] if args.method.lower() == "all" else [args.method]
        reports = cost_grid([arch], methods, _parse_floats(args.sparsities), args.scope)
    except InputError as exc:
        raise UsageError(str(exc)) from None
    print(format_cost_table(reports))
    if args.csv is not None:
        write_cost_csv(reports, args.csv)
        print(f"wrote {args.csv}")
    if args.reconcile:
        print()
        print(reconciliation_report().to_text())
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.handler(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FedPeftError as exc:
        logger.error("run failed: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:
        logger.exception("unexpected failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
