"""Command-line entry point: ``fedprune train|compare|sweep|replay``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, parse_config
from .errors import ConfigError, FormatError, InputError
from .federation import build_clients, run_experiment
from .reporting import ComparisonTable, JsonLinesWriter, comparison_row, fairness_summary, round_rows_csv

COMPARE_STRATEGIES = ("fedavg", "fedprune_no_clt", "fedprune")
SWEEP_FRACTIONS = (0.1, 0.3, 0.5, 0.7, 0.9)
OUT_ENV = "FEDPRUNE_OUT"
SCHEMES = {"iid": "iid", "skewed": "skewed_niid", "skewed_niid": "skewed_niid"}


def _timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _run_cell(cfg: ExperimentConfig, out: Path, tag: str):
    clients = build_clients(cfg)
    with JsonLinesWriter(out / f"rounds_{tag}.jsonl") as sink:
        return run_experiment(cfg, clients, on_report=sink)


def run(command: str, cfg: ExperimentConfig, out: Path, strategies: list[str] | None = None) -> dict:
    """Execute one CLI command and write its artifacts under ``out``; returns the manifest."""
    out.mkdir(parents=True, exist_ok=True)
    started = _timestamp()
    scheme = cfg.data.partition
    outputs = []
    csv_parts: list[str] = []
    if command == "train":
        strategies = [cfg.strategy]
        result = _run_cell(cfg, out, cfg.strategy)
        csv_parts.append(round_rows_csv(result.reports, cfg.slow_fraction, scheme))
        outputs.append(f"rounds_{cfg.strategy}.jsonl")
    else:
        strategies = list(strategies or COMPARE_STRATEGIES)
        fractions = [cfg.slow_fraction] if command == "compare" else list(SWEEP_FRACTIONS)
        rows, all_reports = [], []
        for frac in fractions:
            for strategy in strategies:
                cell = dataclasses.replace(cfg, strategy=strategy, slow_fraction=frac)
                tag = strategy if command == "compare" else f"{strategy}_{frac}"
                result = _run_cell(cell, out, tag)
                outputs.append(f"rounds_{tag}.jsonl")
                csv_parts.append(round_rows_csv(result.reports, frac, scheme, header=not csv_parts))
                rows.append(comparison_row(result.reports, frac, scheme, cfg.acc_threshold))
                if command == "compare":
                    all_reports += result.reports
        (out / "comparison.csv").write_text(ComparisonTable(rows).to_csv())
        outputs.append("comparison.csv")
        if command == "compare":
            (out / "fairness.json").write_text(json.dumps(fairness_summary(all_reports).to_dict(), indent=2) + "\n")
            outputs.append("fairness.json")
    (out / "results.csv").write_text("".join(csv_parts))
    outputs.append("results.csv")
    manifest = {
        "command": command,
        "strategies": strategies,
        "config": cfg.to_dict(),
        "seeds": cfg.resolved_seeds(),
        "version": __version__,
        "started": started,
        "finished": _timestamp(),
        "outputs": outputs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file or a run manifest")
    p.add_argument("--strategy", choices=("fedavg", "fedprune", "fedprune_no_clt", "small_model"))
    p.add_argument("--slow-fraction", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    p.add_argument("--partition", choices=tuple(SCHEMES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--clients-per-round", type=int)
    p.add_argument("--num-clients", type=int)
    p.add_argument("--drop-rate", type=float)
    p.add_argument("--mask-update-round", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedprune", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("train", help="run one experiment"))
    for name, text in (("compare", "FedAvg vs FedPrune (with and without CLT)"), ("sweep", "slow-fraction sweep")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        p.add_argument("--strategies", nargs="+", choices=("fedavg", "fedprune", "fedprune_no_clt", "small_model"))
    p = sub.add_parser("replay", help="re-run a recorded manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory for the re-run")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    return {
        "strategy": args.strategy,
        "slow_fraction": args.slow_fraction,
        "rounds": args.rounds,
        "seed": args.seed,
        "epochs": args.epochs,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "clients_per_round": args.clients_per_round,
        "drop_rate": args.drop_rate,
        "mask_update_round": args.mask_update_round,
        "data.num_clients": args.num_clients,
        "data.partition": SCHEMES[args.partition] if args.partition else None,
    }


def _out_dir(flag: str | None) -> Path:
    return Path(flag or os.environ.get(OUT_ENV) or "runs")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            manifest = json.loads(Path(args.manifest).read_text())
            cfg = parse_config(args.manifest)
            command, strategies = manifest["command"], manifest["strategies"]
        else:
            cfg = parse_config(args.config, _overrides(args))
            command, strategies = args.command, getattr(args, "strategies", None)
        out = _out_dir(args.out)
        manifest = run(command, cfg, out, strategies)
    except (ConfigError, InputError) as exc:
        print(f"fedprune: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError, json.JSONDecodeError, KeyError) as exc:
        print(f"fedprune: error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {', '.join(manifest['outputs'])} and manifest.json to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
