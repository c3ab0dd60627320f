"""Fairness summaries, comparison tables and CSV/JSON-lines emission."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .federation import RoundReport

ROUND_COLUMNS = ("round", "strategy", "slow_fraction", "scheme", "train_loss", "acc_mean", "acc_std")
COMPARISON_COLUMNS = ("strategy", "slow_fraction", "scheme", "final_acc_mean", "final_acc_std", "rounds_to_threshold")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_float(text: str) -> float | None:
    return None if text == "" else float(text)


# ---------------------------------------------------------------------------
# Fairness


@dataclass(frozen=True)
class FairnessRow:
    strategy: str
    acc_mean: float
    acc_std: float


@dataclass(frozen=True)
class FairnessSummary:
    rows: list[FairnessRow]

    def row(self, strategy: str) -> FairnessRow:
        return next(r for r in self.rows if r.strategy == strategy)

    def more_fair(self, a: str, b: str) -> bool:
        """True when ``a``'s per-client accuracy std is strictly below ``b``'s."""
        return self.row(a).acc_std < self.row(b).acc_std

    @property
    def most_fair(self) -> list[str]:
        best = min(r.acc_std for r in self.rows)
        return [r.strategy for r in self.rows if r.acc_std == best]

    def to_dict(self) -> dict:
        return {
            "rows": [vars(r) for r in self.rows],
            "most_fair": self.most_fair,
        }


def fairness_summary(reports: Iterable[RoundReport]) -> FairnessSummary:
    """Final evaluated round's mean and std of per-client accuracy, per strategy."""
    last: dict[str, RoundReport] = {}
    for r in reports:
        if r.acc_mean is not None:
            last[r.strategy] = r
    if not last:
        raise ValueError("no evaluated round reports")
    return FairnessSummary([FairnessRow(s, r.acc_mean, r.acc_std) for s, r in last.items()])


# ---------------------------------------------------------------------------
# Comparison table


def rounds_to_threshold(reports: list[RoundReport], threshold: float) -> int | None:
    """First round whose mean accuracy exceeds ``threshold``."""
    return next((r.round for r in reports if r.acc_mean is not None and r.acc_mean > threshold), None)


@dataclass(frozen=True)
class ComparisonRow:
    strategy: str
    slow_fraction: float
    scheme: str
    final_acc_mean: float
    final_acc_std: float
    rounds_to_threshold: int | None


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]

    def __post_init__(self):
        keys = [(r.strategy, r.slow_fraction, r.scheme) for r in self.rows]
        if len(set(keys)) != len(keys):
            raise ValueError("comparison rows must be unique per (strategy, slow_fraction, scheme)")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COMPARISON_COLUMNS)
        for r in self.rows:
            writer.writerow([_fmt(getattr(r, c)) for c in COMPARISON_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> ComparisonTable:
        reader = csv.DictReader(io.StringIO(text))
        rows = []
        for rec in reader:
            rtt = rec["rounds_to_threshold"]
            rows.append(
                ComparisonRow(
                    rec["strategy"],
                    float(rec["slow_fraction"]),
                    rec["scheme"],
                    float(rec["final_acc_mean"]),
                    float(rec["final_acc_std"]),
                    None if rtt == "" else int(rtt),
                )
            )
        return cls(rows)


def comparison_row(reports: list[RoundReport], slow_fraction: float, scheme: str, threshold: float) -> ComparisonRow:
    final = [r for r in reports if r.acc_mean is not None][-1]
    return ComparisonRow(
        final.strategy, slow_fraction, scheme, final.acc_mean, final.acc_std, rounds_to_threshold(reports, threshold)
    )


# ---------------------------------------------------------------------------
# Per-round outputs


def round_rows_csv(reports: Iterable[RoundReport], slow_fraction: float, scheme: str, header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(ROUND_COLUMNS)
    for r in reports:
        loss = None if r.train_loss != r.train_loss else r.train_loss
        writer.writerow(
            [_fmt(v) for v in (r.round, r.strategy, slow_fraction, scheme, loss, r.acc_mean, r.acc_std)]
        )
    return buf.getvalue()


def read_round_rows(text: str) -> list[dict]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        out.append(
            {
                "round": int(rec["round"]),
                "strategy": rec["strategy"],
                "slow_fraction": float(rec["slow_fraction"]),
                "scheme": rec["scheme"],
                "train_loss": _parse_float(rec["train_loss"]),
                "acc_mean": _parse_float(rec["acc_mean"]),
                "acc_std": _parse_float(rec["acc_std"]),
            }
        )
    return out


class JsonLinesWriter:
    """Appends one JSON object per round report, flushing as it goes."""

    def __init__(self, path: str | Path):
        self._fh = open(path, "w")

    def __call__(self, report: RoundReport) -> None:
        self._fh.write(json.dumps(report.to_json_dict(), sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
