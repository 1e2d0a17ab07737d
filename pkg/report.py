"""
Comparison reports over trace files.

Runs are grouped by (algorithm, gamma).  Each group reports the seed-mean
final rolling accuracy, the rise time of the seed-mean rolling curve and the
seed-mean final test accuracy; every pair of groups gets accuracy and
rise-time deltas.
"""

from __future__ import annotations

import itertools
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import Algorithm, ReportError
from metrics import rise_time
from round_trace import RoundTrace

logger = logging.getLogger(__name__)

TRACE_PATTERN = re.compile(
    r"^trace_(?P<algo>[A-Za-z]+)_gamma(?P<gamma>[0-9.eE+-]+)_seed(?P<seed>\d+)\.csv$"
)

_ALGO_ORDER = {a: i for i, a in enumerate(Algorithm)}


def format_gamma(gamma: float) -> str:
    return f"{gamma:.6g}"


def trace_filename(algorithm: Algorithm, gamma: float, seed: int) -> str:
    return f"trace_{algorithm.value}_gamma{format_gamma(gamma)}_seed{seed}.csv"


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------

@dataclass
class LabeledTrace:
    """One run's trace plus the keys it is grouped by."""

    algorithm: Algorithm
    gamma: float
    seed: int
    traces: List[RoundTrace]
    path: Optional[Path] = None

    @property
    def rounds(self) -> int:
        return len(self.traces)

    @property
    def rolling(self) -> List[float]:
        return [t.rolling_acc for t in self.traces]


def parse_trace_name(name: str) -> Tuple[Algorithm, float, int]:
    m = TRACE_PATTERN.match(name)
    if m is None:
        raise ReportError(f"not a trace file name: {name}")
    return Algorithm.parse(m["algo"]), float(m["gamma"]), int(m["seed"])


def load_trace_dir(directory: Union[str, Path]) -> List[LabeledTrace]:
    """Every ``trace_*.csv`` in ``directory``, in file-name order."""
    from export_manager import read_trace_csv

    directory = Path(directory)
    if not directory.is_dir():
        raise ReportError(f"{directory} is not a directory")
    out = []
    for path in sorted(directory.glob("trace_*.csv")):
        algo, gamma, seed = parse_trace_name(path.name)
        out.append(LabeledTrace(algo, gamma, seed, read_trace_csv(path), path))
    return out


def load_registry_runs(experiment: str, db_path: Union[str, Path]) -> List[LabeledTrace]:
    """Every run of ``experiment`` stored in the run registry at ``db_path``."""
    import db

    if not Path(db_path).is_file():
        raise ReportError(f"no run registry at {db_path}")
    db.init_db(db_path)
    out = []
    for meta in db.load_runs(experiment):
        traces = db.load_trace(meta["run_id"])
        path = Path(meta["trace_path"]) if meta["trace_path"] else None
        out.append(LabeledTrace(Algorithm.parse(meta["algorithm"]), meta["gamma"], meta["seed"], traces, path))
    logger.debug("loaded %d runs of %s from %s", len(out), experiment, db_path)
    return out


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class ReportRow:
    algorithm: str
    gamma: float
    runs: int
    rounds: int
    final_rolling_acc: float
    rise_time: Optional[int]
    final_test_acc: float
    seeds: List[int] = field(default_factory=list)

    @property
    def label(self) -> str:
        if Algorithm.parse(self.algorithm).has_server_learning:
            return f"{self.algorithm}(gamma={format_gamma(self.gamma)})"
        return self.algorithm

    def to_dict(self) -> dict:
        return {
            "label": self.label, "algorithm": self.algorithm, "gamma": self.gamma,
            "runs": self.runs, "rounds": self.rounds, "seeds": list(self.seeds),
            "final_rolling_acc": self.final_rolling_acc, "rise_time": self.rise_time,
            "final_test_acc": self.final_test_acc,
        }


@dataclass
class PairDelta:
    first: str
    second: str
    accuracy_delta: float
    rise_time_delta: Optional[int]

    def to_dict(self) -> dict:
        return {"first": self.first, "second": self.second,
                "accuracy_delta": self.accuracy_delta, "rise_time_delta": self.rise_time_delta}


@dataclass
class ComparisonReport:
    rows: List[ReportRow]
    deltas: List[PairDelta]
    rounds: int

    def best_row(self) -> Optional[ReportRow]:
        scored = [r for r in self.rows if not math.isnan(r.final_rolling_acc)]
        return max(scored, key=lambda r: r.final_rolling_acc) if scored else None

    def row(self, algorithm: Union[str, Algorithm], gamma: Optional[float] = None) -> ReportRow:
        algo = Algorithm.parse(algorithm).value
        for r in self.rows:
            if r.algorithm == algo and (gamma is None or math.isclose(r.gamma, gamma)):
                return r
        raise KeyError(f"no row for {algo} gamma={gamma}")

    def to_dict(self) -> dict:
        return {"rounds": self.rounds,
                "rows": [r.to_dict() for r in self.rows],
                "deltas": [d.to_dict() for d in self.deltas]}

    def to_text(self) -> str:
        lines = [f"{'config':<22}{'runs':>5}{'roll_acc':>10}{'rise':>6}{'test_acc':>10}"]
        for r in self.rows:
            rise = "-" if r.rise_time is None else str(r.rise_time)
            lines.append(f"{r.label:<22}{r.runs:>5}{r.final_rolling_acc:>10.4f}{rise:>6}"
                         f"{r.final_test_acc:>10.4f}")
        if self.deltas:
            lines.append("")
            for d in self.deltas:
                rise = "-" if d.rise_time_delta is None else f"{d.rise_time_delta:+d}"
                lines.append(f"{d.first} - {d.second}: acc {d.accuracy_delta:+.4f}, rise {rise}")
        return "\n".join(lines)


def _mean_curve(group: Sequence[LabeledTrace]) -> List[float]:
    return np.mean(np.array([g.rolling for g in group], dtype=np.float64), axis=0).tolist()


def compare_report(runs: Sequence[LabeledTrace]) -> ComparisonReport:
    """Group runs by (algorithm, gamma) and tabulate accuracy and rise time."""
    if len(runs) < 2:
        raise ReportError(f"need at least 2 traces, got {len(runs)}")
    rows, rounds = group_rows(runs)
    deltas = []
    for a, b in itertools.combinations(rows, 2):
        rise = None
        if a.rise_time is not None and b.rise_time is not None:
            rise = a.rise_time - b.rise_time
        deltas.append(PairDelta(a.label, b.label, a.final_rolling_acc - b.final_rolling_acc, rise))
    return ComparisonReport(rows, deltas, rounds)


def group_rows(runs: Sequence[LabeledTrace]) -> Tuple[List[ReportRow], int]:
    """One row per (algorithm, gamma) group; all runs must share a round count."""
    if not runs:
        raise ReportError("no traces")
    lengths = {r.rounds for r in runs}
    if len(lengths) != 1:
        raise ReportError(f"mismatched round counts: {sorted(lengths)}")
    rounds = lengths.pop()
    if rounds == 0:
        raise ReportError("traces are empty")

    groups: Dict[Tuple[Algorithm, str], List[LabeledTrace]] = {}
    for r in runs:
        groups.setdefault((r.algorithm, format_gamma(r.gamma)), []).append(r)

    rows = []
    for (algo, _), group in sorted(groups.items(),
                                   key=lambda kv: (_ALGO_ORDER[kv[0][0]], float(kv[0][1]))):
        curve = _mean_curve(group)
        rows.append(ReportRow(
            algorithm=algo.value,
            gamma=group[0].gamma,
            runs=len(group),
            rounds=rounds,
            final_rolling_acc=float(np.mean([g.traces[-1].rolling_acc for g in group])),
            rise_time=rise_time(curve),
            final_test_acc=float(np.mean([g.traces[-1].test_acc for g in group])),
            seeds=sorted(g.seed for g in group),
        ))
    return rows, rounds
