"""Run record serialization, per-round series files and trade-off tables."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import polars as pl

from .defaults import KpiNames
from .models import ArchitectureKind, ExperimentConfig, RoundRecord, RunRecord


def _format_float(value: float) -> str:
    if not math.isfinite(value):
        raise ValueError(f"cannot serialize non-finite float {value!r} as JSON")
    text = format(value, ".17g")
    if not any(c in text for c in ".en"):
        text += ".0"
    return text


def canonical_json(data: Any, indent: int = 2) -> str:
    """
    Canonical JSON text: sorted keys, floats with 17 significant digits.

    Equal inputs always produce equal text, newline-terminated.
    """

    def encode(value: Any, depth: int) -> str:
        pad = " " * (indent * (depth + 1))
        end = " " * (indent * depth)
        if value is None or isinstance(value, (bool, str)):
            return json.dumps(value, ensure_ascii=False)
        if isinstance(value, int):
            return str(int(value))
        if isinstance(value, float):
            return _format_float(value)
        if isinstance(value, dict):
            if not value:
                return "{}"
            items = sorted((str(k), v) for k, v in value.items())
            body = ",\n".join(f"{pad}{json.dumps(k, ensure_ascii=False)}: {encode(v, depth + 1)}" for k, v in items)
            return "{\n" + body + "\n" + end + "}"
        if isinstance(value, (list, tuple)):
            if not value:
                return "[]"
            body = ",\n".join(f"{pad}{encode(v, depth + 1)}" for v in value)
            return "[\n" + body + "\n" + end + "]"
        if hasattr(value, "item"):
            return encode(value.item(), depth)
        raise TypeError(f"cannot serialize {type(value).__name__} as JSON")

    return encode(data, 0) + "\n"


def emit_json(record: RunRecord, path) -> Path:
    """Write the canonical JSON form of a run record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(canonical_json(record.to_dict()))
    return path


def load_record(path) -> RunRecord:
    """Read a record written by ``emit_json``."""
    with open(path, "r", encoding="utf-8") as f:
        return RunRecord.from_dict(json.load(f))


def record_frame(record: RunRecord) -> pl.DataFrame:
    """
    One row per (round, node) plus an ``avg`` row per round.

    Columns follow ``KpiNames.CSV_HEADER``.
    """
    rows = []
    for round_record in record.rounds:
        for sample in sorted(round_record.samples, key=lambda s: s.node):
            rows.append({"round": round_record.round, "node": str(sample.node), **_kpi_columns(sample)})
        rows.append({"round": round_record.round, "node": "avg", **_kpi_columns(round_record.federation)})

    schema = {"round": pl.Int64, "node": pl.Utf8}
    schema.update({name: pl.Float64 for name in KpiNames.METRICS})
    schema.update({name: pl.Int64 for name in KpiNames.COUNTERS})
    return pl.DataFrame(rows, schema=schema)


def _kpi_columns(sample) -> Dict[str, Any]:
    data = sample.to_dict()
    return {name: data[name] for name in KpiNames.METRICS + KpiNames.COUNTERS}


def emit_csv(record: RunRecord, path) -> Path:
    """Write the per-node and averaged KPI table as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record_frame(record).write_csv(path)
    return path


def series_frames(record: RunRecord) -> Dict[str, pl.DataFrame]:
    """Per-KPI ``round, value`` frames of the federation-level series.

    ``bytes`` is the traffic of the whole round (server included) and
    ``flops`` the local training work summed over participants.
    """
    rounds = [r.round for r in record.rounds]
    columns: Dict[str, List[Any]] = {name: [getattr(r.federation, name) for r in record.rounds] for name in KpiNames.METRICS}
    columns["bytes"] = [r.bytes_total for r in record.rounds]
    columns["flops"] = [r.federation.flops for r in record.rounds]
    return {name: pl.DataFrame({"round": rounds, "value": columns[name]}) for name in KpiNames.SERIES}


def emit_series(record: RunRecord, out_dir) -> List[Path]:
    """Write one ``series_<kpi>.tsv`` file per KPI (``round<TAB>value``, no header)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, frame in series_frames(record).items():
        path = out_dir / f"series_{name}.tsv"
        frame.write_csv(path, separator="\t", include_header=False)
        paths.append(path)
    return paths


def run_dir_name(config) -> str:
    """Run-scoped output directory name: ``<arch>_n<N>_s<seed>``."""
    if isinstance(config, ExperimentConfig):
        config = config.to_dict()
    return f"{config['arch']}_n{config['n_participants']}_s{config['master_seed']}"


def emit_run(record: RunRecord, out_root) -> Path:
    """Write record.json, record.csv and the series files of one run."""
    run_dir = Path(out_root) / run_dir_name(record.config)
    emit_json(record, run_dir / "record.json")
    emit_csv(record, run_dir / "record.csv")
    emit_series(record, run_dir)
    return run_dir


@dataclass
class TradeoffRow:
    arch: str
    n_participants: int
    final_accuracy: float
    final_loss: float
    convergence_round: Optional[int]
    total_bytes: int
    total_flops: int

    @classmethod
    def from_record(cls, record: RunRecord) -> "TradeoffRow":
        final = record.final
        return cls(
            arch=record.arch,
            n_participants=record.n_participants,
            final_accuracy=float(final.accuracy),
            final_loss=float(final.loss),
            convergence_round=record.convergence_round,
            total_bytes=record.total_bytes,
            total_flops=record.total_flops,
        )

    @property
    def key(self) -> Tuple[str, int]:
        return self.arch, self.n_participants

    def to_dict(self) -> Dict[str, Any]:
        return {
            "arch": self.arch,
            "n_participants": self.n_participants,
            "final_accuracy": self.final_accuracy,
            "final_loss": self.final_loss,
            "convergence_round": self.convergence_round,
            "total_bytes": self.total_bytes,
            "total_flops": self.total_flops,
        }


# Column -> whether larger values are better.
TRADEOFF_COLUMNS: Dict[str, bool] = {
    "final_accuracy": True,
    "final_loss": False,
    "convergence_round": False,
    "total_bytes": False,
    "total_flops": False,
}


@dataclass
class TradeoffTable:
    """Cross-architecture comparison, one row per run, ordered by (arch, N)."""

    rows: List[TradeoffRow] = field(default_factory=list)

    @property
    def best(self) -> Dict[str, List[Tuple[str, int]]]:
        """Row keys holding the best value of each column (ties all marked)."""
        result = {}
        for column, higher in TRADEOFF_COLUMNS.items():
            values = [getattr(r, column) for r in self.rows if getattr(r, column) is not None]
            if not values:
                result[column] = []
                continue
            target = max(values) if higher else min(values)
            result[column] = [r.key for r in self.rows if getattr(r, column) == target]
        return result

    def to_frame(self) -> pl.DataFrame:
        schema = {
            "arch": pl.Utf8,
            "n_participants": pl.Int64,
            "final_accuracy": pl.Float64,
            "final_loss": pl.Float64,
            "convergence_round": pl.Int64,
            "total_bytes": pl.Int64,
            "total_flops": pl.Int64,
        }
        return pl.DataFrame([r.to_dict() for r in self.rows], schema=schema)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rows": [r.to_dict() for r in self.rows],
            "best": {column: [f"{arch}_n{n}" for arch, n in keys] for column, keys in self.best.items()},
        }

    def render(self) -> str:
        """Plain-text table; ``*`` marks the best value of a column."""
        best = self.best
        header = f"{'Arch':<6}{'N':>4}{'Accuracy (%)':>15}{'Loss':>11}{'Conv. round':>13}{'Total bytes':>16}{'Total FLOPs':>20}"
        lines = [header, "-" * len(header)]

        def mark(row: TradeoffRow, column: str, text: str) -> str:
            return text + ("*" if row.key in best[column] else " ")

        for row in self.rows:
            conv = "-" if row.convergence_round is None else str(row.convergence_round)
            lines.append(
                f"{row.arch.upper():<6}{row.n_participants:>4}"
                f"{mark(row, 'final_accuracy', f'{row.final_accuracy * 100:.2f}'):>15}"
                f"{mark(row, 'final_loss', f'{row.final_loss:.4f}'):>11}"
                f"{mark(row, 'convergence_round', conv):>13}"
                f"{mark(row, 'total_bytes', str(row.total_bytes)):>16}"
                f"{mark(row, 'total_flops', str(row.total_flops)):>20}"
            )
        return "\n".join(lines) + "\n"


def tradeoff_table(records: Sequence[RunRecord]) -> Tuple[TradeoffTable, str]:
    """
    Build the trade-off table of a set of runs.

    Args:
        records: At least one complete run record

    Returns:
        Tuple of (table, rendered text)

    Raises:
        ValueError: No records or two runs with the same (arch, N)
    """
    if not records:
        raise ValueError("trade-off table needs at least one record")
    rows = [TradeoffRow.from_record(r) for r in records]
    seen = set()
    for row in rows:
        if row.key in seen:
            raise ValueError(f"duplicate run for arch={row.arch} N={row.n_participants}")
        seen.add(row.key)
    rows.sort(key=lambda r: (ArchitectureKind(r.arch).order, r.n_participants))
    table = TradeoffTable(rows=rows)
    return table, table.render()


def emit_tradeoff(table: TradeoffTable, out_dir) -> Tuple[Path, Path]:
    """Write tradeoff.json (canonical) and tradeoff.txt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "tradeoff.json"
    text_path = out_dir / "tradeoff.txt"
    with open(json_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(canonical_json(table.to_dict()))
    with open(text_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(table.render())
    return json_path, text_path


def round_summary_line(record: RoundRecord, deadline_active: bool = False) -> str:
    """One progress line per round."""
    fed = record.federation
    line = (
        f"round {record.round:>3} | acc {fed.accuracy * 100:6.2f}% | loss {fed.loss:.4f} "
        f"| bytes {record.bytes_total} | flops {fed.flops}"
    )
    if record.aggregator is not None:
        line += f" | aggregator {record.aggregator}"
    if deadline_active:
        line += f" | dropped {record.dropped}"
    return line
