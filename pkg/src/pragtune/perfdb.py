"""Append-only performance database: results.csv plus results.json (JSON lines)."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .evaluator import Status, TrialRecord
from .space import INACTIVE, Configuration

CSV_NAME = "results.csv"
JSON_NAME = "results.json"
FIXED_COLUMNS = ("metric", "elapsed", "status", "timestamp")


class SequencingError(ValueError):
    pass


class NoSuccessfulTrials(LookupError):
    pass


@dataclass(frozen=True)
class ResultRow:
    index: int
    values: tuple[tuple[str, str | None], ...]
    metric: float
    elapsed: float
    status: Status
    timestamp: str

    @property
    def ok(self) -> bool:
        return self.status is Status.OK

    @property
    def configuration(self) -> Configuration:
        return Configuration((k, INACTIVE if v is None else v) for k, v in self.values)

    @classmethod
    def from_trial(cls, index: int, trial: TrialRecord, timestamp: str | None = None) -> ResultRow:
        return cls(
            index=index,
            values=tuple(trial.configuration.to_json().items()),
            metric=float(trial.metric),
            elapsed=float(trial.elapsed),
            status=Status(trial.status),
            timestamp=timestamp or datetime.now(timezone.utc).isoformat(timespec="microseconds"),
        )

    def to_json_record(self) -> dict:
        rec = {"index": self.index}
        rec.update(dict(self.values))
        rec.update(metric=self.metric, elapsed=self.elapsed, status=self.status.value, timestamp=self.timestamp)
        return rec

    def to_csv_fields(self) -> list[str]:
        return (
            [str(self.index)]
            + ["" if v is None else v for _, v in self.values]
            + [repr(self.metric), repr(self.elapsed), self.status.value, self.timestamp]
        )


def _read(path: Path) -> str:
    # newline="" keeps carriage returns inside quoted fields intact
    with open(path, newline="") as fh:
        return fh.read()


def _csv_line(fields: Sequence[str]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(fields)
    return buf.getvalue()


def _json_line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False) + "\n"


def _row_from_json(rec: dict, params: Sequence[str]) -> ResultRow:
    return ResultRow(
        index=int(rec["index"]),
        values=tuple((p, rec[p]) for p in params),
        metric=float(rec["metric"]),
        elapsed=float(rec["elapsed"]),
        status=Status(rec["status"]),
        timestamp=rec["timestamp"],
    )


def read_rows(run_dir: str | Path) -> list[ResultRow]:
    return PerfDB.open_existing(run_dir).rows


def read_csv_rows(path: str | Path, params: Sequence[str]) -> list[ResultRow]:
    """Parse results.csv independently of the JSON file (cross-checks)."""
    k = len(params)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [
            ResultRow(
                index=int(f[0]),
                values=tuple((p, v if v != "" else None) for p, v in zip(params, f[1 : 1 + k])),
                metric=float(f[1 + k]),
                elapsed=float(f[2 + k]),
                status=Status(f[3 + k]),
                timestamp=f[4 + k],
            )
            for f in reader
        ]


def read_json_rows(path: str | Path, params: Sequence[str]) -> list[ResultRow]:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rows.append(_row_from_json(json.loads(line), params))
    return rows


class PerfDB:
    """Single-writer results store for one run directory.

    Reopening an existing directory resumes after the last row present in
    both files; a torn trailing line from a crash is dropped.
    """

    def __init__(self, run_dir: str | Path, param_names: Sequence[str]):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.param_names = tuple(param_names)
        clash = set(self.param_names) & {"index", *FIXED_COLUMNS}
        if clash:
            raise ValueError(f"parameter names clash with result columns: {sorted(clash)}")
        self.csv_path = self.run_dir / CSV_NAME
        self.json_path = self.run_dir / JSON_NAME
        self.header = ["index", *self.param_names, *FIXED_COLUMNS]
        self.rows: list[ResultRow] = []
        self._recover()

    @classmethod
    def open_existing(cls, run_dir: str | Path) -> PerfDB:
        run_dir = Path(run_dir)
        csv_path = run_dir / CSV_NAME
        if not csv_path.exists() or not (run_dir / JSON_NAME).exists():
            raise FileNotFoundError(f"{run_dir} has no {CSV_NAME}/{JSON_NAME}")
        with open(csv_path, newline="") as fh:
            header = next(csv.reader(fh), None)
        if not header or header[0] != "index" or tuple(header[-len(FIXED_COLUMNS) :]) != FIXED_COLUMNS:
            raise ValueError(f"{csv_path}: unexpected header {header!r}")
        return cls(run_dir, header[1 : -len(FIXED_COLUMNS)])

    def _recover(self) -> None:
        if not self.csv_path.exists() or self.csv_path.stat().st_size == 0:
            self.csv_path.write_text(_csv_line(self.header))
            self.json_path.write_text("")
            return
        csv_rows = self._intact(self.csv_path, csv_mode=True)
        json_rows = self._intact(self.json_path, csv_mode=False) if self.json_path.exists() else []
        n = min(len(csv_rows), len(json_rows))
        self.rows = csv_rows[:n]
        # rewrite both files to the common prefix so they stay in lockstep
        if n != len(csv_rows) or n != len(json_rows) or not self._canonical():
            self._rewrite(self.csv_path, self.json_path)

    def _intact(self, path: Path, csv_mode: bool) -> list[ResultRow]:
        lines = _read(path).split("\n")
        lines = [line + "\n" for line in lines[:-1]] + ([lines[-1]] if lines[-1] else [])
        if lines and not lines[-1].endswith("\n"):
            lines = lines[:-1]
        rows: list[ResultRow] = []
        if csv_mode:
            reader = csv.reader(io.StringIO("".join(lines)))
            header = next(reader, None)
            if header != self.header:
                raise ValueError(f"{path}: header {header!r} does not match parameters")
            for fields in reader:
                try:
                    rows.append(self._from_csv_fields(fields))
                except (ValueError, IndexError):
                    break
        else:
            for line in lines:
                try:
                    rows.append(_row_from_json(json.loads(line), self.param_names))
                except (ValueError, KeyError):
                    break
        return rows

    def _from_csv_fields(self, fields: list[str]) -> ResultRow:
        if len(fields) != len(self.header):
            raise ValueError("wrong field count")
        k = len(self.param_names)
        return ResultRow(
            index=int(fields[0]),
            values=tuple((p, v if v != "" else None) for p, v in zip(self.param_names, fields[1 : 1 + k])),
            metric=float(fields[1 + k]),
            elapsed=float(fields[2 + k]),
            status=Status(fields[3 + k]),
            timestamp=fields[4 + k],
        )

    def _canonical(self) -> bool:
        csv_text, json_text = self._render()
        return _read(self.csv_path) == csv_text and _read(self.json_path) == json_text

    def _render(self) -> tuple[str, str]:
        csv_text = _csv_line(self.header) + "".join(_csv_line(r.to_csv_fields()) for r in self.rows)
        json_text = "".join(_json_line(r.to_json_record()) for r in self.rows)
        return csv_text, json_text

    def _rewrite(self, csv_path: Path, json_path: Path) -> None:
        csv_text, json_text = self._render()
        csv_path.write_text(csv_text)
        json_path.write_text(json_text)

    @property
    def last_index(self) -> int:
        return self.rows[-1].index if self.rows else 0

    def append(self, row: ResultRow) -> None:
        if row.index != self.last_index + 1:
            raise SequencingError(f"expected index {self.last_index + 1}, got {row.index}")
        if tuple(k for k, _ in row.values) != self.param_names:
            raise ValueError("row parameters do not match the database columns")
        # JSON first: recovery trims both files to their common prefix
        for path, line in ((self.json_path, _json_line(row.to_json_record())), (self.csv_path, _csv_line(row.to_csv_fields()))):
            with open(path, "a") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
        self.rows.append(row)

    def append_trial(self, trial: TrialRecord) -> ResultRow:
        row = ResultRow.from_trial(self.last_index + 1, trial)
        self.append(row)
        return row

    def export(self, dest_dir: str | Path) -> None:
        """Write a canonical copy of both files to another directory."""
        dest_dir = Path(dest_dir)
        dest_dir.mkdir(parents=True, exist_ok=True)
        self._rewrite(dest_dir / CSV_NAME, dest_dir / JSON_NAME)


def find_min(rows: Iterable[ResultRow]) -> tuple[ResultRow, Configuration]:
    """Earliest row with the smallest successful metric."""
    best = None
    for r in rows:
        if r.ok and (best is None or r.metric < best.metric):
            best = r
    if best is None:
        raise NoSuccessfulTrials("no successful trials")
    return best, best.configuration


def convergence_series(rows: Iterable[ResultRow]) -> list[tuple[int, float, float]]:
    """(index, metric, running best over successes); NaN until a success appears."""
    out = []
    best = math.nan
    for r in rows:
        if r.ok and not (r.metric >= best):
            best = r.metric
        out.append((r.index, r.metric, best))
    return out


def write_series_tsv(series: Iterable[tuple[int, float, float]], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("index\tmetric\tbest_so_far\n")
        for i, m, b in series:
            fh.write(f"{i}\t{m!r}\t{b!r}\n")
