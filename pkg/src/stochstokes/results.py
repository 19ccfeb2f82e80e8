"""CSV persistence of convergence tables and per-sample records.

Floats are written with ``repr`` so files round-trip exactly and repeated
runs produce identical bytes.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

RESULTS_FILE = "results.csv"
SLOPES_FILE = "slopes.csv"
SAMPLES_FILE = "samples.csv"

RESULT_HEADER = ["study", "case", "n", "h", "tau", "M", "err_u_ms", "err_u_se", "err_pint_ms", "err_pint_se"]
SLOPE_HEADER = ["quantity", "slope", "residual"]
SAMPLE_HEADER = ["level", "sample_index", "err_u_sq", "err_pint_sq", "seed"]


class ResultsParseError(ValueError):
    pass


@dataclass(frozen=True)
class LevelResult:
    study: str
    case: str
    n: int
    h: float
    tau: float
    M: int
    err_u_ms: float
    err_u_se: float
    err_pint_ms: float
    err_pint_se: float


@dataclass(frozen=True)
class SlopeFit:
    quantity: str
    slope: float
    residual: float


@dataclass(frozen=True)
class SampleRecord:
    level: int
    sample_index: int
    err_u_sq: float
    err_pint_sq: float
    seed: int


@dataclass
class ConvergenceTable:
    rows: list = field(default_factory=list)
    slopes: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def slope(self, quantity: str) -> float:
        for s in self.slopes:
            if s.quantity == quantity:
                return s.slope
        raise KeyError(quantity)

    def __eq__(self, other):
        return isinstance(other, ConvergenceTable) and self.rows == other.rows and self.slopes == other.slopes


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _write_csv(path: Path, header, records) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for rec in records:
        w.writerow([_fmt(getattr(rec, h)) for h in header])
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)


def _read_csv(path: Path, header, cls):
    types = {f.name: f.type for f in fields(cls)}
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise ResultsParseError(f"{path}:1: empty file, expected header") from None
        if first != list(header):
            raise ResultsParseError(f"{path}:1: bad header {first!r}")
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ResultsParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            vals = {}
            for name, raw in zip(header, row):
                t = types[name]
                try:
                    vals[name] = int(raw) if t in ("int", int) else float(raw) if t in ("float", float) else raw
                except ValueError:
                    raise ResultsParseError(f"{path}:{lineno}: field {name!r} has bad value {raw!r}") from None
            out.append(cls(**vals))
    return out


def persist_results(table: ConvergenceTable, out_dir) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    _write_csv(d / RESULTS_FILE, RESULT_HEADER, table.rows)
    _write_csv(d / SLOPES_FILE, SLOPE_HEADER, table.slopes)


def load_results(out_dir) -> ConvergenceTable:
    d = Path(out_dir)
    rows = _read_csv(d / RESULTS_FILE, RESULT_HEADER, LevelResult)
    slopes = _read_csv(d / SLOPES_FILE, SLOPE_HEADER, SlopeFit) if (d / SLOPES_FILE).exists() else []
    return ConvergenceTable(rows=rows, slopes=slopes)


def write_samples(records, path) -> None:
    recs = sorted(records, key=lambda r: (r.level, r.sample_index))
    _write_csv(Path(path), SAMPLE_HEADER, recs)


def read_samples(path) -> list[SampleRecord]:
    p = Path(path)
    if not p.exists():
        return []
    return _read_csv(p, SAMPLE_HEADER, SampleRecord)
