"""Append-only CSV metrics files."""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass
from pathlib import Path

from .errors import ValidationError

HEADER = ("run_id", "kind", "key", "attack", "metric", "value", "wall_seconds")
KINDS = ("epoch", "eval")


def fmt(value: float) -> str:
    """Six significant digits."""
    return f"{value:.6g}"


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    kind: str
    key: int
    attack: str
    metric: str
    value: float
    wall_seconds: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"metrics kind must be one of {KINDS}, got {self.kind!r}")

    def cells(self):
        return [self.run_id, self.kind, str(self.key), self.attack, self.metric, fmt(self.value),
                fmt(self.wall_seconds)]


def read_rows(path) -> list[MetricsRow]:
    path = Path(path)
    if not path.exists():
        return []
    with path.open(newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != HEADER:
            raise ValidationError(f"{path}: unexpected header {header}")
        return [MetricsRow(r[0], r[1], int(r[2]), r[3], r[4], float(r[5]), float(r[6])) for r in reader]


def append_rows(path, rows) -> None:
    """Append ``rows``, writing the header for a new file.

    A row whose (run_id, kind, key) is already present is refused rather than
    overwritten.
    """
    path = Path(path)
    seen = {(r.run_id, r.kind, r.key) for r in read_rows(path)}
    for row in rows:
        k = (row.run_id, row.kind, row.key)
        if k in seen:
            raise ValidationError(f"{path}: a row for run {row.run_id!r}, kind {row.kind!r}, "
                                  f"key {row.key} already exists")
        seen.add(k)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if not path.exists() or path.stat().st_size == 0:
        writer.writerow(HEADER)
    for row in rows:
        writer.writerow(row.cells())
    with path.open("a", newline="") as f:
        f.write(buf.getvalue())


def deterministic_view(path) -> list[tuple]:
    """Rows with the wall-clock column dropped."""
    return [astuple(r)[:-1] for r in read_rows(path)]
