"""Per-round training reports and their CSV form."""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path
from typing import IO

CSV_FIELDS = (
    "round",
    "strategy",
    "snr_db",
    "train_loss",
    "eval_psnr_db",
    "eval_msssim",
    "bytes_down",
    "bytes_up",
)


@dataclass(frozen=True)
class ReportRow:
    round: int
    strategy: str
    snr_db: float
    train_loss: float
    eval_psnr_db: float | None
    eval_msssim: float | None
    bytes_down: int
    bytes_up: int


assert tuple(f.name for f in fields(ReportRow)) == CSV_FIELDS


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        # repr round-trips exactly, which keeps reruns byte-identical.
        return repr(value)
    return str(value)


def format_row(row: ReportRow) -> list[str]:
    return [_cell(v) for v in astuple(row)]


@dataclass
class TrainingReport:
    rows: list[ReportRow] = field(default_factory=list)
    csv_path: str | Path | None = None
    fallbacks: int = 0
    msssim_scales: int | None = None

    def __post_init__(self) -> None:
        from .fl import CommLedger

        self.ledger = CommLedger()
        self.partition = None
        self.final_params = None
        self.layout = None
        self._fh: IO[str] | None = None
        self._writer = None
        if self.csv_path is not None:
            self._fh = open_report(self.csv_path)
            self._writer = csv.writer(self._fh, lineterminator="\n")

    def append(self, row: ReportRow) -> None:
        if self.rows and self.rows[-1].strategy == row.strategy and row.round <= self.rows[-1].round:
            raise ValueError("report rounds must increase within a strategy")
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow(format_row(row))
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            self._writer = None

    def final(self) -> ReportRow:
        return self.rows[-1]


def open_report(path: str | Path) -> IO[str]:
    """Open a report CSV for appending, writing the header if the file is new."""
    p = Path(path)
    new = not p.exists() or p.stat().st_size == 0
    fh = open(p, "a", newline="")
    if new:
        csv.writer(fh, lineterminator="\n").writerow(CSV_FIELDS)
    else:
        with open(p, newline="") as rd:
            header = next(csv.reader(rd), None)
        if tuple(header or ()) != CSV_FIELDS:
            fh.close()
            raise ValueError(f"{p}: existing header {header} does not match the report schema")
    return fh


def read_report(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
