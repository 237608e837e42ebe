"""Error metrics and the CSV error report."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

ERROR_COLUMNS = ("layer", "mode", "V", "N_w", "N_a", "M_w", "M_a",
                 "mse", "sqnr_db", "max_abs_err")


def mse(ref, test) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    return float(np.mean((ref - test) ** 2))


def sqnr_db(ref, test) -> float:
    """10*log10(signal power / noise power); +inf when the error is zero."""
    ref = np.asarray(ref, dtype=np.float64)
    noise = float(np.sum((ref - np.asarray(test, dtype=np.float64)) ** 2))
    signal = float(np.sum(ref**2))
    if noise == 0.0:
        return math.inf
    if signal == 0.0:
        return -math.inf
    return 10.0 * math.log10(signal / noise)


def max_abs_err(ref, test) -> float:
    diff = np.abs(np.asarray(ref, dtype=np.float64) - np.asarray(test, dtype=np.float64))
    return float(diff.max()) if diff.size else 0.0


@dataclass
class ErrorRow:
    layer: str
    mode: str
    V: int
    N_w: int
    N_a: int
    M_w: str
    M_a: str
    mse: float
    sqnr_db: float
    max_abs_err: float

    @classmethod
    def compare(cls, layer: str, mode: str, ref, test, *, v: int, n_w: int, n_a: int,
                m_w="-", m_a="-") -> "ErrorRow":
        return cls(layer, mode, v, n_w, n_a, str(m_w), str(m_a),
                   mse(ref, test), sqnr_db(ref, test), max_abs_err(ref, test))


@dataclass
class ErrorReport:
    rows: list[ErrorRow] = field(default_factory=list)

    def add(self, row: ErrorRow) -> None:
        self.rows.append(row)

    @property
    def final(self) -> ErrorRow:
        return self.rows[-1]

    def to_csv(self, extra: dict[str, object] | None = None) -> str:
        """Rows in ERROR_COLUMNS order, then any ``extra`` constant columns."""
        extra = extra or {}
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([*ERROR_COLUMNS, *extra])
        for row in self.rows:
            writer.writerow([format_cell(getattr(row, c)) for c in ERROR_COLUMNS]
                            + [format_cell(v) for v in extra.values()])
        return buf.getvalue()


def format_cell(value) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def write_rows(path_or_buf, columns, rows) -> None:
    """Write dict rows with a fixed column order."""
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(row[c]) for c in columns])
    finally:
        if own:
            fh.close()

