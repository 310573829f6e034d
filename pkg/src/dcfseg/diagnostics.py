"""Distance traces and the structured per-iteration metric log.

Weight distance is the plain Euclidean norm over all parameter segments;
prediction distance is the Euclidean norm over probability maps normalized
by sqrt(pixel count) so values stay comparable across batch compositions.
The CSV is the diagnostics contract: fixed column order, 9 significant
digits, LF line endings, flushed every 50 rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamVector, ShapeError

CSV_COLUMNS = (
    "iter", "mode", "winner", "lambda",
    "l_seg_s1", "l_seg_s2", "l_cps", "l_ms",
    "l_total_s1", "l_total_s2", "dice_s1", "dice_s2",
    "wd_t_s1", "wd_t_s2", "pd_t_s1", "pd_t_s2", "pd_s1_s2",
)

FLUSH_EVERY = 50


def weight_distance(a: ParamVector, b: ParamVector) -> float:
    """Euclidean norm of the elementwise parameter difference."""
    if not a.same_structure(b):
        raise ShapeError("weight_distance: parameter vectors are structurally different")
    total = 0.0
    for x, y in zip(a.arrays, b.arrays):
        d = x.astype(np.float64) - y.astype(np.float64)
        total += float((d * d).sum())
    return math.sqrt(total)


def prediction_distance(probs_a: np.ndarray, probs_b: np.ndarray) -> float:
    """Euclidean distance between probability maps per sqrt(pixel)."""
    pa, pb = np.asarray(probs_a), np.asarray(probs_b)
    if pa.shape != pb.shape:
        raise ShapeError(f"prediction_distance: dims differ {pa.shape} vs {pb.shape}")
    if pa.ndim != 4:
        raise ShapeError(f"prediction_distance expects rank-4 maps, got {pa.shape}")
    d = pa.astype(np.float64) - pb.astype(np.float64)
    n_pixels = pa.shape[0] * pa.shape[2] * pa.shape[3]
    return math.sqrt(float((d * d).sum()) / n_pixels)


@dataclass
class TraceRecord:
    """One CSV row; distance fields are 0.0 when a network was not run."""

    iter: int
    mode: str
    winner: int
    lam: float
    l_seg_s1: float
    l_seg_s2: float
    l_cps: float
    l_ms: float
    l_total_s1: float
    l_total_s2: float
    dice_s1: float
    dice_s2: float
    wd_t_s1: float
    wd_t_s2: float
    pd_t_s1: float
    pd_t_s2: float
    pd_s1_s2: float

    def row(self) -> list[str]:
        def num(x: float) -> str:
            return f"{x:.9g}"

        return [str(self.iter), self.mode, str(self.winner), num(self.lam),
                num(self.l_seg_s1), num(self.l_seg_s2), num(self.l_cps), num(self.l_ms),
                num(self.l_total_s1), num(self.l_total_s2), num(self.dice_s1), num(self.dice_s2),
                num(self.wd_t_s1), num(self.wd_t_s2),
                num(self.pd_t_s1), num(self.pd_t_s2), num(self.pd_s1_s2)]


class CsvLogger:
    """Append-only metric log with a single header row.

    I/O errors propagate as OSError wrapped with the target path so a failing
    run aborts loudly instead of silently dropping its trace.
    """

    def __init__(self, path):
        self.path = path
        self.rows_written = 0
        try:
            self._fh = open(path, "w", encoding="ascii", newline="\n")
            self._fh.write(",".join(CSV_COLUMNS) + "\n")
        except OSError as e:
            raise OSError(f"cannot open metric log {path}: {e}") from e

    def log(self, record: TraceRecord) -> None:
        try:
            self._fh.write(",".join(record.row()) + "\n")
            self.rows_written += 1
            if self.rows_written % FLUSH_EVERY == 0:
                self._fh.flush()
        except OSError as e:
            raise OSError(f"metric log write failed for {self.path}: {e}") from e

    def close(self) -> None:
        if self._fh is not None:
            self._fh.flush()
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_trace(path) -> list[dict]:
    """Parse a metric CSV back into dicts (numbers as floats/ints)."""
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().strip().split(",")
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected trace header in {path}: {header}")
        out = []
        for line in f:
            parts = line.rstrip("\n").split(",")
            rec = dict(zip(header, parts))
            rec["iter"] = int(rec["iter"])
            rec["winner"] = int(rec["winner"])
            for key in header[3:]:
                rec[key] = float(rec[key])
            out.append(rec)
    return out
