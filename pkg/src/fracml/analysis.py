"""Observed decay indices and log-log tail fits."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

ODE_CHECKPOINTS = (2000.0, 4000.0, 6000.0, 8000.0, 10000.0)
PDE_CHECKPOINTS = (20.0, 60.0, 100.0, 140.0, 180.0)


def decay_index(values, times, m: int = 5) -> np.ndarray:
    """``r*(t_n) = -ln(v_n / v_{n-m}) / ln(t_n / t_{n-m})``.

    Entries with n < m, a nonpositive value or a nonpositive time in the pair
    are NaN.
    """
    if int(m) != m or m < 1:
        raise ValueError(f"lag m must be a positive integer, got {m}")
    v = np.asarray(values, dtype=float)
    t = np.asarray(times, dtype=float)
    if v.shape != t.shape or v.ndim != 1:
        raise ValueError(f"values and times must be 1-d of equal length, got {v.shape} and {t.shape}")
    out = np.full(v.shape, np.nan)
    if v.size <= m:
        return out
    num, den = v[m:], v[:-m]
    tn, tm = t[m:], t[:-m]
    ok = (num > 0) & (den > 0) & (tn > 0) & (tm > 0) & (tn != tm)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = -np.log(num / den) / np.log(tn / tm)
    out[m:] = np.where(ok, r, np.nan)
    return out


def fit_tail_rate(values, times, tail_fraction: float = 0.25) -> float:
    """Negated least-squares slope of ln v against ln t over the last ``tail_fraction`` samples."""
    if not (0.0 < tail_fraction <= 1.0):
        raise ValueError(f"tail_fraction must lie in (0, 1], got {tail_fraction}")
    v = np.asarray(values, dtype=float)
    t = np.asarray(times, dtype=float)
    if v.shape != t.shape:
        raise ValueError("values and times must have equal length")
    k = int(np.ceil(tail_fraction * v.size))
    v, t = v[-k:], t[-k:]
    if k < 10:
        raise ValueError(f"need at least 10 points in the tail, got {k}")
    if np.any(v <= 0) or np.any(t <= 0):
        raise ValueError("tail contains nonpositive values or times")
    x, y = np.log(t), np.log(v)
    xc = x - x.mean()
    var = float(xc @ xc)
    if var == 0.0:
        raise ValueError("degenerate tail: zero variance in ln t")
    return float(-(xc @ (y - y.mean())) / var)


def index_at(indices, times, checkpoints: Sequence[float]) -> np.ndarray:
    """Pick indices at the mesh points nearest to each checkpoint time."""
    t = np.asarray(times, dtype=float)
    pos = [int(np.argmin(np.abs(t - c))) for c in checkpoints]
    return np.asarray(indices)[pos]


@dataclass
class DecayReport:
    times: np.ndarray
    values: np.ndarray
    m: int
    indices: np.ndarray
    fitted_rate: float
    tail_fraction: float
    label: str = ""
    theoretical_rate: float | None = None

    @classmethod
    def from_series(cls, values, times, m: int = 5, tail_fraction: float = 0.25,
                    label: str = "", theoretical_rate: float | None = None) -> "DecayReport":
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        return cls(times, values, m, decay_index(values, times, m),
                   fit_tail_rate(values, times, tail_fraction), tail_fraction, label,
                   theoretical_rate)

    @property
    def final_index(self) -> float:
        return float(self.indices[-1])

    def at(self, checkpoints: Sequence[float]) -> np.ndarray:
        return index_at(self.indices, self.times, checkpoints)


def write_decay_table(path, reports: Sequence[DecayReport], checkpoints: Sequence[float]) -> None:
    """Rows ``t_n, r*(t_n) per report`` and a last row with the theoretical rates."""
    path = Path(path)
    cols = [r.at(checkpoints) for r in reports]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_n"] + [r.label for r in reports])
        for i, c in enumerate(checkpoints):
            w.writerow([f"{c:g}"] + [f"{col[i]:.6f}" for col in cols])
        w.writerow(["rate"] + ["" if r.theoretical_rate is None else f"{r.theoretical_rate:.6g}"
                               for r in reports])
