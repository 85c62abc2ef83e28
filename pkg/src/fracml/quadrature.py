"""Convolution-quadrature weights for the discrete Caputo derivative.

The discrete operator on a uniform mesh ``t_n = n * tau`` reads

    D_tau^alpha y_n = tau^(-alpha) * (delta_n * y_0 + sum_{k=0}^{n-1} omega_k * y_{n-k})

with ``delta_n = -sum_{k<n} omega_k``. Two CM-preserving weight families are
provided: Grunwald-Letnikov (coefficients of ``(1 - z)^alpha``) and L1.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class Scheme(str, enum.Enum):
    GL = "gl"
    L1 = "l1"

    @classmethod
    def parse(cls, value: "Scheme | str") -> "Scheme":
        if isinstance(value, Scheme):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {"gl": cls.GL, "grunwaldletnikov": cls.GL, "l1": cls.L1}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown scheme {value!r}; expected 'gl' or 'l1'") from None


@dataclass(frozen=True)
class WeightTable:
    """Immutable table of ``omega_0..omega_N`` and ``delta_0..delta_N``."""

    alpha: float
    scheme: Scheme
    omega: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        for arr in (self.omega, self.delta):
            arr.setflags(write=False)

    @property
    def n_max(self) -> int:
        return len(self.omega) - 1

    def to_csv(self, path) -> None:
        write_weights_csv(self, path)


@dataclass(frozen=True)
class DecayConstants:
    """Bounds ``c3 <= |omega_n| n^(1+a), |delta_n| n^a, n^a sum_{k>=n}|omega_k| <= c4``."""

    c3: float
    c4: float
    n_fit_range: tuple[int, int]

    def widened(self, factor: float = 0.1) -> "DecayConstants":
        return DecayConstants(self.c3 * (1.0 - factor), self.c4 * (1.0 + factor), self.n_fit_range)


def _check_args(alpha: float, n_max: int) -> None:
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if int(n_max) != n_max or n_max < 1:
        raise ValueError(f"n_max must be a positive integer, got {n_max}")


def _delta_from_omega(omega: np.ndarray) -> np.ndarray:
    delta = np.empty_like(omega)
    delta[0] = 0.0
    delta[1:] = -np.cumsum(omega[:-1])
    return delta


def gl_weights(alpha: float, n_max: int) -> WeightTable:
    """Grunwald-Letnikov weights via the product recurrence.

    >>> gl_weights(0.5, 2).omega.tolist()
    [1.0, -0.5, -0.125]
    """
    _check_args(alpha, n_max)
    k = np.arange(1, n_max + 1, dtype=float)
    omega = np.empty(n_max + 1)
    omega[0] = 1.0
    omega[1:] = np.cumprod(1.0 - (alpha + 1.0) / k)
    return WeightTable(alpha, Scheme.GL, omega, _delta_from_omega(omega))


def l1_weights(alpha: float, n_max: int) -> WeightTable:
    _check_args(alpha, n_max)
    g = math.gamma(2.0 - alpha)
    # first differences d[j] = (j+1)^(1-a) - j^(1-a) via expm1/log1p, which
    # avoids the cancellation of subtracting two nearby powers
    j = np.arange(1, n_max + 1, dtype=float)
    d = np.empty(n_max + 1)
    d[0] = 1.0
    d[1:] = j ** (1.0 - alpha) * np.expm1((1.0 - alpha) * np.log1p(1.0 / j))
    omega = np.empty(n_max + 1)
    omega[0] = 1.0 / g
    # (k+1)^(1-a) - 2 k^(1-a) + (k-1)^(1-a) as a difference of first differences
    omega[1:] = (d[1 : n_max + 1] - d[0:n_max]) / g
    # closed form delta_n = ((n-1)^(1-a) - n^(1-a)) / Gamma(2-a)
    delta = np.empty(n_max + 1)
    delta[0] = 0.0
    delta[1:] = -d[0:n_max] / g
    return WeightTable(alpha, Scheme.L1, omega, delta)


def make_weights(scheme: Scheme | str, alpha: float, n_max: int) -> WeightTable:
    scheme = Scheme.parse(scheme)
    if scheme is Scheme.GL:
        return gl_weights(alpha, n_max)
    return l1_weights(alpha, n_max)


def tail_sums(table: WeightTable) -> np.ndarray:
    """``sum_{k>=n} |omega_k|`` for n = 0..N.

    Both schemes satisfy ``sum_k omega_k = 0``, so the infinite tail equals
    ``-delta_n`` for n >= 1 and no truncation at ``n_max`` is involved.
    Entry 0 is ``sum_{k>=1}|omega_k| = omega_0``.
    """
    tail = -np.asarray(table.delta, dtype=float).copy()
    tail[0] = table.omega[0]
    return tail


def scaled_sequences(table: WeightTable, lo: int, hi: int) -> dict[str, np.ndarray]:
    n = np.arange(lo, hi + 1, dtype=float)
    a = table.alpha
    idx = slice(lo, hi + 1)
    return {
        "omega": np.abs(table.omega[idx]) * n ** (1.0 + a),
        "delta": np.abs(table.delta[idx]) * n**a,
        "tail": tail_sums(table)[idx] * n**a,
    }


def estimate_decay_constants(table: WeightTable, n_range: tuple[int, int]) -> DecayConstants:
    """Empirical ``(c3, c4)`` as min/max of the three scaled sequences on ``n_range``."""
    lo, hi = int(n_range[0]), int(n_range[1])
    if hi < lo:
        raise ValueError(f"empty index range [{lo}, {hi}]")
    if lo < 1 or hi > table.n_max:
        raise ValueError(f"range [{lo}, {hi}] must lie within [1, {table.n_max}]")
    seqs = scaled_sequences(table, lo, hi)
    c3 = min(float(s.min()) for s in seqs.values())
    c4 = max(float(s.max()) for s in seqs.values())
    return DecayConstants(c3, c4, (lo, hi))


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class CertificationReport:
    scheme: Scheme
    alpha: float
    n_max: int
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def rows(self) -> list[tuple[str, str, str]]:
        return [(c.name, "pass" if c.passed else "fail", c.detail) for c in self.checks]


def verify_cm_properties(table: WeightTable, tol: float = 1e-13) -> CertificationReport:
    """Certify the sign, monotonicity and partial-sum structure of a table.

    Sign and ordering checks are exact; the ``delta``/``omega`` identities
    are compared with relative tolerance ``tol``.
    """
    om = np.asarray(table.omega, dtype=float)
    de = np.asarray(table.delta, dtype=float)
    rep = CertificationReport(table.scheme, table.alpha, table.n_max)

    def add(name, ok, detail=""):
        rep.checks.append(CheckResult(name, bool(ok), detail))

    bad = np.flatnonzero(om[1:] >= 0.0) + 1
    add("sign_pattern", om[0] > 0.0 and bad.size == 0,
        f"omega_0={float(om[0])!r}" + (f", first nonnegative index {bad[0]}" if bad.size else ""))

    inc = np.flatnonzero(~(np.diff(om[1:]) > 0.0)) + 1
    add("strict_monotonicity", inc.size == 0,
        f"first violation at k={inc[0]}" if inc.size else "omega_1 < ... < omega_N < 0")

    partial = np.cumsum(om)
    nonpos = np.flatnonzero(partial <= 0.0)
    nondec = np.flatnonzero(~(np.diff(partial) < 0.0))
    add("partial_sums_positive", nonpos.size == 0,
        f"first nonpositive index {nonpos[0]}" if nonpos.size else f"min={float(partial.min())!r}")
    add("partial_sums_decreasing", nondec.size == 0,
        f"first violation at n={nondec[0] + 1}" if nondec.size else f"last={float(partial[-1])!r}")

    dpos = np.flatnonzero(de[1:] >= 0.0) + 1
    add("delta_negative", de[0] == 0.0 and dpos.size == 0,
        f"first nonnegative index {dpos[0]}" if dpos.size else "")

    # identities are compared relative to the magnitude of their operands
    ref = -np.concatenate(([0.0], np.cumsum(om[:-1])))
    scale = np.concatenate(([1.0], np.cumsum(np.abs(om[:-1]))))
    err = float(np.max(np.abs(de - ref) / scale))
    add("delta_partial_sum", err <= tol, f"max rel err {err:.3e}")

    diff = de[:-1] - de[1:]
    scale = np.maximum(np.abs(de[:-1]), np.abs(de[1:]))
    scale[0] = abs(om[0])
    err = float(np.max(np.abs(diff - om[:-1]) / scale))
    add("omega_delta_difference", err <= tol, f"max rel err {err:.3e}")
    return rep


def write_weights_csv(table: WeightTable, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "omega", "delta"])
        for n in range(table.n_max + 1):
            w.writerow([n, f"{table.omega[n]:.17g}", f"{table.delta[n]:.17g}"])


def plateau_variation(table: WeightTable, lo: int, hi: int) -> dict[str, float]:
    """Relative spread ``(max - min) / max`` of each scaled sequence on ``[lo, hi]``."""
    if not (1 <= lo <= hi <= table.n_max):
        raise ValueError(f"range [{lo}, {hi}] must lie within [1, {table.n_max}]")
    out = {}
    for name, seq in scaled_sequences(table, lo, hi).items():
        top = float(seq.max())
        out[name] = (top - float(seq.min())) / top
    return out
