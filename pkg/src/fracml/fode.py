"""Implicit CM-preserving time stepping for the scalar fractional ODE

    D_t^alpha y + nu * t^beta * y^gamma = f(t),    y(0) = y0 > 0.

Each step solves ``omega_0 y_n + tau^alpha nu t_n^beta y_n^gamma = r_n`` with
``r_n = tau^alpha f_n - delta_n y_0 - S_n`` and the history sum
``S_n = sum_{k=1}^{n-1} omega_k y_{n-k}``.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quadrature import Scheme, WeightTable, make_weights


class FracmlError(Exception):
    """Base class for numerical failures raised by the solvers."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class NonpositiveRightSide(FracmlError):
    pass


class NoConvergence(FracmlError):
    pass


class SourceKind(str, enum.Enum):
    ZERO = "zero"
    DECAY = "decay"
    TABULATED = "tabulated"


@dataclass(frozen=True)
class Source:
    """Right-hand side ``f``.

    ``DECAY`` means ``f(t) = K t^beta / (1 + t)^(alpha + beta)``; ``TABULATED``
    carries mesh values ``f_0, f_1, ...``.
    """

    kind: SourceKind = SourceKind.ZERO
    K: float = 0.0
    values: tuple[float, ...] | None = None

    @classmethod
    def zero(cls) -> "Source":
        return cls()

    @classmethod
    def decay(cls, K: float) -> "Source":
        return cls(SourceKind.DECAY, float(K))

    @classmethod
    def tabulated(cls, values) -> "Source":
        return cls(SourceKind.TABULATED, 0.0, tuple(float(v) for v in values))


@dataclass(frozen=True)
class FodeProblem:
    alpha: float
    beta: float
    gamma: float
    nu: float = 1.0
    y0: float = 1.0
    source: Source = field(default_factory=Source)

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.beta > -self.alpha:
            raise ValueError(f"beta must exceed -alpha = {-self.alpha}, got {self.beta}")
        if not self.gamma > 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.nu > 0.0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if not self.y0 > 0.0:
            raise ValueError(f"y0 must be positive, got {self.y0}")
        if self.source.K < 0.0:
            raise ValueError(f"source bound K must be nonnegative, got {self.source.K}")

    @property
    def rate(self) -> float:
        """Predicted algebraic decay exponent ``(alpha + beta) / gamma``."""
        return (self.alpha + self.beta) / self.gamma

    def f(self, times: np.ndarray) -> np.ndarray:
        t = np.asarray(times, dtype=float)
        src = self.source
        if src.kind is SourceKind.ZERO:
            return np.zeros_like(t)
        if src.kind is SourceKind.DECAY:
            with np.errstate(divide="ignore"):
                out = src.K * t**self.beta / (1.0 + t) ** (self.alpha + self.beta)
            return np.where(t > 0.0, out, 0.0) if self.beta < 0 else out
        raise ValueError("tabulated sources are evaluated on the mesh, not at arbitrary times")

    def f_mesh(self, tau: float, n_steps: int) -> np.ndarray:
        if self.source.kind is SourceKind.TABULATED:
            vals = np.asarray(self.source.values, dtype=float)
            if len(vals) < n_steps + 1:
                raise ValueError(f"tabulated source has {len(vals)} values, need {n_steps + 1}")
            return vals[: n_steps + 1].copy()
        return self.f(tau * np.arange(n_steps + 1))


@dataclass
class Trajectory:
    tau: float
    values: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.tau * np.arange(len(self.values))

    @property
    def n_steps(self) -> int:
        return len(self.values) - 1

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "t", "y"])
            for n, (t, y) in enumerate(zip(self.times, self.values)):
                w.writerow([n, f"{t:.17g}", f"{y:.17g}"])


# -- history convolution -----------------------------------------------------

def _check_history_args(values, table: WeightTable, n: int) -> None:
    if n < 1:
        raise ValueError(f"step index must be >= 1, got {n}")
    if table.n_max < n:
        raise ValueError(f"weight table covers n <= {table.n_max}, requested n = {n}")
    if len(values) < n:
        raise ValueError(f"need values y_0..y_{n - 1}, got {len(values)} entries")


def history_sum_naive(values, table: WeightTable, n: int) -> float:
    """``sum_{k=1}^{n-1} omega_k * values[n-k]`` by direct summation.

    ``values`` is indexed from 0 (``values[0]`` is not used).
    """
    _check_history_args(values, table, n)
    if n == 1:
        return 0.0
    y = np.asarray(values[1:n], dtype=float)
    return float(np.dot(table.omega[n - 1 : 0 : -1], y))


class FastHistory:
    """Online evaluation of ``S_n = sum_{j=1}^{n-1} omega_{n-j} y_j``.

    Values are pushed in order ``y_1, y_2, ...``. Positions are split into
    aligned power-of-two blocks; when the left half of a block of size ``2L``
    (``L >= leaf``) is complete, its contribution to the right half is added
    with one FFT convolution. Pairs inside a ``leaf``-sized block are summed
    directly when ``S_n`` is requested.
    """

    def __init__(self, omega, n_max: int, leaf: int = 64):
        if leaf < 1 or leaf & (leaf - 1):
            raise ValueError("leaf size must be a power of two")
        self.n_max = int(n_max)
        self.leaf = leaf
        om = np.asarray(omega, dtype=float)
        if len(om) < self.n_max + 1:
            raise ValueError(f"weights cover n <= {len(om) - 1}, engine needs {self.n_max}")
        self._omega = om[: self.n_max + 1]
        self._orev = self._omega[::-1].copy()  # _orev[i] = omega_{n_max - i}
        self._y = np.zeros(self.n_max + 1)
        self._acc = np.zeros(self.n_max + 2)
        self._filled = 0  # y_1..y_filled are known
        self._kernels: dict[int, tuple[int, np.ndarray]] = {}

    def _kernel(self, L: int):
        if L not in self._kernels:
            # circular length 2L: outputs L..2L-1 receive no wrapped terms since
            # the linear convolution ends at index 3L-2
            nfft = 2 * L
            w = np.zeros(2 * L)
            m = min(2 * L, len(self._omega))
            w[:m] = self._omega[:m]
            self._kernels[L] = (nfft, np.fft.rfft(w, nfft))
        return self._kernels[L]

    def push(self, value: float) -> None:
        j = self._filled + 1
        if j > self.n_max:
            raise ValueError("engine is full")
        self._y[j] = value
        self._filled = j
        L = j & -j
        if L < self.leaf:
            return
        lo = j - L + 1  # left block holds y_lo..y_j
        m_hi = min(j + L, self.n_max)
        if m_hi <= j:
            return
        nfft, wk = self._kernel(L)
        conv = np.fft.irfft(np.fft.rfft(self._y[lo : j + 1], nfft) * wk, nfft)
        # entry i of conv pairs with m = lo + i; m = j+1.. needs i = L..
        self._acc[j + 1 : m_hi + 1] += conv[L : L + (m_hi - j)]

    def value(self, n: int) -> float:
        if n < 1 or n > self.n_max:
            raise ValueError(f"index {n} outside 1..{self.n_max}")
        if self._filled < n - 1:
            raise ValueError(f"S_{n} needs y_1..y_{n - 1}; only {self._filled} pushed")
        start = ((n - 1) // self.leaf) * self.leaf + 1
        direct = 0.0
        if start < n:
            # omega_{n-j} for j = start..n-1 sits at _orev[n_max - n + j]
            a = self.n_max - n + start
            direct = float(np.dot(self._orev[a : a + (n - start)], self._y[start:n]))
        return float(self._acc[n]) + direct


def history_sum_fast(values, table: WeightTable, n: int, leaf: int = 64) -> float:
    """Same contract as :func:`history_sum_naive`, evaluated with :class:`FastHistory`."""
    _check_history_args(values, table, n)
    if n == 1:
        return 0.0
    eng = FastHistory(table.omega, n, leaf=leaf)
    for v in np.asarray(values[1:n], dtype=float):
        eng.push(v)
    return eng.value(n)


# -- stepping ------------------------------------------------------------------

_EPS = np.finfo(float).eps


def solve_monotone(w0: float, c: float, gamma: float, r: float, guess: float | None = None,
                   max_iter: int = 200) -> float:
    """Positive root of ``w0*y + c*y**gamma = r`` for ``r > 0``, ``w0 > 0``, ``c >= 0``.

    Newton iteration kept inside the bracket ``[0, min(r/w0, (r/c)^(1/gamma))]``;
    a bisection step replaces any Newton step that leaves it.
    """
    if c == 0.0 or gamma == 1.0:
        return r / (w0 + c)
    lo = 0.0
    hi = r / w0
    if c > 0.0:
        try:
            hi = min(hi, (r / c) ** (1.0 / gamma))
        except OverflowError:
            pass  # bound is astronomically loose; r / w0 stands
    y = guess if guess is not None and lo < guess < hi else 0.5 * (lo + hi)
    for _ in range(max_iter):
        yg = y**gamma
        g = w0 * y + c * yg - r
        if g == 0.0:
            return y
        if g > 0.0:
            hi = y
        else:
            lo = y
        dg = w0 + c * gamma * yg / y
        y_new = y - g / dg
        if not (lo < y_new < hi):
            y_new = 0.5 * (lo + hi)
        if abs(y_new - y) <= 2.0 * _EPS * y_new or hi - lo <= 4.0 * _EPS * hi:
            return y_new
        y = y_new
    raise NoConvergence(f"root solve did not converge in {max_iter} iterations")


def _advance(problem: FodeProblem, w0: float, tau_a: float, t_n: float, f_n: float,
             delta_n: float, s_n: float, guess: float | None, n: int) -> float:
    r = tau_a * f_n - delta_n * problem.y0 - s_n
    c = tau_a * problem.nu * t_n**problem.beta
    if not r > 0.0:
        if problem.source.kind is SourceKind.ZERO:
            raise NonpositiveRightSide(
                f"r_{n} = {r!r} <= 0 with zero source; weight table or history is corrupt", step=n)
        if problem.gamma == 1.0:
            return r / (w0 + c)
        return 0.0
    try:
        return solve_monotone(w0, c, problem.gamma, r, guess)
    except NoConvergence as exc:
        raise NoConvergence(str(exc), step=n) from None


def step(problem: FodeProblem, table: WeightTable, history: Trajectory, n: int) -> float:
    """Compute ``y_n`` from ``y_0..y_{n-1}`` stored in ``history``."""
    if n < 1:
        raise ValueError(f"step index must be >= 1, got {n}")
    if len(history.values) < n:
        raise ValueError(f"history holds {len(history.values)} values, step {n} needs {n}")
    tau = history.tau
    s_n = history_sum_naive(history.values, table, n)
    t_n = n * tau
    f_n = float(problem.f_mesh(tau, n)[n])
    return _advance(problem, float(table.omega[0]), tau**problem.alpha, t_n, f_n,
                    float(table.delta[n]), s_n, float(history.values[n - 1]), n)


def solve(problem: FodeProblem, scheme: Scheme | str | WeightTable, tau: float, n_steps: int,
          engine: str = "fast") -> Trajectory:
    """Run ``n_steps`` implicit steps of size ``tau``."""
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValueError(f"n_steps must be a positive integer, got {n_steps}")
    if not tau > 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    if engine not in ("fast", "naive"):
        raise ValueError(f"engine must be 'fast' or 'naive', got {engine!r}")
    n_steps = int(n_steps)
    if isinstance(scheme, WeightTable):
        table = scheme
        if table.alpha != problem.alpha:
            raise ValueError("weight table alpha does not match the problem")
        if table.n_max < n_steps:
            raise ValueError(f"weight table covers {table.n_max} steps, need {n_steps}")
    else:
        table = make_weights(scheme, problem.alpha, n_steps)

    y = np.empty(n_steps + 1)
    y[0] = problem.y0
    f = problem.f_mesh(tau, n_steps)
    w0 = float(table.omega[0])
    delta = table.delta
    tau_a = tau**problem.alpha
    if engine == "fast":
        hist = FastHistory(table.omega, n_steps)
        s_of = hist.value
    else:
        orev = np.ascontiguousarray(table.omega[n_steps:0:-1])  # orev[i] = omega_{n_steps - i}

        def s_of(n):
            # omega_{n-j} for j = 1..n-1
            return float(np.dot(orev[n_steps - n + 1 : n_steps], y[1:n])) if n > 1 else 0.0

    for n in range(1, n_steps + 1):
        y[n] = _advance(problem, w0, tau_a, n * tau, float(f[n]), float(delta[n]), s_of(n),
                        float(y[n - 1]), n)
        if engine == "fast" and n < n_steps:
            hist.push(y[n])
    return Trajectory(tau, y)
