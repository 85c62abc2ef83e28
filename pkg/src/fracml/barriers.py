"""Sub- and supersolutions with explicit constants, and comparison checks.

Continuous barriers bracket the exact solution of the fractional ODE;
discrete barriers bracket the CM-preserving numerical solution. Every
discrete construction is a plateau (or a ``t^(alpha+beta)`` descent) up to a
transition mesh index followed by a pure power law ``C t_n^(-(alpha+beta)/gamma)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fode import FodeProblem, SourceKind
from .quadrature import DecayConstants, WeightTable, estimate_decay_constants


class BarrierError(ValueError):
    """Barrier constants cannot be realised for the given data or mesh."""


SUB, SUP = "sub", "sup"
HOMOGENEOUS, NONHOMOGENEOUS = "homogeneous", "nonhomogeneous"


def _source_bound(problem: FodeProblem) -> float:
    if problem.source.kind is SourceKind.DECAY:
        return problem.source.K
    if problem.source.kind is SourceKind.ZERO:
        return 0.0
    raise BarrierError("barriers need a zero or decay-bounded source")


def fitted_constants(table: WeightTable, n_range: tuple[int, int] | None = None,
                     widen: float = 0.1) -> DecayConstants:
    """``(c3, c4)`` fitted on ``n_range`` and widened by ``widen`` on both sides.

    The default range starts at n = 1 because the bounds must hold for every
    index the constructions touch; the largest scaled values sit at small n.
    """
    if n_range is None:
        n_range = (1, min(table.n_max, 10_000))
    return estimate_decay_constants(table, n_range).widened(widen)


# -- continuous barriers ------------------------------------------------------

@dataclass(frozen=True)
class ContinuousBarrier:
    kind: str
    problem: FodeProblem
    constants: dict

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        p = self.problem
        ab = p.alpha + p.beta
        rate = p.rate
        c = self.constants
        with np.errstate(divide="ignore"):
            if self.kind == SUB:
                head = c["phi0"] - c["slope"] * t**ab
                tail = c["C_star"] * c["phi0"] * c["eps"] ** rate * t ** (-rate)
                out = np.where(t <= c["eps"], head, tail)
            else:
                tail = c["phi0"] * c["t0"] ** rate * t ** (-rate)
                out = np.where(t <= c["t0"], c["phi0"], tail)
        return out if out.ndim else float(out)


def continuous_sub(problem: FodeProblem) -> ContinuousBarrier:
    """Piecewise subsolution ``phi0 - s t^(a+b)`` on ``[0, eps]``, power law after."""
    a, b, g, nu = problem.alpha, problem.beta, problem.gamma, problem.nu
    phi0 = problem.y0
    K = _source_bound(problem)
    if phi0**g < K / nu:
        raise BarrierError(f"phi0^gamma = {phi0**g:.6g} < K/nu = {K / nu:.6g}")
    if g != 1.0:
        bound = (4.0 * nu * math.gamma(1.0 - a)) ** (g / (1.0 - g))
        if phi0**g < bound:
            raise BarrierError(
                f"phi0^gamma = {phi0**g:.6g} < (4 nu Gamma(1-alpha))^(gamma/(1-gamma)) = {bound:.6g}")
    g1b = math.gamma(1.0 + b)
    g1ab = math.gamma(1.0 + a + b)
    c_star = min((g1b / (g1ab * math.gamma(1.0 - a))) ** (1.0 / g), 0.5)
    eps = ((1.0 - c_star) * phi0 ** (1.0 - g) * g1ab / (2.0 * nu * g1b)) ** (1.0 / (a + b))
    slope = 2.0 * nu * phi0**g * g1b / g1ab
    return ContinuousBarrier(SUB, problem, {"phi0": phi0, "C_star": c_star, "eps": eps,
                                            "slope": slope})


def continuous_sup(problem: FodeProblem) -> ContinuousBarrier:
    a, b, g, nu = problem.alpha, problem.beta, problem.gamma, problem.nu
    phi0 = problem.y0
    inner = 1.0 / math.gamma(1.0 - a) + (a + b) / (g * math.gamma(2.0 - a))
    t0 = (phi0 ** (1.0 - g) * 2.0 ** (a + 1.0) / nu * inner) ** (1.0 / (a + b))
    return ContinuousBarrier(SUP, problem, {"phi0": phi0, "t0": t0})


# -- discrete barriers --------------------------------------------------------

@dataclass(frozen=True)
class DiscreteBarrier:
    """Barrier sequence on the mesh ``t_n = n * tau``.

    ``transition`` is the last index of the head piece; for ``n > transition``
    the sequence equals ``tail_coef * t_n^(-(alpha+beta)/gamma)``.
    """

    kind: str
    case: str
    problem: FodeProblem
    tau: float
    decay: DecayConstants
    transition: int
    tail_coef: float
    head_slope: float = 0.0  # head is phi0 - head_slope * t^(a+b) / Gamma(1+a+b)
    constants: dict = field(default_factory=dict)

    @property
    def phi0(self) -> float:
        return self.problem.y0

    def at(self, n) -> np.ndarray:
        p = self.problem
        n = np.asarray(n)
        t = self.tau * n
        head = self.phi0 - self.head_slope * t ** (p.alpha + p.beta) / math.gamma(1.0 + p.alpha + p.beta)
        with np.errstate(divide="ignore"):
            tail = self.tail_coef * t ** (-p.rate)
        return np.where(n <= self.transition, head, tail)

    def values(self, n_max: int) -> np.ndarray:
        return self.at(np.arange(n_max + 1))

    def __call__(self, n: int) -> float:
        return float(self.at(n))

    @property
    def envelope_constant(self) -> float:
        """``C5`` (sub) or ``C6`` (sup) with ``C5 <= x_n (1 + t_n^rate) <= C6``."""
        rate = self.problem.rate
        if self.kind == SUB:
            return min(self(self.transition), self.tail_coef)
        return self.phi0 * (1.0 + (self.transition * self.tau) ** rate)


_FIX_STEPS = 8


def _max_index_below(tau: float, expo: float, thr: float) -> int:
    """Largest n with (n tau)^expo <= thr."""
    n = int(math.floor(thr ** (1.0 / expo) / tau))
    # a few unit corrections absorb rounding in the root; beyond 2^53 the
    # mesh points are no longer distinguishable in floating point anyway
    for _ in range(_FIX_STEPS):
        if ((n + 1) * tau) ** expo > thr:
            break
        n += 1
    for _ in range(_FIX_STEPS):
        if n == 0 or (n * tau) ** expo <= thr:
            break
        n -= 1
    return n


def _min_index_above(tau: float, expo: float, thr: float) -> int:
    """Smallest n with (n tau)^expo >= thr."""
    n = max(int(math.ceil(thr ** (1.0 / expo) / tau)), 0)
    for _ in range(_FIX_STEPS):
        if n == 0 or ((n - 1) * tau) ** expo < thr:
            break
        n -= 1
    for _ in range(_FIX_STEPS):
        if (n * tau) ** expo >= thr:
            break
        n += 1
    return n


def _decay(table: WeightTable, decay: DecayConstants | None) -> DecayConstants:
    if table is not None and decay is None:
        return fitted_constants(table)
    if decay is None:
        raise ValueError("need a weight table or explicit decay constants")
    return decay


def _check_shape(bar: DiscreteBarrier, label: str) -> DiscreteBarrier:
    n = bar.transition
    v = {n: bar(n), n + 1: bar(n + 1)}
    if not v[n] > 0.0:
        raise BarrierError(f"{label}: head value {v[n]!r} at transition n={n} is not positive; shrink tau")
    # the tail at n+1 can round up to the head value when n is huge
    if not v[n] * (1.0 + 8.0 * np.finfo(float).eps) >= v[n + 1]:
        raise BarrierError(f"{label}: junction ordering fails at n={n} ({v[n]!r} < {v[n + 1]!r}); shrink tau")
    return bar


def discrete_sub_homog(problem: FodeProblem, table: WeightTable, tau: float,
                       decay: DecayConstants | None = None) -> DiscreteBarrier:
    a, b, g, nu, y0 = problem.alpha, problem.beta, problem.gamma, problem.nu, problem.y0
    d = _decay(table, decay)
    ab = a + b
    mu = nu * y0**g * math.gamma(1.0 + ab) / d.c3
    thr = d.c3 * y0 ** (1.0 - g) / (2.0 * nu)
    n1 = _max_index_below(tau, ab, thr)
    if n1 == 0:
        raise BarrierError(
            f"no positive mesh point has t^(alpha+beta) <= {thr:.3e}; shrink tau below "
            f"{thr ** (1.0 / ab):.3e}")
    t1 = n1 * tau
    c7 = 0.5 * y0 * t1**problem.rate
    bar = DiscreteBarrier(SUB, HOMOGENEOUS, problem, tau, d, n1, c7, mu,
                          {"mu": mu, "n1": n1, "t_n1": t1, "C7": c7})
    return _check_shape(bar, "homogeneous subsolution")


def discrete_sup_homog(problem: FodeProblem, table: WeightTable, tau: float,
                       decay: DecayConstants | None = None) -> DiscreteBarrier:
    a, b, g, nu, y0 = problem.alpha, problem.beta, problem.gamma, problem.nu, problem.y0
    d = _decay(table, decay)
    ab = a + b
    q = ab / (g * (1.0 - a))
    thr = y0 ** (1.0 - g) / nu * 2.0**a * d.c4 * max(q, q * 2.0**problem.rate + 1.0)
    n2 = _min_index_above(tau, ab, thr)
    t2 = n2 * tau
    c8 = y0 * t2**problem.rate
    bar = DiscreteBarrier(SUP, HOMOGENEOUS, problem, tau, d, n2, c8, 0.0,
                          {"n2": n2, "t_n2": t2, "C8": c8})
    return _check_shape(bar, "homogeneous supersolution")


def nonhomog_phi0_bound(problem: FodeProblem, decay: DecayConstants) -> float:
    """Smallest initial value admitted by the non-homogeneous constructions."""
    K = _source_bound(problem)
    g = problem.gamma
    return max((K / problem.nu) ** (1.0 / g), 2.0 * K / (decay.c3 * (1.0 - 2.0 ** (-(g + 1.0)))))


def _check_phi0(problem: FodeProblem, d: DecayConstants) -> None:
    bound = nonhomog_phi0_bound(problem, d)
    if problem.y0 < bound:
        raise BarrierError(f"phi0 = y0 = {problem.y0:.6g} is below the admissible bound {bound:.6g}")


def discrete_sub_nonhomog(problem: FodeProblem, table: WeightTable, tau: float,
                          decay: DecayConstants | None = None) -> DiscreteBarrier:
    a, b, g, nu, phi0 = problem.alpha, problem.beta, problem.gamma, problem.nu, problem.y0
    d = _decay(table, decay)
    _check_phi0(problem, d)
    ab = a + b
    theta = 2.0 * phi0**g * nu * math.gamma(1.0 + ab) / d.c3
    thr = d.c3 * phi0 ** (1.0 - g) / (4.0 * nu)  # threshold on t^(a+b)
    n3 = _min_index_above(tau, ab, thr)
    if n3 == 0:
        raise BarrierError("transition index n3 = 0; shrink tau")
    t3 = n3 * tau
    c10 = 0.5 * phi0 * t3**problem.rate
    bar = DiscreteBarrier(SUB, NONHOMOGENEOUS, problem, tau, d, n3, c10, theta,
                          {"theta": theta, "n3": n3, "t_n3": t3, "C10": c10})
    return _check_shape(bar, "non-homogeneous subsolution")


def discrete_sup_nonhomog(problem: FodeProblem, table: WeightTable, tau: float,
                          decay: DecayConstants | None = None) -> DiscreteBarrier:
    a, b, g, nu, phi0 = problem.alpha, problem.beta, problem.gamma, problem.nu, problem.y0
    d = _decay(table, decay)
    _check_phi0(problem, d)
    ab = a + b
    q = ab / (g * (1.0 - a)) * 2.0**problem.rate + 1.0
    t_thr = (d.c4 * phi0 ** (1.0 - g) * 2.0**a / nu * q + 1.0) ** (1.0 / ab)
    n4 = _min_index_above(tau, 1.0, t_thr)
    t4 = n4 * tau
    coef = phi0 * t4**problem.rate
    bar = DiscreteBarrier(SUP, NONHOMOGENEOUS, problem, tau, d, n4, coef, 0.0,
                          {"n4": n4, "t_n4": t4})
    return _check_shape(bar, "non-homogeneous supersolution")


def barrier_pair(problem: FodeProblem, table: WeightTable, tau: float,
                 decay: DecayConstants | None = None) -> tuple[DiscreteBarrier, DiscreteBarrier]:
    """Sub/sup pair matching the problem's source (homogeneous when ``K = 0``)."""
    if _source_bound(problem) > 0.0:
        return (discrete_sub_nonhomog(problem, table, tau, decay),
                discrete_sup_nonhomog(problem, table, tau, decay))
    return (discrete_sub_homog(problem, table, tau, decay),
            discrete_sup_homog(problem, table, tau, decay))


def suggest_tau(problem: FodeProblem, decay: DecayConstants, points: int = 4) -> float:
    """A step size placing about ``points`` mesh points before the subsolution transition."""
    ab = problem.alpha + problem.beta
    g, nu, y0 = problem.gamma, problem.nu, problem.y0
    if _source_bound(problem) > 0.0:
        t_thr = (decay.c3 * y0 ** (1.0 - g) / (4.0 * nu)) ** (1.0 / ab)
        # land the first mesh point at or beyond the threshold just above it
        return t_thr / (points - 1e-9)
    t_thr = (decay.c3 * y0 ** (1.0 - g) / (2.0 * nu)) ** (1.0 / ab)
    return t_thr / (points + 0.5)


# -- checks -------------------------------------------------------------------

@dataclass
class InequalityReport:
    kind: str
    residual: np.ndarray  # D(x)_n + nu t_n^beta x_n^gamma, n = 1..N
    target: np.ndarray
    slack: np.ndarray  # nonnegative when the inequality holds
    scale: np.ndarray
    tol: float

    @property
    def normalized_slack(self) -> np.ndarray:
        return self.slack / self.scale

    @property
    def passed(self) -> bool:
        return bool(np.all(self.slack >= -self.tol * self.scale))

    @property
    def first_violation(self) -> int | None:
        bad = np.flatnonzero(self.slack < -self.tol * self.scale)
        return int(bad[0]) + 1 if bad.size else None


def discrete_operator(values, table: WeightTable, tau: float, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """``D_tau^alpha`` of a sequence at n = 1..N and the magnitude of its terms.

    The second array is ``tau^-alpha (|delta_n| |x_0| + sum_k |omega_k| |x_{n-k}|)``.
    ``np.convolve`` sums directly (no FFT), so every entry carries the same
    terms as :func:`history_sum_naive`.
    """
    x = np.asarray(values, dtype=float)
    N = len(x) - 1
    if table.n_max < N:
        raise ValueError(f"table covers {table.n_max} steps, sequence has {N}")
    om = np.asarray(table.omega[: N + 1])
    de = np.asarray(table.delta[1 : N + 1])
    absx = np.abs(x)
    # the k = n term omega_n x_0 of the full convolution is not part of the operator
    full = np.convolve(om, x)[1 : N + 1] - om[1:] * x[0]
    mag = np.convolve(np.abs(om), absx)[1 : N + 1] - np.abs(om[1:]) * absx[0]
    scale = tau ** (-alpha)
    return (de * x[0] + full) * scale, (np.abs(de) * absx[0] + mag) * scale


def check_inequality(barrier: DiscreteBarrier, table: WeightTable, n_max: int,
                     tol: float = 1e-12) -> InequalityReport:
    """Evaluate ``D(x) + nu t^beta x^gamma`` against the construction's bound.

    A subsolution must stay below ``-K t^beta/(t+1)^(a+b)``, a supersolution
    above ``+K t^beta/(t+1)^(a+b)`` (``K = 0`` in the homogeneous case).
    """
    p = barrier.problem
    x = barrier.values(n_max)
    D, mag = discrete_operator(x, table, barrier.tau, p.alpha)
    t = barrier.tau * np.arange(1, n_max + 1)
    reaction = p.nu * t**p.beta * x[1:] ** p.gamma
    res = D + reaction
    K = _source_bound(p) if barrier.case == NONHOMOGENEOUS else 0.0
    bound = K * t**p.beta / (t + 1.0) ** (p.alpha + p.beta)
    if barrier.kind == SUB:
        target = -bound
        slack = target - res
    else:
        target = bound
        slack = res - target
    scale = mag + reaction + np.abs(target)
    return InequalityReport(barrier.kind, res, target, slack, scale, tol)


@dataclass
class ComparisonReport:
    slack_sub: np.ndarray  # mid - sub
    slack_sup: np.ndarray  # sup - mid
    first_violation: int | None
    violations: int

    @property
    def passed(self) -> bool:
        return self.violations == 0

    @property
    def min_slack(self) -> tuple[float, float]:
        return float(self.slack_sub.min()), float(self.slack_sup.min())


def check_comparison(sub, mid, sup) -> ComparisonReport:
    """Locate the first index where ``sub <= mid <= sup`` breaks."""
    sub, mid, sup = (np.asarray(v, dtype=float) for v in (sub, mid, sup))
    if not (len(sub) == len(mid) == len(sup)):
        raise ValueError(f"length mismatch: {len(sub)}, {len(mid)}, {len(sup)}")
    lo = mid - sub
    hi = sup - mid
    bad = np.flatnonzero((lo < 0.0) | (hi < 0.0))
    return ComparisonReport(lo, hi, int(bad[0]) if bad.size else None, int(bad.size))


def check_envelope(values, tau: float, rate: float, c_lo: float, c_hi: float) -> int:
    """Number of indices violating ``c_lo/(1+t^rate) <= y_n <= c_hi/(1+t^rate)``."""
    y = np.asarray(values, dtype=float)
    w = 1.0 + (tau * np.arange(len(y))) ** rate
    return int(np.count_nonzero((y * w < c_lo) | (y * w > c_hi)))


def write_audit_csv(path, tau: float, sub, mid, sup) -> None:
    rep = check_comparison(sub, mid, sup)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "t", "sub", "mid", "sup", "slack_sub", "slack_sup"])
        for n in range(len(mid)):
            w.writerow([n, f"{n * tau:.17g}", f"{sub[n]:.17g}", f"{mid[n]:.17g}", f"{sup[n]:.17g}",
                        f"{rep.slack_sub[n]:.17g}", f"{rep.slack_sup[n]:.17g}"])
