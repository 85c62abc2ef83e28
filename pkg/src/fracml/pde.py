"""Time-fractional sub-diffusion on the unit square.

    D_t^alpha u - nu t^beta Lap u = t^beta / (1 + t)^(alpha+beta),   u = 0 on the boundary

Space is discretized with the 5-point stencil on an m x m interior grid and
time with a CM-preserving convolution quadrature. Each step solves an SPD
system with Jacobi-preconditioned conjugate gradients.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fode import NoConvergence
from .quadrature import Scheme, WeightTable, make_weights

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Grid2D:
    m: int

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 2:
            raise ValueError(f"m must be an integer >= 2, got {self.m}")

    @property
    def h(self) -> float:
        return 1.0 / (self.m + 1)

    @property
    def size(self) -> int:
        return self.m * self.m

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Interior coordinates as (x1, x2) arrays of shape (m, m), row index = x1."""
        x = self.h * np.arange(1, self.m + 1)
        return np.meshgrid(x, x, indexing="ij")


@dataclass
class Field:
    """Interior nodal values in row-major order."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.values.size != self.grid.size:
            raise ValueError(f"field has {self.values.size} values, grid needs {self.grid.size}")

    @classmethod
    def from_function(cls, grid: Grid2D, fn) -> "Field":
        x1, x2 = grid.nodes()
        return cls(grid, fn(x1, x2))

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.grid.m, self.grid.m)


def sine_mode(x1, x2, amplitude: float = 10.0):
    return amplitude * np.sin(np.pi * x1) * np.sin(np.pi * x2)


@dataclass(frozen=True)
class PdeProblem:
    alpha: float
    beta: float
    nu: float = 1.0
    amplitude: float = 10.0  # u0 = amplitude * sin(pi x1) sin(pi x2)
    source_scale: float = 1.0  # f = source_scale * t^beta / (1 + t)^(alpha+beta)

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.beta > -self.alpha:
            raise ValueError(f"beta must exceed -alpha = {-self.alpha}, got {self.beta}")
        if not self.nu > 0.0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if not self.amplitude >= 0.0:
            raise ValueError(f"amplitude must be nonnegative, got {self.amplitude}")
        if not self.source_scale >= 0.0:
            raise ValueError(f"source_scale must be nonnegative, got {self.source_scale}")

    @property
    def rate(self) -> float:
        return self.alpha + self.beta

    def source(self, t: float) -> float:
        """Space-constant source value; only evaluated for t > 0 by the stepper."""
        if self.source_scale == 0.0:
            return 0.0
        if t <= 0.0:
            raise ValueError(f"source is evaluated at t > 0 only, got t={t}")
        return self.source_scale * t**self.beta / (1.0 + t) ** self.rate

    def initial_field(self, grid: Grid2D) -> Field:
        return Field.from_function(grid, lambda x1, x2: sine_mode(x1, x2, self.amplitude))


def _neg_lap(u: np.ndarray, m: int, h: float) -> np.ndarray:
    """-Lap_h on flat vectors (or a stack of them along axis 0) with zero boundary."""
    v = u.reshape(-1, m, m)
    out = 4.0 * v
    out[:, 1:, :] -= v[:, :-1, :]
    out[:, :-1, :] -= v[:, 1:, :]
    out[:, :, 1:] -= v[:, :, :-1]
    out[:, :, :-1] -= v[:, :, 1:]
    out /= h * h
    return out.reshape(u.shape)


def laplacian_apply(field: Field, grid: Grid2D | None = None) -> Field:
    """Return ``-Lap_h field``."""
    if grid is not None and grid != field.grid:
        raise ValueError(f"grid mismatch: field on m={field.grid.m}, operator on m={grid.m}")
    g = field.grid
    return Field(g, _neg_lap(field.values, g.m, g.h))


def ls_norm(field: Field | np.ndarray, s: float, h: float | None = None) -> float:
    """Rectangle-rule ``L^s`` norm over interior nodes."""
    if not s > 1.0 or not math.isfinite(s):
        raise ValueError(f"s must lie in (1, inf), got {s}")
    if isinstance(field, Field):
        v, h = field.values, field.grid.h
    else:
        if h is None:
            raise ValueError("h is required for raw arrays")
        v = np.asarray(field, dtype=float)
    return float((h * h * np.sum(np.abs(v) ** s)) ** (1.0 / s))


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool


def pcg(apply_a, b: np.ndarray, diag: np.ndarray, x0: np.ndarray | None = None,
        rtol: float = 1e-10, max_iter: int = 1000) -> CGResult:
    """Jacobi-preconditioned conjugate gradients; stops on ``|r| <= rtol |b|``."""
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return CGResult(np.zeros_like(b), 0, 0.0, True)
    r = b - apply_a(x)
    target = rtol * bnorm
    rn = float(np.linalg.norm(r))
    if rn <= target:
        return CGResult(x, 0, rn / bnorm, True)
    inv_d = 1.0 / diag
    z = inv_d * r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, max_iter + 1):
        ap = apply_a(p)
        step = rz / float(p @ ap)
        x += step * p
        r -= step * ap
        rn = float(np.linalg.norm(r))
        if rn <= target:
            return CGResult(x, it, rn / bnorm, True)
        z = inv_d * r
        rz_new = float(r @ z)
        p *= rz_new / rz
        p += z
        rz = rz_new
    return CGResult(x, max_iter, rn / bnorm, False)


def step_system(problem: PdeProblem, table: WeightTable, tau: float, grid: Grid2D, n: int):
    """Operator, Jacobi diagonal and time for step n."""
    t = n * tau
    a0 = table.omega[0] / tau**problem.alpha
    c = problem.nu * t**problem.beta
    m, h = grid.m, grid.h

    def apply_a(u):
        return a0 * u + c * _neg_lap(u, m, h)

    diag = np.full(grid.size, a0 + 4.0 * c / (h * h))
    return apply_a, diag, t


def history_term(table: WeightTable, history: np.ndarray, n: int) -> np.ndarray:
    """``delta_n U_0 + sum_{k=1}^{n-1} omega_k U_{n-k}`` for stacked fields ``history[0..n-1]``."""
    acc = table.delta[n] * history[0]
    if n > 1:
        # a contiguous copy of the reversed slice keeps the product on the BLAS path
        acc = acc + np.ascontiguousarray(table.omega[n - 1 : 0 : -1]) @ history[1:n]
    return acc


def pde_step(problem: PdeProblem, table: WeightTable, tau: float, history, n: int,
             grid: Grid2D | None = None, rtol: float = 1e-10, max_iter: int | None = None) -> Field:
    """Advance to step n given fields ``U_0..U_{n-1}`` (Fields or a stacked array)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if isinstance(history, np.ndarray):
        stack = history
        if grid is None:
            grid = Grid2D(int(round(math.sqrt(stack.shape[1]))))
    else:
        fields = list(history)
        if grid is None:
            grid = fields[0].grid
        if any(f.grid != grid for f in fields):
            raise ValueError("grid mismatch in history")
        stack = np.stack([f.values for f in fields])
    if stack.shape[0] < n:
        raise ValueError(f"need {n} history fields, got {stack.shape[0]}")
    x, _, _ = _solve_step(problem, table, tau, grid, stack, n, rtol,
                          10 * grid.m if max_iter is None else max_iter)
    return Field(grid, x)


def _solve_step(problem, table, tau, grid, stack, n, rtol, max_iter):
    apply_a, diag, t = step_system(problem, table, tau, grid, n)
    hist = history_term(table, stack, n)
    rhs = problem.source(t) - hist / tau**problem.alpha
    res = pcg(apply_a, rhs, diag, x0=stack[n - 1], rtol=rtol, max_iter=max_iter)
    if not res.converged:
        raise NoConvergence(
            f"CG did not reach rtol={rtol:g} in {max_iter} iterations (residual {res.residual:.3e})", n)
    return res.x, res.iterations, hist


@dataclass
class NormInequality:
    """Per-step slack of ``|U|^(s-1) D|U| <= int U^(s-1) DU``."""

    lhs: np.ndarray
    rhs: np.ndarray
    scale: np.ndarray
    tol: float = 1e-10

    @property
    def slack(self) -> np.ndarray:
        return self.rhs - self.lhs

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


@dataclass
class PdeResult:
    problem: PdeProblem
    grid: Grid2D
    tau: float
    s: float
    norms: np.ndarray
    iterations: np.ndarray
    min_value: np.ndarray
    inequality: NormInequality
    final: Field | None = None
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.tau * np.arange(len(self.norms))

    @property
    def n_steps(self) -> int:
        return len(self.norms) - 1

    def to_csv(self, path) -> None:
        write_norm_csv(path, self.times, self.norms)


def _norm_inequality(table, tau, alpha, s, h, norms, rows, n):
    """One step of the L^s norm inequality, returning (lhs, rhs, scale)."""
    om, de = table.omega, table.delta
    phi = norms[: n + 1]
    # omega_{n-1}..omega_0 pair with phi_1..phi_n
    d_norm = (de[n] * phi[0] + np.dot(om[n - 1 :: -1], phi[1 : n + 1])) / tau**alpha
    mag_norm = (abs(de[n]) * phi[0] + np.dot(np.abs(om[n - 1 :: -1]), phi[1 : n + 1])) / tau**alpha
    du, du_mag, un = rows
    pw = np.abs(un) ** (s - 1.0) * np.sign(un)
    lhs = phi[n] ** (s - 1.0) * d_norm
    rhs = h * h * float(pw @ du)
    scale = phi[n] ** (s - 1.0) * mag_norm + h * h * float(np.abs(pw) @ du_mag)
    return lhs, rhs, scale


def solve_pde(problem: PdeProblem, scheme: Scheme | str | WeightTable, tau: float, n_steps: int,
              s: float = 2.0, m: int = 64, rtol: float = 1e-10, max_iter: int | None = None,
              keep_final: bool = True) -> PdeResult:
    """Run to ``t = n_steps * tau`` and record ``|U_n|_{L^s}`` at every step."""
    if not tau > 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValueError(f"n_steps must be a positive integer, got {n_steps}")
    if not s > 1.0:
        raise ValueError(f"s must lie in (1, inf), got {s}")
    grid = Grid2D(m)
    if isinstance(scheme, WeightTable):
        table = scheme
        if table.n_max < n_steps or table.alpha != problem.alpha:
            raise ValueError("weight table does not match alpha or is too short")
    else:
        table = make_weights(scheme, problem.alpha, n_steps)
    cap = 10 * m if max_iter is None else max_iter
    a, h = problem.alpha, grid.h
    om, de = table.omega, table.delta

    stack = np.empty((n_steps + 1, grid.size))
    stack[0] = problem.initial_field(grid).values
    norms = np.empty(n_steps + 1)
    norms[0] = ls_norm(stack[0], s, h)
    iters = np.zeros(n_steps + 1, dtype=int)
    mins = np.empty(n_steps + 1)
    mins[0] = stack[0].min()
    lhs = np.empty(n_steps)
    rhs = np.empty(n_steps)
    scale = np.empty(n_steps)
    abs_stack = np.empty_like(stack)
    abs_stack[0] = np.abs(stack[0])
    abs_om = np.abs(np.asarray(om))

    for n in range(1, n_steps + 1):
        x, it, hist = _solve_step(problem, table, tau, grid, stack, n, rtol, cap)
        stack[n] = x
        abs_stack[n] = np.abs(x)
        iters[n] = it
        mins[n] = x.min()
        norms[n] = ls_norm(x, s, h)
        # pointwise discrete derivative D U_n and its magnitude sum
        du = (hist + om[0] * x) / tau**a
        du_mag = (abs(de[n]) * abs_stack[0] + np.ascontiguousarray(abs_om[n - 1 :: -1]) @ abs_stack[1 : n + 1]) / tau**a
        lhs[n - 1], rhs[n - 1], scale[n - 1] = _norm_inequality(
            table, tau, a, s, h, norms, (du, du_mag, x), n)
        log.debug("step %d t=%.6g cg_iterations=%d", n, n * tau, it)
    log.info("pde run alpha=%g beta=%g m=%d: %d steps, max CG iterations %d",
             problem.alpha, problem.beta, m, n_steps, iters.max())
    return PdeResult(problem, grid, tau, s, norms, iters, mins,
                     NormInequality(lhs, rhs, scale),
                     Field(grid, stack[n_steps].copy()) if keep_final else None,
                     {"scheme": table.scheme.value, "rtol": rtol, "max_iter": cap})


def write_norm_csv(path, times, norms) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "t", "norm"])
        for n, (t, v) in enumerate(zip(times, norms)):
            w.writerow([n, f"{t:.17g}", f"{v:.17g}"])
