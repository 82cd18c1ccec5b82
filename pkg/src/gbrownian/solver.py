"""Monotone explicit finite differences for the G-heat equation.

The scheme is

    u[k+1, i] = u[k, i] + dt * G((u[k, i+1] + u[k, i-1] - 2 u[k, i]) / dx^2)

with boundary nodes frozen at their initial values. Under ``dt <= dx^2 /
sigma_hi_sq`` every update is a convex combination of neighbours with
nonnegative weights, so the scheme is monotone and obeys a discrete comparison
principle.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numba import njit

from .band import TerminalPayoff, VolatilityBand, alpha_exponent
from .policy import ControlPolicy


class SolverError(RuntimeError):
    pass


class CFLError(SolverError):
    pass


class DomainError(SolverError):
    pass


class SolverInconsistency(SolverError):
    pass


@dataclass(frozen=True)
class Grid1D:
    x_min: float
    x_max: float
    nx: int

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError("need x_min < x_max")
        if self.nx < 4:
            raise ValueError("need at least 4 intervals")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    @property
    def nodes(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.nx + 1)


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    nt: int

    def __post_init__(self):
        if not self.horizon > 0 or self.nt < 1:
            raise ValueError("need horizon > 0 and nt >= 1")

    @property
    def dt(self) -> float:
        return self.horizon / self.nt


@dataclass(frozen=True)
class SolverParams:
    """Discretization knobs shared by every solve-based routine.

    ``cfl`` is the fraction of the largest stable step ``dx^2 / sigma_hi_sq``.
    ``stagger=None`` staggers the grid (jump points mid-cell) only for payoffs
    that have jump points.
    """

    dx: float = 0.01
    cfl: float = 0.5
    margin_sd: float = 4.0
    max_levels: int = 401
    stagger: bool | None = None

    def __post_init__(self):
        if not self.dx > 0:
            raise ValueError("dx must be positive")
        if not 0 < self.cfl <= 1:
            raise ValueError("cfl must be in (0, 1]")
        if self.max_levels < 2:
            raise ValueError("max_levels must be >= 2")

    def refined(self) -> "SolverParams":
        """Half the space step; with fixed ``cfl`` the time step drops by 4."""
        return replace(self, dx=self.dx / 2)


def domain_margin(band: VolatilityBand, horizon: float, margin_sd: float = 4.0) -> float:
    return margin_sd * math.sqrt(band.sigma_hi_sq * horizon)


def make_grids(
    payoff: TerminalPayoff,
    band: VolatilityBand,
    horizon: float,
    params: SolverParams = SolverParams(),
    query: Sequence[float] = (0.0,),
) -> tuple[Grid1D, TimeGrid]:
    """Smallest grid that satisfies the truncation rule and covers ``query``."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    dx = params.dx
    margin = domain_margin(band, horizon, params.margin_sd)
    span = payoff.feature_span()
    pts = list(query) + (list(span) if span else [])
    lo, hi = min(pts) - margin, max(pts) + margin
    jumps = payoff.jump_points()
    stagger = bool(jumps) if params.stagger is None else params.stagger
    anchor = jumps[0] if jumps else 0.0
    off = 0.5 if stagger else 0.0
    i_lo = math.floor((lo - anchor) / dx - off) - 1
    i_hi = math.ceil((hi - anchor) / dx - off) + 1
    grid = Grid1D(anchor + (i_lo + off) * dx, anchor + (i_hi + off) * dx, i_hi - i_lo)
    nt = max(1, math.ceil(horizon * band.sigma_hi_sq / (params.cfl * dx * dx) - 1e-9))
    return grid, TimeGrid(horizon, nt)


@njit(cache=True)
def _march(u0, lo_half, hi_half, nsteps, save_steps, out):
    # lo_half / hi_half are sigma^2 dt / (2 dx^2) for each branch of G.
    u = u0.copy()
    w = u0.copy()
    n = u.size
    out[0, :] = u
    j = 1
    for k in range(1, nsteps + 1):
        for i in range(1, n - 1):
            d = (u[i + 1] + u[i - 1]) - 2.0 * u[i]
            if d > 0.0:
                w[i] = u[i] + hi_half * d
            else:
                w[i] = u[i] + lo_half * d
        u, w = w, u
        if j < save_steps.size and save_steps[j] == k:
            out[j, :] = u
            j += 1
    return u


def _second_difference(u: np.ndarray) -> np.ndarray:
    # Symmetric summation order keeps mirror-symmetric data exactly symmetric.
    d = np.zeros_like(u)
    d[..., 1:-1] = (u[..., 2:] + u[..., :-2]) - 2.0 * u[..., 1:-1]
    d[..., 0] = d[..., 1]
    d[..., -1] = d[..., -2]
    return d


@dataclass(frozen=True, eq=False)
class SpaceTimeField:
    """Solved values ``u(t, x)`` on stored time levels.

    Only ``len(level_times)`` evenly spread levels of the march are kept
    (always including the first and last).
    """

    grid: Grid1D
    time_grid: TimeGrid
    values: np.ndarray
    level_times: np.ndarray
    payoff: TerminalPayoff | None = None
    band: VolatilityBand | None = None

    @property
    def xs(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def at(self, t: float, x=0.0):
        """Bilinear interpolation between stored levels and nodes."""
        if not 0.0 <= t <= self.time_grid.horizon * (1 + 1e-12):
            raise ValueError(f"t={t} outside [0, {self.time_grid.horizon}]")
        x = np.asarray(x, dtype=float)
        if np.any(x < self.grid.x_min) or np.any(x > self.grid.x_max):
            raise ValueError("x outside the solved domain")
        lt = self.level_times
        k = int(np.clip(np.searchsorted(lt, t) - 1, 0, lt.size - 2))
        w = (t - lt[k]) / (lt[k + 1] - lt[k])
        w = min(max(w, 0.0), 1.0)
        xs = self.xs
        row0 = np.interp(x, xs, self.values[k])
        row1 = np.interp(x, xs, self.values[k + 1])
        out = (1.0 - w) * row0 + w * row1
        return float(out) if out.ndim == 0 else out

    def to_csv(self, fh=None) -> str | None:
        """Write ``t,x,u`` rows, row-major by level, 17 significant digits."""
        buf = io.StringIO() if fh is None else fh
        buf.write("t,x,u\n")
        xs = self.xs
        for t, row in zip(self.level_times, self.values):
            ts = f"{t:.17g}"
            buf.write("".join(f"{ts},{x:.17g},{u:.17g}\n" for x, u in zip(xs, row)))
        return buf.getvalue() if fh is None else None


def solve(
    payoff: TerminalPayoff,
    band: VolatilityBand,
    grid: Grid1D,
    time_grid: TimeGrid,
    max_levels: int = 401,
    margin_sd: float = 4.0,
) -> SpaceTimeField:
    """March the G-heat equation from ``payoff`` up to ``time_grid.horizon``."""
    dx, dt = grid.dx, time_grid.dt
    limit = dx * dx / band.sigma_hi_sq
    if dt > limit * (1 + 1e-12):
        raise CFLError(f"dt={dt:.6g} exceeds the monotonicity limit dx^2/sigma_hi^2={limit:.6g}")
    span = payoff.feature_span()
    if span is not None:
        margin = domain_margin(band, time_grid.horizon, margin_sd)
        need_lo, need_hi = span[0] - margin, span[1] + margin
        if grid.x_min > need_lo or grid.x_max < need_hi:
            raise DomainError(
                f"domain [{grid.x_min:.6g}, {grid.x_max:.6g}] too narrow; need at "
                f"least [{need_lo:.6g}, {need_hi:.6g}] (width {need_hi - need_lo:.6g})"
            )
    u0 = np.ascontiguousarray(payoff(grid.nodes), dtype=float)
    nt = time_grid.nt
    m = min(nt + 1, max_levels)
    save = np.unique(np.round(np.linspace(0, nt, m)).astype(np.int64))
    out = np.empty((save.size, u0.size))
    scale = dt / (2.0 * dx * dx)
    _march(u0, band.sigma_lo_sq * scale, band.sigma_hi_sq * scale, nt, save, out)
    return SpaceTimeField(grid, time_grid, out, save * dt, payoff, band)


def solve_auto(
    payoff: TerminalPayoff,
    band: VolatilityBand,
    horizon: float,
    params: SolverParams = SolverParams(),
    query: Sequence[float] = (0.0,),
) -> SpaceTimeField:
    grid, tg = make_grids(payoff, band, horizon, params, query)
    return solve(payoff, band, grid, tg, params.max_levels, params.margin_sd)


def feynman_kac_value(
    payoff: TerminalPayoff,
    band: VolatilityBand,
    t: float,
    params: SolverParams = SolverParams(),
    x: float = 0.0,
) -> float:
    """Sublinear expectation of ``payoff(x + B_t)`` read off the solved field."""
    if not t > 0:
        return float(payoff(x))
    return solve_auto(payoff, band, t, params, query=(x,)).at(t, x)


def extract_feedback_policy(field: SpaceTimeField, band: VolatilityBand) -> ControlPolicy:
    """Bang-bang rule: ``sigma_hi_sq`` where the field is convex, else ``sigma_lo_sq``.

    Row ``j`` of the table belongs to forward time ``s = T - tau`` where ``tau``
    is the field's time-to-go; ties at a zero second difference pick
    ``sigma_hi_sq``.
    """
    d2 = _second_difference(field.values)
    table = np.where(d2 >= 0.0, band.sigma_hi_sq, band.sigma_lo_sq)[::-1]
    times = field.time_grid.horizon - field.level_times[::-1]
    times[0] = 0.0
    return ControlPolicy(
        "feedback_from_field", times=times, xs=field.xs, table=table, source=field
    )


@dataclass(frozen=True)
class RhoEstimate:
    """Estimate of the capacity of ``{B_t <= 0}`` from the regularized sequence."""

    value: float
    lower: float
    upper: float
    t: float
    n_list: tuple
    values: tuple
    regularization_gap: float
    discretization_gap: float

    @property
    def bracket(self) -> tuple[float, float]:
        return (self.lower, self.upper)


DEFAULT_RHO_N = (4, 16, 64, 256, 10**4, 10**6, 10**8, 10**12, 10**16, 10**20)


def rho_limit(
    band: VolatilityBand,
    t: float,
    n_list: Sequence[int] = DEFAULT_RHO_N,
    params: SolverParams = SolverParams(),
    refine: bool = True,
    slack: float = 1e-6,
) -> RhoEstimate:
    """Push the indicator regularizers through the solver and bracket the limit.

    The bracket ``[u_N - (N t)^-alpha, u_N]`` is certified by the decay of
    ``E[exp(-N B_t^2)]``; ``discretization_gap`` is the change under one grid
    refinement of the last solve.
    """
    n_list = tuple(n_list)
    if not n_list:
        raise ValueError("n_list must be nonempty")
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be strictly increasing")
    if not t > 0:
        raise ValueError("t must be positive")
    alpha = alpha_exponent(band)
    # one grid for the whole sequence, sized by the widest regularizer
    grid, tg = make_grids(TerminalPayoff.indicator_leq_reg(n_list[0]), band, t, params)
    vals = []
    for n in n_list:
        f = solve(TerminalPayoff.indicator_leq_reg(n), band, grid, tg,
                  2, params.margin_sd)
        vals.append(f.at(t, 0.0))
    for i, (a, b) in enumerate(zip(vals, vals[1:])):
        if b > a + slack:
            raise SolverInconsistency(
                f"regularized values increase between n={n_list[i]} and "
                f"n={n_list[i + 1]}: {a:.10g} -> {b:.10g}"
            )
    last = vals[-1]
    disc = 0.0
    if refine:
        fine = feynman_kac_value(
            TerminalPayoff.indicator_leq_reg(n_list[-1]), band, t, params.refined()
        )
        disc = abs(fine - last)
    gap = (n_list[-1] * t) ** (-alpha)
    return RhoEstimate(
        value=last, lower=last - gap, upper=last, t=t, n_list=n_list,
        values=tuple(vals), regularization_gap=gap, discretization_gap=disc,
    )
