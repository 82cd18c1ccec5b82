"""Choquet capacities of path events by regularized G-heat solves and lattice DP.

Capacities of non-smooth events come from monotone families of Lipschitz
payoffs pushed through the solver: dominating families converge from above,
inner (distance) families from below. ``regularization_gap`` is the spread of
the last two family members unless a certified rate is available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import mpmath
import numpy as np
from numba import njit
from scipy.special import erf

from .band import TerminalPayoff, VolatilityBand, alpha_exponent
from .solver import (
    SolverInconsistency,
    SolverParams,
    domain_margin,
    feynman_kac_value,
    make_grids,
    rho_limit,
    solve,
)

METHODS = ("pde_regularized", "dp_augmented", "product_formula")

BALL_LEVELS = (2, 8, 32)
OPEN_LEVELS = (10**8, 10**10, 10**12)
CLOSED_LEVELS = (10**4, 10**8, 10**12)
INDICATOR_LEVELS = (10**8, 10**12, 10**16)


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class CapacityEstimate:
    value: float
    method: str
    regularization_gap: float = 0.0
    discretization_gap_estimate: float = 0.0
    certified_upper_bound: float | None = None
    event: str = ""
    params: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not -1e-9 <= self.value <= 1 + 1e-9:
            raise CapacityError(f"capacity value {self.value} outside [0, 1]")

    @property
    def gaps(self) -> float:
        return self.regularization_gap + self.discretization_gap_estimate

    def bound_margin(self) -> float | None:
        """``bound + gaps - value``; nonnegative when the bound is respected."""
        if self.certified_upper_bound is None:
            return None
        return self.certified_upper_bound + self.gaps - self.value

    def csv_row(self) -> str:
        params = ";".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        ub = "" if self.certified_upper_bound is None else f"{self.certified_upper_bound:.17g}"
        return (
            f"{self.event},{params},{self.value:.17g},{ub},"
            f"{self.regularization_gap:.17g},{self.discretization_gap_estimate:.17g},"
            f"{self.method}"
        )


CSV_HEADER = "event,params,value,upper_bound,reg_gap,disc_gap,method"


def _sequence_values(payoffs, band, t, params, slack=1e-6, decreasing=True):
    # Shared grid sized by the first (widest) payoff.
    grid, tg = make_grids(payoffs[0], band, t, params)
    vals = []
    for p in payoffs:
        vals.append(solve(p, band, grid, tg, 2, params.margin_sd).at(t, 0.0))
    for a, b in zip(vals, vals[1:]):
        bad = b > a + slack if decreasing else b < a - slack
        if bad:
            raise SolverInconsistency(f"regularized values not monotone: {vals}")
    return vals


def _extrapolate(coarse: float, fine: float) -> tuple[float, float]:
    # First-order Richardson step; |fine - coarse| bounds the error of the
    # extrapolated value for any observed order >= 1.
    value = 2.0 * fine - coarse
    return min(max(value, 0.0), 1.0), abs(fine - coarse)


def _refined(payoff, band, t, params, coarse, refine):
    if not refine:
        return coarse, 0.0
    return _extrapolate(coarse, feynman_kac_value(payoff, band, t, params.refined()))


def ball_bound(t: float, eps: float, band: VolatilityBand) -> float:
    """``exp(1/2) eps^(2 alpha) / t^alpha`` for the capacity of ``|B_t - a| <= eps``."""
    alpha = alpha_exponent(band)
    return math.exp(0.5) * eps ** (2 * alpha) / t**alpha


def capacity_terminal_ball(
    t: float,
    a: float,
    eps: float,
    band: VolatilityBand,
    params: SolverParams = SolverParams(),
    levels: Sequence[float] = BALL_LEVELS,
    refine: bool = True,
) -> CapacityEstimate:
    if not t > 0 or eps < 0:
        raise CapacityError("need t > 0 and eps >= 0")
    bound = ball_bound(t, eps, band) if band.is_normalized else None
    info = dict(t=t, a=a, eps=eps)
    if eps == 0:
        # level sets are polar when sigma_lo_sq > 0
        return CapacityEstimate(0.0, "pde_regularized", certified_upper_bound=bound,
                                event="terminal_ball", params=info)
    payoffs = [TerminalPayoff.ball_bump(m, a, eps) for m in levels]
    vals = _sequence_values(payoffs, band, t, params)
    reg = vals[-2] - vals[-1] if len(vals) > 1 else 0.0
    value, disc = _refined(payoffs[-1], band, t, params, vals[-1], refine)
    return CapacityEstimate(
        min(value, 1.0), "pde_regularized", max(reg, 0.0), disc, bound,
        "terminal_ball", info, {"levels": list(levels), "values": vals},
    )


def capacity_terminal_halfline(
    t: float,
    a: float,
    band: VolatilityBand,
    params: SolverParams = SolverParams(),
    open: bool = False,
    levels: Sequence[float] | None = None,
    refine: bool = True,
) -> CapacityEstimate:
    """Capacity of ``{B_t <= a}`` (closed) or ``{B_t < a}`` (open).

    The closed event is approached from above by ``indicator_leq_reg``, the
    open one from below by distance regularizers, so for the same ``a`` the
    closed value is never below the open one.
    """
    if not t > 0:
        raise CapacityError("t must be positive")
    if open:
        levels = tuple(levels or OPEN_LEVELS)
        payoffs = [TerminalPayoff.distance_reg(n, [(-math.inf, a)]) for n in levels]
    else:
        levels = tuple(levels or INDICATOR_LEVELS)
        payoffs = [TerminalPayoff.indicator_leq_reg(n, a) for n in levels]
    vals = _sequence_values(payoffs, band, t, params, decreasing=not open)
    last = vals[-1]
    if open or not band.is_normalized:
        reg = abs(vals[-1] - vals[-2]) if len(vals) > 1 else 0.0
    else:
        reg = (levels[-1] * t) ** (-alpha_exponent(band))
    value, disc = _refined(payoffs[-1], band, t, params, last, refine)
    return CapacityEstimate(
        min(max(value, 0.0), 1.0), "pde_regularized", reg, disc, None,
        "terminal_halfline", dict(t=t, a=a, open=open),
        {"levels": list(levels), "values": vals},
    )


@njit(cache=True)
def _running_max_dp(w, i0, lo_half, hi_half, nsteps):
    # w[j, i]: value at x = x_i with running max m_j = x_{i0 + j}; only
    # i <= i0 + j is meaningful. Stepping right off the diagonal moves to the
    # next column's diagonal (the running max grows); past the last column
    # the value is zero.
    nm, nx = w.shape
    v = w.copy()
    dh = hi_half - lo_half
    for _ in range(nsteps):
        for j in range(nm):
            top = min(i0 + j, nx - 2)
            wj = w[j]
            vj = v[j]
            for i in range(1, top):
                d = (wj[i + 1] + wj[i - 1]) - 2.0 * wj[i]
                vj[i] = wj[i] + lo_half * d + dh * max(d, 0.0)
            i = top
            if i < i0 + j:
                right = w[j, i + 1]
            elif j + 1 < nm:
                right = w[j + 1, i + 1]
            else:
                right = 0.0
            d = (right + w[j, i - 1]) - 2.0 * w[j, i]
            if d > 0.0:
                v[j, i] = w[j, i] + hi_half * d
            else:
                v[j, i] = w[j, i] + lo_half * d
        w, v = v, w
    return w


def _running_max_value(t, eps, band, params, k):
    dx = params.dx
    support = eps * (1.0 + 1.0 / k)
    margin = domain_margin(band, t, params.margin_sd)
    i0 = math.ceil(margin / dx) + 1
    nm = math.ceil(support / dx + 1e-9) + 2
    nx = i0 + nm
    ms = np.arange(nm) * dx
    r = (ms - eps) / (eps / k)
    col = np.cos(0.5 * np.pi * np.clip(r, 0.0, 1.0)) ** 2
    w = np.ascontiguousarray(np.repeat(col[:, None], nx, axis=1))
    nt = max(1, math.ceil(t * band.sigma_hi_sq / (params.cfl * dx * dx) - 1e-9))
    dt = t / nt
    scale = dt / (2 * dx * dx)
    out = _running_max_dp(w, i0, band.sigma_lo_sq * scale, band.sigma_hi_sq * scale, nt)
    return float(out[0, i0])


# The (x, m) lattice costs O((eps / dx)^2) per step; wide events use a coarser dx.
MAX_M_LEVELS = 128


def running_max_bound(t: float, eps: float, band: VolatilityBand) -> float:
    """Reflection bound ``P(|N(0, sigma_lo_sq t)| <= eps)``."""
    return float(erf(eps / math.sqrt(2.0 * band.sigma_lo_sq * t)))


def capacity_running_max(
    t: float,
    eps: float,
    band: VolatilityBand,
    params: SolverParams = SolverParams(),
    levels: Sequence[float] = BALL_LEVELS,
    refine: bool = True,
) -> CapacityEstimate:
    """Capacity of ``{max_{s<=t} B_s <= eps}`` by DP on the (x, running max) lattice.

    When ``eps`` spans more than ``MAX_M_LEVELS`` nodes the step is widened to
    ``eps / MAX_M_LEVELS`` and recorded in ``params``.
    For ``eps == 0`` the value reported is the capacity at the smallest
    resolvable level ``3 dx``, an upper estimate; the same number is booked as
    regularization gap because the true value lies in ``[0, value]``.
    """
    if not t > 0 or eps < 0:
        raise CapacityError("need t > 0 and eps >= 0")
    info = dict(t=t, eps=eps)
    bound = running_max_bound(t, eps, band)
    if eps == 0:
        est = capacity_running_max(t, 3 * params.dx, band, params, levels, refine)
        return CapacityEstimate(
            est.value, "dp_augmented", est.value + est.regularization_gap,
            est.discretization_gap_estimate, bound, "running_max_leq", info,
            {"resolved_eps": 3 * params.dx},
        )
    if math.floor(eps / params.dx + 1e-9) + 1 < 4:
        raise CapacityError(
            f"lattice too coarse: dx={params.dx} leaves fewer than 4 nodes in [0, {eps}]"
        )
    if eps / params.dx > MAX_M_LEVELS:
        params = replace(params, dx=eps / MAX_M_LEVELS)
        info["dx"] = params.dx
    vals = [_running_max_value(t, eps, band, params, k) for k in levels]
    for a, b in zip(vals, vals[1:]):
        if b > a + 1e-6:
            raise SolverInconsistency(f"running-max values not monotone: {vals}")
    reg = vals[-2] - vals[-1] if len(vals) > 1 else 0.0
    value, disc = vals[-1], 0.0
    if refine:
        fine = _running_max_value(t, eps, band, params.refined(), levels[-1])
        value, disc = _extrapolate(vals[-1], fine)
    return CapacityEstimate(
        value, "dp_augmented", max(reg, 0.0), disc, bound,
        "running_max_leq", info, {"levels": list(levels), "values": vals},
    )


def _set_regularizer(n, interval, closed):
    if closed:
        return TerminalPayoff.closed_reg(n, [interval])
    return TerminalPayoff.distance_reg(n, [interval])


@dataclass(frozen=True)
class ProductCheck:
    """Two-stage capacity ``lhs`` against the product of single stages ``rhs``."""

    lhs: float
    rhs: float
    first: float
    second: float
    gap: float

    @property
    def difference(self) -> float:
        return abs(self.lhs - self.rhs)


def capacity_product_check(
    t: float,
    s: float,
    interval: tuple,
    closed: bool,
    band: VolatilityBand,
    params: SolverParams = SolverParams(),
    levels: Sequence[float] | None = None,
    refine: bool = True,
) -> ProductCheck:
    """Compare ``c(B_t in O, B_{t+s} - B_t in O)`` with ``c(B_t in O) c(B_s in O)``.

    The joint value is computed backward: the second increment is solved over
    ``s`` and its value at the origin multiplies the first-stage payoff, which
    is then solved over ``t``. Factoring the constant out is valid because the
    regularizers are nonnegative.
    """
    if not (t > 0 and s > 0):
        raise CapacityError("need t, s > 0")
    levels = tuple(levels or (CLOSED_LEVELS if closed else OPEN_LEVELS))
    n = levels[-1]
    reg = _set_regularizer(n, interval, closed)
    second = feynman_kac_value(reg, band, s, params)
    lhs = feynman_kac_value(reg.scaled(second), band, t, params)
    first = feynman_kac_value(reg, band, t, params)
    rhs = first * second
    gap = 0.0
    if refine:
        fine = params.refined()
        s2 = feynman_kac_value(reg, band, s, fine)
        f2 = feynman_kac_value(reg, band, t, fine)
        gap = abs(f2 * s2 - rhs)
        if len(levels) > 1:
            prev = _set_regularizer(levels[-2], interval, closed)
            gap += abs(
                feynman_kac_value(prev, band, t, params)
                * feynman_kac_value(prev, band, s, params) - rhs
            )
    return ProductCheck(lhs, rhs, first, second, gap)


def capacity_monotone_event(
    n: int,
    band: VolatilityBand,
    params: SolverParams = SolverParams(),
    m: float = INDICATOR_LEVELS[-1],
    horizon: float = 1.0,
    refine: bool = True,
) -> CapacityEstimate:
    """Capacity of ``n`` consecutive nonpositive increments on ``[0, horizon]``.

    Nested DP: stage ``i`` solves the regularized indicator of a nonpositive
    increment over ``horizon / n`` with the value of the later stages carried
    as a constant factor. ``details['rho_power']`` is ``rho ** n`` from
    :func:`rho_limit` for comparison.
    """
    if not 1 <= n <= 6:
        raise CapacityError("n must be in 1..6")
    h = horizon / n
    reg = TerminalPayoff.indicator_leq_reg(m)

    def nested(p):
        c = 1.0
        for _ in range(n):
            c = feynman_kac_value(reg.scaled(c), band, h, p)
        return c

    value, disc = nested(params), 0.0
    if refine:
        value, disc = _extrapolate(value, nested(params.refined()))
    if band.is_normalized:
        # each factor is within (m h)^-alpha of its limit and all factors are <= 1
        regap = n * (m * h) ** (-alpha_exponent(band))
        rho = rho_limit(band, horizon, params=params, refine=False).value
        details = {"rho": rho, "rho_power": rho**n}
    else:
        regap, details = 0.0, {}
    return CapacityEstimate(
        min(value, 1.0), "dp_augmented", regap, disc, None, "monotone_decreasing",
        dict(n=n, horizon=horizon), details,
    )


def capacity_increment_conjunction(
    times: Sequence[float],
    interval: tuple,
    closed: bool,
    band: VolatilityBand,
    params: SolverParams = SolverParams(),
    levels: Sequence[float] | None = None,
    refine: bool = True,
) -> CapacityEstimate:
    """Capacity that every increment ``B_(t_i) - B_(t_(i-1))`` (``t_0 = 0``) lies in the set.

    Nested stages as in :func:`capacity_product_check`: the last increment is
    solved first and its value is carried backward as a constant factor.
    """
    times = tuple(float(t) for t in times)
    if not times or times[0] <= 0 or any(b <= a for a, b in zip(times, times[1:])):
        raise CapacityError("times must be positive and strictly increasing")
    steps = [b - a for a, b in zip((0.0,) + times, times)]
    levels = tuple(levels or (CLOSED_LEVELS if closed else OPEN_LEVELS))

    def nested(p, n):
        reg = _set_regularizer(n, interval, closed)
        c = 1.0
        for h in reversed(steps):
            c = feynman_kac_value(reg.scaled(c), band, h, p)
        return c

    vals = [nested(params, n) for n in levels]
    reg = abs(vals[-2] - vals[-1]) if len(vals) > 1 else 0.0
    value, disc = vals[-1], 0.0
    if refine:
        value, disc = _extrapolate(vals[-1], nested(params.refined(), levels[-1]))
    info = dict(times=" ".join(f"{t:g}" for t in times),
                interval=f"[{interval[0]:g} {interval[1]:g}]", closed=closed)
    return CapacityEstimate(
        min(max(value, 0.0), 1.0), "dp_augmented", reg, disc, None,
        "increment_conjunction", info, {"levels": list(levels), "values": vals},
    )


EVENT_KINDS = ("terminal_ball", "terminal_halfline", "running_max_leq",
               "increment_conjunction", "monotone_decreasing")


@dataclass(frozen=True)
class EventDescriptor:
    """One member of the supported event families, with its parameters."""

    kind: str
    t: float = 1.0
    a: float = 0.0
    eps: float = 0.0
    open: bool = False
    times: tuple = ()
    interval: tuple = (0.0, math.inf)
    closed: bool = False
    n: int = 1

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise CapacityError(f"unknown event kind {self.kind!r}")
        if not self.t > 0:
            raise CapacityError("t must be positive")
        if self.eps < 0:
            raise CapacityError("eps must be nonnegative")
        if self.n < 1:
            raise CapacityError("n must be >= 1")
        if self.kind == "increment_conjunction":
            ts = tuple(self.times)
            if not ts or ts[0] <= 0 or any(b <= a for a, b in zip(ts, ts[1:])):
                raise CapacityError("times must be positive and strictly increasing")
            lo, hi = self.interval
            if not lo < hi:
                raise CapacityError("interval must have lo < hi")


def capacity(event: EventDescriptor, band: VolatilityBand,
             params: SolverParams = SolverParams(), refine: bool = True) -> CapacityEstimate:
    """Dispatch an :class:`EventDescriptor` to its estimator; ``t`` is the horizon for monotone events."""
    k = event.kind
    if k == "terminal_ball":
        return capacity_terminal_ball(event.t, event.a, event.eps, band, params, refine=refine)
    if k == "terminal_halfline":
        return capacity_terminal_halfline(event.t, event.a, band, params, open=event.open,
                                          refine=refine)
    if k == "running_max_leq":
        return capacity_running_max(event.t, event.eps, band, params, refine=refine)
    if k == "increment_conjunction":
        return capacity_increment_conjunction(event.times, event.interval, event.closed,
                                              band, params, refine=refine)
    return capacity_monotone_event(event.n, band, params, horizon=event.t, refine=refine)


def holder_exponent_count(gamma: float, band: VolatilityBand) -> int:
    """Number of increments ``l``: smallest integer above ``1/(alpha(2 gamma - 1))``, plus one."""
    if not gamma > 0.5:
        raise CapacityError("gamma must exceed 1/2")
    alpha = alpha_exponent(band)
    return math.ceil(1.0 / (alpha * (2 * gamma - 1)) - 1e-9) + 1


def _holder_log_terms(gamma, beta, band, n_list):
    alpha = alpha_exponent(band)
    l = holder_exponent_count(gamma, band)
    log_c = 0.5 + 2 * alpha * math.log(2 * beta * l**gamma)
    e = (2 * gamma - 1) * alpha
    log_u = [log_c - e * math.log(n) for n in n_list]
    log_terms = [math.log(n) + l * min(0.0, lu) for n, lu in zip(n_list, log_u)]
    return l, log_u, log_terms


def holder_chain_bound(
    gamma: float, beta: float, band: VolatilityBand, n_list: Sequence[int]
) -> np.ndarray:
    """Terms ``n * min(1, U(n))^l`` of the bound on the non-Holder event.

    ``U(n) = exp(1/2) (2 beta l^gamma)^(2 alpha) / n^((2 gamma - 1) alpha)``.
    ``n_list`` may hold arbitrarily large Python ints; terms are evaluated in
    log space and may underflow to 0.
    """
    if beta <= 0:
        raise CapacityError("beta must be positive")
    n_list = list(n_list)
    if any(n < 1 for n in n_list) or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise CapacityError("n_list must be increasing positive integers")
    l, log_u, log_terms = _holder_log_terms(gamma, beta, band, n_list)
    start = next((i for i, lu in enumerate(log_u) if lu < 0), None)
    if start is not None:
        tail = log_terms[start:]
        if any(b >= a for a, b in zip(tail, tail[1:])):
            raise SolverInconsistency("bound sequence not decreasing past U(n) < 1")
    return np.array([math.exp(min(lt, 700.0)) for lt in log_terms])


def holder_chain_log10(gamma, beta, band, n_list) -> list[float]:
    _, _, log_terms = _holder_log_terms(gamma, beta, band, list(n_list))
    return [lt / math.log(10) for lt in log_terms]


def holder_first_n_below(gamma: float, beta: float, band: VolatilityBand,
                         threshold: float = 1e-6) -> int:
    """Smallest ``n`` with ``n U(n)^l < threshold`` (exact, arbitrary precision)."""
    alpha = alpha_exponent(band)
    l = holder_exponent_count(gamma, band)
    e = (2 * gamma - 1) * alpha
    # n U^l = exp(l log_c) n^(1 - l e) once U < 1, and 1 - l e < 0
    approx = (math.log(threshold) - l * (0.5 + 2 * alpha * math.log(2 * beta * l**gamma))) / (1 - l * e)
    digits = int(max(approx, 0.0) / math.log(10)) + 30
    with mpmath.workdps(digits):
        log_c = mpmath.mpf(0.5) + 2 * alpha * mpmath.log(2 * beta * mpmath.mpf(l) ** gamma)
        log_thr = mpmath.log(threshold)
        e = (2 * mpmath.mpf(gamma) - 1) * mpmath.mpf(alpha)

        def log_term(n):
            ln = mpmath.log(n)
            return ln + l * min(mpmath.mpf(0), log_c - e * ln)

        n_u = int(mpmath.ceil(mpmath.exp(log_c / e)))
        guess = mpmath.exp((log_thr - l * log_c) / (1 - l * e))
        n = max(n_u, int(mpmath.floor(guess)) - 2, 1)
        while not log_term(n) < log_thr:
            n += 1
        while n > 1 and log_term(n - 1) < log_thr:
            n -= 1
    return n


def holder_threshold_margin(gamma: float, beta: float, band: VolatilityBand, n: int,
                            threshold: float = 1e-6) -> float:
    """``log10(threshold) - log10(n U(n)^l)`` evaluated in arbitrary precision."""
    alpha = alpha_exponent(band)
    l = holder_exponent_count(gamma, band)
    with mpmath.workdps(len(str(n)) + 30):
        log_c = mpmath.mpf(0.5) + 2 * alpha * mpmath.log(2 * beta * mpmath.mpf(l) ** gamma)
        e = (2 * mpmath.mpf(gamma) - 1) * mpmath.mpf(alpha)
        ln = mpmath.log(n)
        term = ln + l * min(mpmath.mpf(0), log_c - e * ln)
        return float((mpmath.log(threshold) - term) / mpmath.log(10))
