"""Named numerical checks with pass/fail verdicts and signed margins.

Every margin is oriented so that ``margin >= 0`` means the check holds; the
tolerance a margin was computed with is recorded next to it.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from .band import TerminalPayoff, VolatilityBand, linear_gaussian_solution, supersolution_v
from .capacity import (
    capacity_monotone_event,
    capacity_product_check,
    capacity_running_max,
    capacity_terminal_ball,
    holder_chain_bound,
    holder_chain_log10,
    holder_exponent_count,
    holder_first_n_below,
    holder_threshold_margin,
)
from .policy import ControlPolicy
from .sampler import (
    StatSpec,
    mc_expectation,
    occupation_bound,
    path_statistics,
    sample_paths,
)
from .solver import (
    SolverError,
    SolverParams,
    extract_feedback_policy,
    make_grids,
    rho_limit,
    solve,
    solve_auto,
)


class CheckError(RuntimeError):
    """A solver failure inside a named check."""


@dataclass
class CheckReport:
    check_name: str
    inputs: dict
    observed: list = field(default_factory=list)
    bound_or_target: list = field(default_factory=list)
    margin: list = field(default_factory=list)
    tolerance: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    notes: str = ""
    runtime: float = 0.0

    def add(self, label: str, observed: float, target: float, margin: float, tol: float):
        self.labels.append(label)
        self.observed.append(float(observed))
        self.bound_or_target.append(float(target))
        self.margin.append(float(margin))
        self.tolerance.append(float(tol))

    @property
    def verdict(self) -> str:
        ok = bool(self.margin) and all(m >= 0 and math.isfinite(m) for m in self.margin)
        return "pass" if ok else "fail"

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def worst(self) -> str:
        if not self.margin:
            return "no margins recorded"
        i = int(np.argmin(self.margin))
        return f"{self.labels[i]}: observed={self.observed[i]:.6g} target={self.bound_or_target[i]:.6g} margin={self.margin[i]:.3g}"

    def to_dict(self, timings: bool = False) -> dict:
        d = {
            "check_name": self.check_name,
            "inputs": self.inputs,
            "labels": self.labels,
            "observed": self.observed,
            "bound_or_target": self.bound_or_target,
            "margin": self.margin,
            "tolerance": self.tolerance,
            "verdict": self.verdict,
            "worst": self.worst(),
        }
        if self.notes:
            d["notes"] = self.notes
        if timings:
            d["runtime"] = self.runtime
        return d


def _timed(name: str):
    def deco(fn):
        def wrapper(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                rep = fn(*args, **kwargs)
            except SolverError as exc:
                raise CheckError(f"{name}: {exc}") from exc
            rep.runtime = time.perf_counter() - t0
            return rep
        wrapper.__name__ = fn.__name__
        wrapper.__doc__ = fn.__doc__
        return wrapper
    return deco


def _band_dict(band: VolatilityBand) -> dict:
    return {"sigma_lo_sq": band.sigma_lo_sq, "sigma_hi_sq": band.sigma_hi_sq}


@_timed("linear_oracle")
def verify_linear_oracle(dx: float = 0.01, n: float = 4.0, t: float = 0.5) -> CheckReport:
    """Band (1,1) against the exact Gaussian convolution, at the largest stable step."""
    band = VolatilityBand(1.0, 1.0)
    params = SolverParams(dx=dx, cfl=1.0)
    rep = CheckReport("linear_oracle", {"dx": dx, "n": n, "t": t, "cfl": 1.0})
    errs = []
    for p in (params, params.refined()):
        f = solve_auto(TerminalPayoff.gaussian_bump(n), band, t, p)
        exact = linear_gaussian_solution(n, 0.0, 1.0, t, f.xs)
        errs.append(float(np.abs(f.final - exact)[1:-1].max()))
        if p is params:
            val = f.at(t, 0.0)
    target = linear_gaussian_solution(n, 0.0, 1.0, t, 0.0)
    rep.add("value_at_origin", val, target, 1e-3 - abs(val - target), 1e-3)
    rep.add("sup_error", errs[0], 5e-3, 5e-3 - errs[0], 5e-3)
    rep.add("sup_error_refined_halves", errs[1], errs[0] / 2, errs[0] / 2 - errs[1], 0.0)
    order = math.log(errs[0] / errs[1]) / math.log(4.0)
    rep.add("observed_order_in_dt", order, 1.0, order - 1.0, 0.0)
    return rep


@_timed("supersolution")
def verify_supersolution(
    n_list: Sequence[float] = (1, 10, 100),
    a: float = 0.0,
    band: VolatilityBand = VolatilityBand(0.5, 1.0),
    params: SolverParams = SolverParams(max_levels=2001),
    horizon: float = 1.0,
    probe: tuple | None = (10, 0.5),
) -> CheckReport:
    """Solved bump values stay under the closed-form envelope at every stored level.

    ``probe=(n, t)`` also requires slack of at least 1e-3 at ``(t, a)``; it is
    skipped for a degenerate band, where the envelope is exact.
    """
    band.require_normalized()
    rep = CheckReport("supersolution", {"n_list": list(n_list), "a": a, "horizon": horizon,
                                        "band": _band_dict(band), "dx": params.dx})
    for n in n_list:
        f = solve_auto(TerminalPayoff.gaussian_bump(n, a), band, horizon, params, query=(a,))
        tt, xx = np.meshgrid(f.level_times, f.xs, indexing="ij")
        m = (supersolution_v(n, a, band, tt, xx) - f.values)[:, 1:-1]
        k, i = np.unravel_index(int(np.argmin(m)), m.shape)
        lab = f"n={n:g} worst at t={f.level_times[k]:.6g} x={f.xs[i + 1]:.6g}"
        rep.add(lab, float(m.min()), 0.0, float(m.min()) + 1e-6, 1e-6)
    if probe is not None and not band.is_degenerate:
        n, t = probe
        f = solve_auto(TerminalPayoff.gaussian_bump(n, a), band, t, params, query=(a,))
        slack = supersolution_v(n, a, band, t, a) - f.at(t, a)
        rep.add(f"strict_slack n={n:g} t={t:g}", slack, 1e-3, slack - 1e-3, 1e-3)
    return rep


@_timed("strict_decrease")
def verify_strict_decrease(
    t: float = 1.0,
    band: VolatilityBand = VolatilityBand(0.25, 1.0),
    n_large: float = 1e16,
    params: SolverParams = SolverParams(),
    resolve: float = 1e-12,
) -> CheckReport:
    """The limit profile ``x -> c(B_t + x <= 0)`` is decreasing from 1 to 0.

    Strictness is tested where values are resolvable in double precision,
    i.e. inside ``(resolve, 1 - resolve)``; elsewhere nonincrease is required.
    """
    rep = CheckReport("strict_decrease", {"t": t, "band": _band_dict(band),
                                          "n_large": n_large, "dx": params.dx})
    payoff = TerminalPayoff.indicator_leq_reg(n_large)
    grid, tg = make_grids(payoff, band, t, params)
    u = solve(payoff, band, grid, tg, 2, params.margin_sd).final[1:-1]
    d = np.diff(u)
    inner = (u[:-1] < 1 - resolve) & (u[1:] > resolve)
    rep.add("max_increment", float(d.max()), 0.0, -float(d.max()), 0.0)
    strict = float(-d[inner].max()) if inner.any() else -1.0
    rep.add("strict_decrease_resolved", strict, 0.0, strict, 0.0)
    rep.add("resolved_nodes", float(inner.sum()), 10.0, float(inner.sum()) - 10.0, 0.0)
    rep.add("range_min", float(u.min()), 0.0, float(u.min()), 0.0)
    rep.add("range_max", float(u.max()), 1.0, 1.0 - float(u.max()), 0.0)
    rep.add("left_edge", float(u[0]), 1.0, 1e-3 - abs(1 - u[0]), 1e-3)
    rep.add("right_edge", float(u[-1]), 0.0, 1e-3 - abs(u[-1]), 1e-3)
    if band.is_degenerate:
        v0 = float(np.interp(0.0, grid.nodes[1:-1], u))
        rep.add("value_at_origin", v0, 0.5, 1e-2 - abs(v0 - 0.5), 1e-2)
    return rep


@_timed("ball_bound")
def verify_ball_bound(
    points: Sequence[tuple] = tuple((t, e) for t in (0.5, 1.0) for e in (0.05, 0.1, 0.2)),
    a: float = 0.0,
    band: VolatilityBand = VolatilityBand(0.5, 1.0),
    params: SolverParams = SolverParams(),
) -> CheckReport:
    band.require_normalized()
    rep = CheckReport("ball_bound", {"points": [list(p) for p in points], "a": a,
                                     "band": _band_dict(band), "dx": params.dx})
    for t, eps in points:
        est = capacity_terminal_ball(t, a, eps, band, params)
        rep.add(f"t={t:g} eps={eps:g}", est.value, est.certified_upper_bound,
                est.bound_margin(), est.gaps)
    return rep


@_timed("running_max")
def verify_running_max(
    t: float = 1.0,
    eps_list: Sequence[float] = (0.2, 0.1, 0.05),
    band: VolatilityBand = VolatilityBand(0.5, 1.0),
    params: SolverParams = SolverParams(),
) -> CheckReport:
    """Running-max capacities under the reflection bound and decreasing as eps shrinks."""
    rep = CheckReport("running_max", {"t": t, "eps_list": list(eps_list),
                                      "band": _band_dict(band), "dx": params.dx})
    ests = [capacity_running_max(t, e, band, params) for e in eps_list]
    for e, est in zip(eps_list, ests):
        rep.add(f"bound eps={e:g}", est.value, est.certified_upper_bound,
                est.bound_margin(), est.gaps)
    for (e0, a), (e1, b) in zip(zip(eps_list, ests), list(zip(eps_list, ests))[1:]):
        rep.add(f"decrease eps={e0:g}->{e1:g}", b.value, a.value, a.value - b.value - 1e-12, 0.0)
    return rep


@_timed("product_and_rho")
def verify_product_and_rho(
    band: VolatilityBand,
    params: SolverParams = SolverParams(),
    times: Sequence[float] = (0.25, 1.0, 4.0),
    n_max: int = 4,
) -> CheckReport:
    """Capacity factorization, the power law for monotone events, and the scale-free rho."""
    rep = CheckReport("product_and_rho", {"band": _band_dict(band), "times": list(times),
                                          "n_max": n_max, "dx": params.dx})
    for label, t, s, interval, closed in (
        ("open (0,inf) t=s=1", 1.0, 1.0, (0.0, math.inf), False),
        ("closed [0,inf) t=1 s=2", 1.0, 2.0, (0.0, math.inf), True),
    ):
        pc = capacity_product_check(t, s, interval, closed, band, params)
        rep.add(f"product {label}", pc.lhs, pc.rhs, 1e-2 - pc.difference, 1e-2)
        if band.is_degenerate and not closed:
            rep.add(f"product {label} classical", pc.lhs, 0.25, 1e-2 - abs(pc.lhs - 0.25), 1e-2)

    rhos = [rho_limit(band, t, params=params) for t in times]
    for r in rhos:
        gap = r.regularization_gap + r.discretization_gap
        rep.add(f"rho gaps t={r.t:g}", gap, 1e-2, 1e-2 - gap, 1e-2)
    for r0, r1 in combinations(rhos, 2):
        rep.add(f"rho t={r0.t:g} vs t={r1.t:g}", r1.value, r0.value,
                1e-2 - abs(r0.value - r1.value), 1e-2)
    lo = max(r.lower for r in rhos)
    hi = min(r.upper + r.discretization_gap for r in rhos)
    rep.add("rho brackets overlap", hi, lo, hi - lo, 0.0)
    rho = next((r for r in rhos if r.t == 1.0), rhos[0]).value
    rep.add("rho below one", rho, 1 - 1e-3, (1 - 1e-3) - rho, 1e-3)
    rep.add("rho at least one half", rho, 0.5 - 1e-3, rho - (0.5 - 1e-3), 1e-3)
    if band.is_degenerate:
        rep.add("rho classical", rho, 0.5, 1e-2 - abs(rho - 0.5), 1e-2)

    for n in range(1, n_max + 1):
        est = capacity_monotone_event(n, band, params)
        target = rho**n
        rel = abs(est.value - target) / target
        rep.add(f"monotone n={n} vs rho^n", est.value, target, 0.02 - rel, 0.02)
        if band.is_degenerate and n == 3:
            rep.add("monotone n=3 classical", est.value, 0.125,
                    1e-2 - abs(est.value - 0.125), 1e-2)
    return rep


def holder_n_list(upto_log10: int) -> list[int]:
    return [10**k for k in range(0, upto_log10 + 1)]


@_timed("holder_chain")
def verify_holder_chain(
    gamma_list: Sequence[float] = (0.6, 0.75),
    beta: float = 1.0,
    band: VolatilityBand = VolatilityBand(0.5, 1.0),
    threshold: float = 1e-6,
) -> CheckReport:
    rep = CheckReport("holder_chain", {"gamma_list": list(gamma_list), "beta": beta,
                                       "band": _band_dict(band), "threshold": threshold})
    firsts = {}
    for g in gamma_list:
        l = holder_exponent_count(g, band)
        n_star = holder_first_n_below(g, beta, band, threshold)
        digits = len(str(n_star))
        ns = holder_n_list(digits + 5)
        holder_chain_bound(g, beta, band, ns)  # raises unless eventually decreasing
        logs = holder_chain_log10(g, beta, band, ns)
        alpha = 0.5 * band.sigma_lo_sq
        log_c = 0.5 + 2 * alpha * math.log(2 * beta * l**g)
        start = next(i for i, n in enumerate(ns) if log_c - (2 * g - 1) * alpha * math.log(n) < 0)
        tail = logs[start:]
        dec = min(a - b for a, b in zip(tail, tail[1:]))
        rep.add(f"gamma={g:g} l={l} strictly decreasing", dec, 0.0, dec - 1e-12, 0.0)
        log_thr = math.log10(threshold)
        margin = holder_threshold_margin(g, beta, band, n_star, threshold)
        rep.add(f"gamma={g:g} l={l} below threshold at n~1e{digits - 1}", log_thr - margin,
                log_thr, margin, 0.0)
        prev = holder_threshold_margin(g, beta, band, n_star - 1, threshold)
        rep.add(f"gamma={g:g} first such n", -prev, 0.0, -prev, 0.0)
        firsts[f"{g:g}"] = str(n_star)
    rep.notes = "first n below threshold: " + json.dumps(firsts, sort_keys=True)
    return rep


@_timed("mc_pde_consistency")
def verify_mc_consistency(
    band: VolatilityBand = VolatilityBand(0.5, 1.0),
    seed: int = 42,
    count: int = 100_000,
    mc_dt: float = 1 / 400,
    params: SolverParams = SolverParams(),
    threads: int = 1,
    n: float = 4.0,
    horizon: float = 1.0,
) -> CheckReport:
    """Feedback-policy MC is near-optimal; no constant policy beats the PDE value."""
    rep = CheckReport("mc_pde_consistency", {"band": _band_dict(band), "seed": seed,
                                             "count": count, "mc_dt": mc_dt, "n": n,
                                             "horizon": horizon, "dx": params.dx})
    payoff = TerminalPayoff.gaussian_bump(n)
    field_ = solve_auto(payoff, band, horizon, params)
    pde = field_.at(horizon, 0.0)
    steps = round(horizon / mc_dt)
    policy = extract_feedback_policy(field_, band)
    ens = sample_paths(policy, band, mc_dt, horizon, count, seed, record_every=steps,
                       threads=threads)
    m, se = mc_expectation(ens, payoff)
    rep.add("feedback <= pde + 3se", m, pde, pde + 3 * se - m, 3 * se)
    rep.add("feedback >= pde - 3se - 2%", m, pde, m - (pde - 3 * se - 0.02), 3 * se + 0.02)
    mid = 0.5 * (band.sigma_lo_sq + band.sigma_hi_sq)
    for k, s in enumerate(sorted({band.sigma_lo_sq, mid, band.sigma_hi_sq})):
        ens = sample_paths(ControlPolicy.constant(s), band, mc_dt, horizon, count,
                           seed + 1 + k, record_every=steps, threads=threads)
        mc, sec = mc_expectation(ens, payoff)
        rep.add(f"constant {s:g} <= pde + 3se", mc, pde, pde + 3 * sec - mc, 3 * sec)
    return rep


@_timed("path_statistics")
def verify_path_statistics(
    seed: int = 42,
    count: int = 1000,
    steps: int = 10_000,
    threads: int = 1,
    delta: float = 0.2,
) -> CheckReport:
    """Grid statistics of the constant unit-volatility walk against exact values.

    The Holder dichotomy compares the ensemble on ``steps`` with one on
    ``steps / 4`` over the same horizon.
    """
    band = VolatilityBand(1.0, 1.0)
    rep = CheckReport("path_statistics", {"seed": seed, "count": count, "steps": steps,
                                          "delta": delta})
    pol = ControlPolicy.constant(1.0)
    spec = StatSpec()
    fine = path_statistics(sample_paths(pol, band, 1.0 / steps, 1.0, count, seed,
                                        threads=threads), spec)
    coarse = path_statistics(sample_paths(pol, band, 4.0 / steps, 1.0, count, seed + 1,
                                          threads=threads), spec)
    m, se = fine["local_max_fraction_mean"], fine["local_max_fraction_se"]
    rep.add("local max fraction", m, 0.25, 3 * se - abs(m - 0.25), 3 * se)
    for w in spec.monotone_windows:
        m, se = fine[f"monotone_window_{w}_mean"], fine[f"monotone_window_{w}_se"]
        exact = 2.0 ** (1 - w)
        rep.add(f"monotone window w={w}", m, exact, 3 * se - abs(m - exact), 3 * se)
    run = fine["longest_run_steps_max"]
    rep.add("longest monotone run", run, 40, 40 - run, 0.0)
    lo_f, lo_c = fine["holder_g0.4_k1_max"], coarse["holder_g0.4_k1_max"]
    rep.add("holder 0.4 bounded under refinement", lo_f / lo_c, 1 + delta,
            (1 + delta) - lo_f / lo_c, delta)
    hi_f, hi_c = fine["holder_g0.75_k1_min"], coarse["holder_g0.75_k1_min"]
    need = 4 ** 0.25 * (1 - delta)
    rep.add("holder 0.75 grows under refinement", hi_f / hi_c, need, hi_f / hi_c - need, delta)
    occ = [(e, fine[f"occupation_eps{e:g}_mean"], fine[f"occupation_eps{e:g}_se"])
           for e in spec.eps_list]
    for (e0, m0, _), (e1, m1, _) in zip(occ, occ[1:]):
        rep.add(f"occupation nonincreasing eps={e0:g}->{e1:g}", m1, m0, m0 - m1, 0.0)
    for e, m, se in occ:
        b = occupation_bound(e, 0.5)
        rep.add(f"occupation eps={e:g} under bound", m, b, b + 3 * se - m, 3 * se)
    return rep


# Suite in report order. Factories take (band, seed, threads).
SUITE: dict[str, Callable] = {
    "linear_oracle": lambda band, seed, threads: verify_linear_oracle(),
    "supersolution": lambda band, seed, threads: verify_supersolution(band=band),
    "rho_identities": lambda band, seed, threads: verify_product_and_rho(VolatilityBand(0.25, 1.0)),
    "product_and_rho": lambda band, seed, threads: verify_product_and_rho(band),
    "classical_band": lambda band, seed, threads: verify_product_and_rho(VolatilityBand(1.0, 1.0), n_max=3),
    "strict_decrease": lambda band, seed, threads: verify_strict_decrease(),
    "ball_bound": lambda band, seed, threads: verify_ball_bound(band=band),
    "running_max": lambda band, seed, threads: verify_running_max(band=band),
    "mc_pde_consistency": lambda band, seed, threads: verify_mc_consistency(band, seed, threads=threads),
    "holder_chain": lambda band, seed, threads: verify_holder_chain(band=band),
    "path_statistics": lambda band, seed, threads: verify_path_statistics(seed, threads=threads),
}


def run_suite(
    band: VolatilityBand = VolatilityBand(0.5, 1.0),
    seed: int = 42,
    threads: int = 1,
    checks: Sequence[str] | None = None,
) -> list[CheckReport]:
    names = list(SUITE) if not checks else list(checks)
    unknown = [c for c in names if c not in SUITE]
    if unknown:
        raise KeyError(f"unknown checks {unknown}; known: {list(SUITE)}")
    reports = []
    for name in names:
        rep = SUITE[name](band, seed, threads)
        rep.check_name = name
        reports.append(rep)
    return reports


def suite_json(reports: Sequence[CheckReport], extra: dict | None = None,
               timings: bool = False) -> str:
    doc = dict(extra or {})
    doc["checks"] = [r.to_dict(timings) for r in reports]
    doc["all_pass"] = all(r.passed for r in reports)
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
