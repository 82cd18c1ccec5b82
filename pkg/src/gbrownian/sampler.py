"""Monte Carlo paths of ``X_t = int theta dW`` under volatility controls, plus path statistics.

Every path owns a Philox stream keyed by ``(seed, path index)``, so an
ensemble is bit-identical however the paths are split into blocks or threads.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .band import TerminalPayoff, VolatilityBand
from .policy import ControlPolicy

MAGIC = b"GBM1"
_HEADER = struct.Struct("<4sddQ")
BLOCK = 1024


def path_stream(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for path ``index`` under master ``seed``."""
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return np.random.Generator(np.random.Philox(key=(seed << 64) | index))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Sampled paths, one per row, recorded every ``dt`` on ``[0, horizon]``."""

    dt: float
    horizon: float
    count: int
    seed: int
    paths: np.ndarray

    def __post_init__(self):
        steps = self.paths.shape[1] - 1
        if self.paths.shape[0] != self.count:
            raise ValueError("row count does not match count")
        if steps < 1 or not math.isclose(steps * self.dt, self.horizon, rel_tol=1e-9):
            raise ValueError("dt * steps must equal horizon")

    @property
    def steps(self) -> int:
        return self.paths.shape[1] - 1

    @property
    def terminal(self) -> np.ndarray:
        return self.paths[:, -1]

    def to_csv(self) -> str:
        return "".join(",".join(f"{v:.17g}" for v in row) + "\n" for row in self.paths)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, self.dt, self.horizon, self.count)
        return head + np.ascontiguousarray(self.paths, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, seed: int = 0) -> "PathEnsemble":
        magic, dt, horizon, count = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ValueError("not a GBM1 ensemble file")
        body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
        steps = round(horizon / dt)
        if body.size != count * (steps + 1):
            raise ValueError("ensemble payload has the wrong length")
        return cls(dt, horizon, count, seed, body.reshape(count, steps + 1).astype(float))


def _simulate_block(policy, lo, hi, steps, dt, seed, record_every):
    nb = hi - lo
    z = np.empty((nb, steps))
    for r in range(nb):
        z[r] = path_stream(seed, lo + r).standard_normal(steps)
    ncols = steps // record_every + 1
    out = np.empty((nb, ncols))
    out[:, 0] = 0.0
    if policy.kind == "constant":
        inc = math.sqrt(policy.sigma_sq * dt) * z
        full = np.cumsum(inc, axis=1)
        out[:, 1:] = full[:, record_every - 1::record_every]
        return out
    x = np.zeros(nb)
    sqdt = math.sqrt(dt)
    for k in range(steps):
        theta = np.sqrt(policy(k * dt, x))
        x = x + theta * sqdt * z[:, k]
        if (k + 1) % record_every == 0:
            out[:, (k + 1) // record_every] = x
    return out


def sample_paths(
    policy: ControlPolicy,
    band: VolatilityBand,
    dt: float,
    horizon: float,
    count: int,
    seed: int,
    record_every: int = 1,
    threads: int = 1,
) -> PathEnsemble:
    """Euler paths ``X_{k+1} = X_k + sqrt(theta_k^2 dt) xi_k`` started at 0.

    ``theta_k^2`` is the policy's value at ``(t_k, X_k)``. Only every
    ``record_every``-th step is stored; the ensemble's ``dt`` is the recorded
    spacing.
    """
    if not dt > 0 or count < 1:
        raise ValueError("need dt > 0 and count >= 1")
    steps = round(horizon / dt)
    if steps < 1 or not math.isclose(steps * dt, horizon, rel_tol=1e-9):
        raise ValueError("horizon must be an integer multiple of dt")
    if record_every < 1 or steps % record_every:
        raise ValueError("record_every must divide the number of steps")
    if not policy.respects(band):
        lo, hi = policy.value_range()
        raise ValueError(
            f"policy emits sigma_sq in [{lo}, {hi}], outside the band "
            f"[{band.sigma_lo_sq}, {band.sigma_hi_sq}]"
        )
    blocks = [(b, min(b + BLOCK, count)) for b in range(0, count, BLOCK)]

    def run(bounds):
        return _simulate_block(policy, *bounds, steps, dt, seed, record_every)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    return PathEnsemble(dt * record_every, horizon, count, seed, np.vstack(parts))


def mc_expectation(ensemble: PathEnsemble, payoff: TerminalPayoff) -> tuple[float, float]:
    """Sample mean and standard error of ``payoff(X_horizon)``."""
    y = np.asarray(payoff(ensemble.terminal), dtype=float)
    return _mean_se(y)


def mc_event(indicator: np.ndarray) -> tuple[float, float]:
    return _mean_se(np.asarray(indicator, dtype=float))


def _mean_se(y: np.ndarray) -> tuple[float, float]:
    mean = float(y.mean())
    if y.size < 2:
        return mean, 0.0
    return mean, float(y.std(ddof=1) / math.sqrt(y.size))


@dataclass(frozen=True)
class StatSpec:
    gammas: tuple = (0.4, 0.75)
    holder_lags: tuple = (1,)
    monotone_windows: tuple = (5, 10)
    level: float = 0.0
    eps_list: tuple = (0.2, 0.1, 0.05)


@dataclass
class StatReport:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, indent=2)


def _run_lengths(signs: np.ndarray) -> np.ndarray:
    cuts = np.flatnonzero(signs[1:] != signs[:-1]) + 1
    edges = np.concatenate(([0], cuts, [signs.size]))
    return np.diff(edges)


def path_statistics(ensemble: PathEnsemble, spec: StatSpec = StatSpec()) -> StatReport:
    """Monotone runs, grid-local maxima, Holder ratios and occupation times.

    Keys are flat strings; ``*_mean`` / ``*_se`` pairs are across paths.
    """
    x = ensemble.paths
    if ensemble.steps < 2:
        raise ValueError("need at least 2 steps")
    dt, steps = ensemble.dt, ensemble.steps
    inc = np.diff(x, axis=1)
    sign = np.sign(inc)
    rep: dict = {"count": ensemble.count, "steps": steps, "dt": dt,
                 "horizon": ensemble.horizon}

    runs = [_run_lengths(s) for s in sign]
    longest = np.array([r.max() for r in runs])
    rep["longest_run_steps_max"] = int(longest.max())
    rep["longest_run_steps_mean"] = float(longest.mean())
    rep["longest_run_time_max"] = float(longest.max() * dt)
    for w in spec.monotone_windows:
        n_windows = steps - w + 1
        frac = np.array([np.maximum(r - w + 1, 0).sum() / n_windows for r in runs])
        m, se = _mean_se(frac)
        rep[f"monotone_window_{w}_mean"] = m
        rep[f"monotone_window_{w}_se"] = se
        rep[f"monotone_window_{w}_exact_symmetric"] = 2.0 ** (1 - w)

    mid = x[:, 1:-1]
    is_max = (mid > x[:, :-2]) & (mid > x[:, 2:])
    counts = is_max.sum(axis=1)
    m, se = _mean_se(counts / (steps - 1))
    rep["local_max_fraction_mean"] = m
    rep["local_max_fraction_se"] = se
    rep["local_max_per_unit_time_mean"] = float(counts.mean() / ensemble.horizon)

    for k in spec.holder_lags:
        dx = np.abs(x[:, k:] - x[:, :-k]).max(axis=1)
        for g in spec.gammas:
            r = dx / (k * dt) ** g
            key = f"holder_g{g:g}_k{k}"
            rep[f"{key}_max"] = float(r.max())
            rep[f"{key}_min"] = float(r.min())
            rep[f"{key}_mean"] = float(r.mean())

    dev = np.abs(x[:, :-1] - spec.level)
    for eps in spec.eps_list:
        occ = (dev <= eps).sum(axis=1) * dt
        m, se = _mean_se(occ)
        rep[f"occupation_eps{eps:g}_mean"] = m
        rep[f"occupation_eps{eps:g}_se"] = se
    return StatReport(rep)


def occupation_bound(eps: float, alpha: float) -> float:
    """``exp(1/2) eps^(2 alpha) / (1 - alpha)``: integral over ``[0, 1]`` of the ball bound."""
    return math.exp(0.5) * eps ** (2 * alpha) / (1 - alpha)
