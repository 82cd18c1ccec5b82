"""Volatility controls: constant, tabulated, or feedback read off a solved field."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .band import VolatilityBand


def _nearest(nodes: np.ndarray, q: np.ndarray) -> np.ndarray:
    if nodes.size == 1:
        return np.zeros(np.shape(q), dtype=np.intp)
    mids = 0.5 * (nodes[1:] + nodes[:-1])
    return np.searchsorted(mids, q)


@dataclass(frozen=True, eq=False)
class ControlPolicy:
    """A volatility control ``(t, x) -> sigma_sq``.

    ``kind`` is ``constant``, ``table`` or ``feedback_from_field``. Tables are
    indexed ``[time, x]`` with forward times and use nearest-node lookup;
    queries outside the lattice clamp to the edge nodes.
    """

    kind: str
    sigma_sq: float | None = None
    times: np.ndarray | None = None
    xs: np.ndarray | None = None
    table: np.ndarray | None = None
    source: Any = None

    def __post_init__(self):
        if self.kind == "constant":
            if self.sigma_sq is None or not self.sigma_sq > 0:
                raise ValueError("constant policy needs sigma_sq > 0")
            return
        if self.kind not in ("table", "feedback_from_field"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        times = np.asarray(self.times, dtype=float)
        xs = np.asarray(self.xs, dtype=float)
        table = np.asarray(self.table, dtype=float)
        if table.shape != (times.size, xs.size):
            raise ValueError(
                f"table shape {table.shape} does not match "
                f"({times.size}, {xs.size})"
            )
        if np.any(np.diff(times) <= 0) or np.any(np.diff(xs) <= 0):
            raise ValueError("policy lattice must be strictly increasing")
        if np.any(table <= 0):
            raise ValueError("policy table must be positive")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "table", table)

    @classmethod
    def constant(cls, sigma_sq: float) -> "ControlPolicy":
        return cls("constant", sigma_sq=float(sigma_sq))

    @classmethod
    def from_table(cls, times, xs, table) -> "ControlPolicy":
        return cls("table", times=times, xs=xs, table=table)

    def value_range(self) -> tuple[float, float]:
        if self.kind == "constant":
            return (self.sigma_sq, self.sigma_sq)
        return (float(self.table.min()), float(self.table.max()))

    def respects(self, band: VolatilityBand) -> bool:
        lo, hi = self.value_range()
        return band.sigma_lo_sq <= lo and hi <= band.sigma_hi_sq

    def __call__(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "constant":
            return np.full(x.shape, self.sigma_sq)
        row = self.table[_nearest(self.times, np.asarray(t, dtype=float))]
        return row[_nearest(self.xs, x)]
