"""Volatility band, the generator G, initial-data families and closed forms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Below this a tail value counts as numerically constant for domain sizing.
_FLAT_TOL = 1e-8


class BandError(ValueError):
    """Raised when a volatility band violates an operation's precondition."""


@dataclass(frozen=True)
class VolatilityBand:
    """Variance interval ``[sigma_lo_sq, sigma_hi_sq]`` of the volatility control."""

    sigma_lo_sq: float
    sigma_hi_sq: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma_lo_sq) and math.isfinite(self.sigma_hi_sq)):
            raise BandError("band endpoints must be finite")
        if not 0.0 < self.sigma_lo_sq <= self.sigma_hi_sq:
            raise BandError(
                f"need 0 < sigma_lo_sq <= sigma_hi_sq, got "
                f"({self.sigma_lo_sq}, {self.sigma_hi_sq})"
            )

    @property
    def is_normalized(self) -> bool:
        return self.sigma_hi_sq == 1.0

    @property
    def is_degenerate(self) -> bool:
        return self.sigma_lo_sq == self.sigma_hi_sq

    def require_normalized(self) -> None:
        if not self.is_normalized:
            raise BandError(
                f"operation requires sigma_hi_sq == 1, got {self.sigma_hi_sq}"
            )

    def contains(self, sigma_sq) -> bool:
        s = np.asarray(sigma_sq, dtype=float)
        return bool(np.all((s >= self.sigma_lo_sq) & (s <= self.sigma_hi_sq)))


def g_value(a, band: VolatilityBand):
    """G(a) = (sigma_hi^2 a^+ - sigma_lo^2 a^-) / 2. Works elementwise on arrays."""
    a = np.asarray(a, dtype=float)
    out = 0.5 * np.where(a > 0.0, band.sigma_hi_sq * a, band.sigma_lo_sq * a)
    return float(out) if out.ndim == 0 else out


def alpha_exponent(band: VolatilityBand) -> float:
    """Decay exponent ``sigma_lo_sq / 2`` of the Gaussian-bump envelope."""
    band.require_normalized()
    return 0.5 * band.sigma_lo_sq


def supersolution_v(n, a, band: VolatilityBand, t, x):
    """Closed-form envelope ``(nt+1)^-alpha * exp(-n(x-a)^2 / (2(nt+1)))``.

    Dominates the G-heat solution started from ``exp(-n(x-a)^2/2)`` when the
    band is normalized. Broadcasts over array ``t`` and ``x``.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    alpha = alpha_exponent(band)
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    s = n * t + 1.0
    out = s ** (-alpha) * np.exp(-n * (x - a) ** 2 / (2.0 * s))
    return float(out) if out.ndim == 0 else out


def linear_gaussian_solution(n, a, sigma_sq, t, x):
    """Exact solution of ``u_t = sigma_sq/2 u_xx`` from ``exp(-n(x-a)^2/2)``."""
    if n < 0 or sigma_sq <= 0:
        raise ValueError("need n >= 0 and sigma_sq > 0")
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    s = n * sigma_sq * t + 1.0
    out = s ** -0.5 * np.exp(-n * (x - a) ** 2 / (2.0 * s))
    return float(out) if out.ndim == 0 else out


Interval = tuple  # (lo, hi), either end may be +-inf

_KINDS = (
    "gaussian_bump",
    "indicator_leq_reg",
    "distance_reg",
    "closed_reg",
    "ball_bump",
    "constant",
)


def _normalize_set(intervals) -> tuple:
    out = []
    for lo, hi in intervals:
        lo, hi = float(lo), float(hi)
        if not lo < hi:
            raise ValueError(f"empty interval ({lo}, {hi})")
        out.append((lo, hi))
    out.sort()
    for (_, h0), (l1, _) in zip(out, out[1:]):
        if l1 <= h0:
            raise ValueError("intervals must be disjoint and separated")
    return tuple(out)


def _dist_to_complement(x: np.ndarray, intervals) -> np.ndarray:
    # Distance from x to R minus (union of open intervals); zero outside the set.
    d = np.zeros_like(x)
    for lo, hi in intervals:
        d = np.maximum(d, np.minimum(x - lo, hi - x))
    return np.maximum(d, 0.0)


def _dist_to_set(x: np.ndarray, intervals) -> np.ndarray:
    d = np.full_like(x, np.inf)
    for lo, hi in intervals:
        d = np.minimum(d, np.maximum(np.maximum(lo - x, x - hi), 0.0))
    return d


def _taper(r: np.ndarray) -> np.ndarray:
    # C^1 step: 1 for r <= 0, 0 for r >= 1, cosine-squared in between.
    r = np.clip(r, 0.0, 1.0)
    return np.cos(0.5 * np.pi * r) ** 2


@dataclass(frozen=True)
class TerminalPayoff:
    """Closed family of bounded continuous initial data.

    Build instances with the classmethods; ``payoff(x)`` evaluates on arrays.
    ``scale`` multiplies the whole function and is used when a stage of a
    nested computation carries a constant factor forward.
    """

    kind: str
    n: float = 0.0
    a: float = 0.0
    eps: float = 0.0
    c: float = 0.0
    intervals: tuple = field(default_factory=tuple)
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown payoff kind {self.kind!r}")
        if self.kind != "constant" and self.n < 0:
            raise ValueError("regularization index must be nonnegative")
        if self.kind in ("indicator_leq_reg", "distance_reg", "closed_reg") and self.n < 1:
            raise ValueError(f"{self.kind} needs n >= 1")
        if self.kind == "ball_bump" and (self.eps <= 0 or self.n <= 0):
            raise ValueError("ball_bump needs eps > 0 and n > 0")
        if self.scale < 0:
            raise ValueError("scale must be nonnegative")
        if self.kind in ("distance_reg", "closed_reg"):
            if not self.intervals:
                raise ValueError(f"{self.kind} needs at least one interval")
            object.__setattr__(self, "intervals", _normalize_set(self.intervals))

    # constructors
    @classmethod
    def gaussian_bump(cls, n: float, a: float = 0.0) -> "TerminalPayoff":
        return cls("gaussian_bump", n=float(n), a=float(a))

    @classmethod
    def indicator_leq_reg(cls, n: float, a: float = 0.0) -> "TerminalPayoff":
        return cls("indicator_leq_reg", n=float(n), a=float(a))

    @classmethod
    def distance_reg(cls, n: float, intervals: Sequence[Interval]) -> "TerminalPayoff":
        return cls("distance_reg", n=float(n), intervals=_normalize_set(intervals))

    @classmethod
    def closed_reg(cls, n: float, intervals: Sequence[Interval]) -> "TerminalPayoff":
        return cls("closed_reg", n=float(n), intervals=_normalize_set(intervals))

    @classmethod
    def ball_bump(cls, n: float, a: float, eps: float) -> "TerminalPayoff":
        return cls("ball_bump", n=float(n), a=float(a), eps=float(eps))

    @classmethod
    def constant(cls, c: float) -> "TerminalPayoff":
        return cls("constant", c=float(c))

    def scaled(self, factor: float) -> "TerminalPayoff":
        return TerminalPayoff(
            self.kind, self.n, self.a, self.eps, self.c, self.intervals,
            self.scale * float(factor),
        )

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        k = self.kind
        if k == "gaussian_bump":
            y = np.exp(-self.n * (x - self.a) ** 2 / 2.0)
        elif k == "indicator_leq_reg":
            d = np.maximum(x - self.a, 0.0)
            y = np.where(x <= self.a, 1.0, np.exp(-self.n * d * d))
        elif k == "distance_reg":
            d = self.n * _dist_to_complement(x, self.intervals)
            y = d / (1.0 + d)
        elif k == "closed_reg":
            d = _dist_to_set(x, self.intervals)
            y = np.exp(-self.n * d * d)
        elif k == "ball_bump":
            r = (np.abs(x - self.a) - self.eps) / (self.eps / self.n)
            y = _taper(r)
        else:
            y = np.full_like(x, self.c)
        y = self.scale * y
        return float(y) if y.ndim == 0 else y

    def feature_span(self, tol: float = _FLAT_TOL) -> tuple[float, float] | None:
        """Interval outside of which the payoff is flat to within ``tol``.

        ``None`` means the payoff is constant everywhere.
        """
        k = self.kind
        if k == "constant" or (k == "gaussian_bump" and self.n == 0):
            return None
        if k == "gaussian_bump":
            r = math.sqrt(2.0 * -math.log(tol) / self.n)
            return (self.a - r, self.a + r)
        if k == "indicator_leq_reg":
            return (self.a, self.a + math.sqrt(-math.log(tol) / self.n))
        if k == "ball_bump":
            r = self.eps * (1.0 + 1.0 / self.n)
            return (self.a - r, self.a + r)
        los = [lo for lo, _ in self.intervals]
        his = [hi for _, hi in self.intervals]
        finite = [v for v in los + his if math.isfinite(v)]
        if k == "distance_reg":
            # 1 - n d / (1 + n d) < tol once d > 1 / (n tol)
            pad = 1.0 / (self.n * tol)
        else:
            pad = math.sqrt(-math.log(tol) / self.n)
        return (min(finite) - pad, max(finite) + pad)

    def jump_points(self) -> tuple[float, ...]:
        """Points where the payoff is steep enough to want a staggered grid."""
        if self.kind == "indicator_leq_reg":
            return (self.a,)
        if self.kind in ("distance_reg", "closed_reg"):
            return tuple(v for iv in self.intervals for v in iv if math.isfinite(v))
        return ()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "n": self.n, "a": self.a, "eps": self.eps,
            "c": self.c, "intervals": [list(iv) for iv in self.intervals],
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TerminalPayoff":
        d = dict(d)
        d["intervals"] = tuple(tuple(map(float, iv)) for iv in d.get("intervals", ()))
        return cls(**d)
