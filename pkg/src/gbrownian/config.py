"""Experiment configuration: flat ``key.path: value`` YAML with typed defaults.

Every key has a default, so an empty file is a valid configuration. Values
are checked against the default's type; errors name the file line (or the
``--set`` override) that introduced the bad value.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import yaml

from .band import BandError, TerminalPayoff, VolatilityBand
from .capacity import EVENT_KINDS, CapacityError, EventDescriptor
from .policy import ControlPolicy
from .sampler import StatSpec
from .solver import SolverParams

INF = math.inf

DEFAULTS: dict = {
    "seed": 42,
    "threads": 1,
    "out": "out",
    "band.sigma_lo_sq": 0.5,
    "band.sigma_hi_sq": 1.0,
    "solver.dx": 0.01,
    "solver.cfl": 0.5,
    "solver.margin_sd": 4.0,
    "solver.max_levels": 401,
    "payoff.kind": "gaussian_bump",
    "payoff.n": 4.0,
    "payoff.a": 0.0,
    "payoff.eps": 0.0,
    "payoff.c": 1.0,
    "payoff.intervals": [],
    "solve.horizon": 1.0,
    "capacity.event": "terminal_ball",
    "capacity.t": 1.0,
    "capacity.s": 1.0,
    "capacity.a": 0.0,
    "capacity.eps": 0.1,
    "capacity.open": False,
    "capacity.times": [1.0, 2.0],
    "capacity.interval": [0.0, INF],
    "capacity.closed": False,
    "capacity.n": 3,
    "capacity.refine": True,
    "sample.policy": "feedback",
    "sample.sigma_sq": 1.0,
    "sample.dt": 0.0025,
    "sample.horizon": 1.0,
    "sample.count": 10000,
    "sample.record_every": 1,
    "sample.format": "bin",
    "stats.gammas": [0.4, 0.75],
    "stats.holder_lags": [1],
    "stats.monotone_windows": [5, 10],
    "stats.level": 0.0,
    "stats.eps_list": [0.2, 0.1, 0.05],
    "verify.checks": [],
    "verify.timings": False,
    "holder.gammas": [0.6, 0.75],
    "holder.beta": 1.0,
    "holder.threshold": 1e-6,
    "holder.max_log10": 0,
}

# Keys that cannot change any numeric artifact; left out of the config hash.
RUNTIME_KEYS = ("threads", "out")

CHOICES = {
    "payoff.kind": ("gaussian_bump", "indicator_leq_reg", "distance_reg", "closed_reg",
                    "ball_bump", "constant"),
    "capacity.event": EVENT_KINDS + ("product",),
    "sample.policy": ("feedback", "constant"),
    "sample.format": ("bin", "csv"),
}


class ConfigError(ValueError):
    pass


def _coerce_float(v):
    # PyYAML reads exponent literals without a dot (1e-6) as strings.
    if isinstance(v, bool):
        raise TypeError("expected a number, got a boolean")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        return float(v)
    raise TypeError(f"expected a number, got {type(v).__name__}")


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError("expected true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError("expected an integer")
        return value
    if isinstance(default, float):
        return _coerce_float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise TypeError("expected a string")
        if key in CHOICES and value not in CHOICES[key]:
            raise ValueError(f"expected one of {list(CHOICES[key])}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise TypeError("expected a list")
        if key == "payoff.intervals":
            out = []
            for iv in value:
                if not (isinstance(iv, list) and len(iv) == 2):
                    raise TypeError("expected a list of [lo, hi] pairs")
                out.append([_coerce_float(iv[0]), _coerce_float(iv[1])])
            return out
        if key == "verify.checks":
            if not all(isinstance(x, str) for x in value):
                raise TypeError("expected a list of check names")
            return list(value)
        if key in ("stats.holder_lags", "stats.monotone_windows"):
            if not all(isinstance(x, int) and not isinstance(x, bool) for x in value):
                raise TypeError("expected a list of integers")
            return list(value)
        return [_coerce_float(x) for x in value]
    raise AssertionError(key)


@dataclass
class ExperimentConfig:
    """Resolved configuration plus where each non-default value came from."""

    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    sources: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def where(self, key: str) -> str:
        return self.sources.get(key, "default")

    def set(self, key: str, value, source: str) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        try:
            self.values[key] = _coerce(key, value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: {key}: {exc}") from None
        self.sources[key] = source

    def fail(self, keys, msg: str):
        keys = [keys] if isinstance(keys, str) else list(keys)
        where = ", ".join(f"{k} ({self.where(k)})" for k in keys)
        raise ConfigError(f"{where}: {msg}")

    # serialization
    def dumps(self, runtime: bool = True) -> str:
        lines = []
        for key in DEFAULTS:
            if not runtime and key in RUNTIME_KEYS:
                continue
            text = yaml.safe_dump({key: self.values[key]}, default_flow_style=True,
                                  width=math.inf, sort_keys=False)
            lines.append(text.strip()[1:-1].strip())
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.dumps(runtime=False).encode()).hexdigest()

    # typed views
    def band(self) -> VolatilityBand:
        try:
            return VolatilityBand(self["band.sigma_lo_sq"], self["band.sigma_hi_sq"])
        except BandError as exc:
            self.fail(["band.sigma_lo_sq", "band.sigma_hi_sq"], str(exc))

    def solver_params(self) -> SolverParams:
        try:
            return SolverParams(dx=self["solver.dx"], cfl=self["solver.cfl"],
                                margin_sd=self["solver.margin_sd"],
                                max_levels=self["solver.max_levels"])
        except ValueError as exc:
            self.fail(["solver.dx", "solver.cfl", "solver.max_levels"], str(exc))

    def payoff(self) -> TerminalPayoff:
        keys = [k for k in DEFAULTS if k.startswith("payoff.")]
        try:
            return TerminalPayoff(
                self["payoff.kind"], n=self["payoff.n"], a=self["payoff.a"],
                eps=self["payoff.eps"], c=self["payoff.c"],
                intervals=tuple(tuple(iv) for iv in self["payoff.intervals"]),
            )
        except ValueError as exc:
            self.fail(keys, str(exc))

    def event(self) -> EventDescriptor:
        keys = [k for k in DEFAULTS if k.startswith("capacity.")]
        try:
            return EventDescriptor(
                self["capacity.event"], t=self["capacity.t"], a=self["capacity.a"],
                eps=self["capacity.eps"], open=self["capacity.open"],
                times=tuple(self["capacity.times"]),
                interval=tuple(self["capacity.interval"]),
                closed=self["capacity.closed"], n=self["capacity.n"],
            )
        except CapacityError as exc:
            self.fail(keys, str(exc))

    def stat_spec(self) -> StatSpec:
        return StatSpec(
            gammas=tuple(self["stats.gammas"]), holder_lags=tuple(self["stats.holder_lags"]),
            monotone_windows=tuple(self["stats.monotone_windows"]),
            level=self["stats.level"], eps_list=tuple(self["stats.eps_list"]),
        )

    def constant_policy(self) -> ControlPolicy:
        return ControlPolicy.constant(self["sample.sigma_sq"])

    def validate(self) -> None:
        band = self.band()
        if not self["solver.dx"] > 0:
            self.fail("solver.dx", "must be positive")
        if not 0 < self["solver.cfl"] <= 1:
            self.fail("solver.cfl", "must lie in (0, 1]; larger steps break monotonicity")
        if self["solver.max_levels"] < 2:
            self.fail("solver.max_levels", "must be >= 2")
        self.solver_params()
        self.payoff()
        if self["threads"] < 1:
            self.fail("threads", "must be >= 1")
        if not 0 <= self["seed"] < 2**64:
            self.fail("seed", "must be an unsigned 64-bit integer")
        for key in ("solve.horizon", "sample.horizon", "sample.dt", "capacity.t", "capacity.s"):
            if not self[key] > 0:
                self.fail(key, "must be positive")
        if self["sample.policy"] == "constant" and not band.contains(self["sample.sigma_sq"]):
            self.fail(["sample.sigma_sq", "band.sigma_lo_sq", "band.sigma_hi_sq"],
                      "constant policy lies outside the volatility band")
        if self["sample.count"] < 1 or self["sample.record_every"] < 1:
            self.fail(["sample.count", "sample.record_every"], "must be >= 1")
        lo, hi = self["capacity.interval"] if len(self["capacity.interval"]) == 2 else (1, 0)
        if not lo < hi:
            self.fail("capacity.interval", "expected [lo, hi] with lo < hi")
        ts = self["capacity.times"]
        if not ts or ts[0] <= 0 or any(b <= a for a, b in zip(ts, ts[1:])):
            self.fail("capacity.times", "must be positive and strictly increasing")
        if self["capacity.eps"] < 0:
            self.fail("capacity.eps", "must be nonnegative")
        if self["capacity.event"] != "product":
            self.event()
        for g in self["holder.gammas"]:
            if not 0.5 < g < 1:
                self.fail("holder.gammas", "each gamma must lie in (1/2, 1)")


def _parse_mapping(text: str, name: str) -> list[tuple[str, object, int]]:
    try:
        loader = yaml.SafeLoader(text)
        try:
            node = loader.get_single_node()
            if node is None:
                return []
            if not isinstance(node, yaml.MappingNode):
                raise ConfigError(f"{name}:{node.start_mark.line + 1}: expected flat key: value lines")
            out = []
            for knode, vnode in node.value:
                line = knode.start_mark.line + 1
                if not isinstance(knode, yaml.ScalarNode):
                    raise ConfigError(f"{name}:{line}: keys must be plain dotted paths")
                if isinstance(vnode, yaml.MappingNode):
                    raise ConfigError(f"{name}:{line}: nested mappings are not allowed; "
                                      f"write {knode.value}.child: value")
                out.append((knode.value, loader.construct_object(vnode, deep=True), line))
            return out
        finally:
            loader.dispose()
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{name}{line}: {problem}") from None


def parse_config(text: str, name: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    seen: dict = {}
    for key, value, line in _parse_mapping(text, name):
        if key in seen:
            raise ConfigError(f"{name}:{line}: duplicate key {key!r} (first on line {seen[key]})")
        seen[key] = line
        cfg.set(key, value, f"{name}:{line}")
    return cfg


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, path)


def apply_override(cfg: ExperimentConfig, assignment: str) -> None:
    """Apply ``key=value``; the value is read as a YAML scalar or flow list."""
    source = f"--set {assignment}"
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ConfigError(f"{source}: expected key=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg.set(key.strip(), value, source)
