"""Command-line front end.

    gbrownian {solve,capacity,sample,verify,holder} [--config PATH] [--seed U64]
              [--threads N] [--out DIR] [--check NAME ...] [--set KEY=VALUE ...]
              [--print-config] [--timings]

Artifacts are built in memory and only written once the whole run has
succeeded; each run also writes ``<subcommand>.manifest.json`` with the config
hash and sha256 of every artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile

from . import __version__
from .capacity import (
    CSV_HEADER,
    CapacityError,
    CapacityEstimate,
    capacity,
    capacity_product_check,
    holder_chain_log10,
    holder_exponent_count,
    holder_first_n_below,
)
from .config import ConfigError, ExperimentConfig, apply_override, load_config
from .sampler import mc_expectation, path_statistics, sample_paths
from .solver import SolverError, extract_feedback_policy, solve_auto
from .verify import SUITE, CheckError, run_suite, suite_json

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

SUBCOMMANDS = ("solve", "capacity", "sample", "verify", "holder")


def _json(doc: dict) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode()


# subcommands: each returns ({filename: bytes}, ok)

def run_solve(cfg: ExperimentConfig):
    field = solve_auto(cfg.payoff(), cfg.band(), cfg["solve.horizon"], cfg.solver_params())
    return {"field.csv": field.to_csv().encode()}, True


def _capacity_rows(cfg: ExperimentConfig) -> list[CapacityEstimate]:
    band, params = cfg.band(), cfg.solver_params()
    refine = cfg["capacity.refine"]
    if cfg["capacity.event"] != "product":
        return [capacity(cfg.event(), band, params, refine=refine)]
    t = cfg["capacity.t"]
    s, closed = cfg["capacity.s"], cfg["capacity.closed"]
    interval = tuple(cfg["capacity.interval"])
    pc = capacity_product_check(t, s, interval, closed, band, params, refine=refine)
    info = dict(t=t, s=s, interval=f"[{interval[0]:g} {interval[1]:g}]", closed=closed)
    return [
        CapacityEstimate(min(pc.lhs, 1.0), "dp_augmented", 0.0, pc.gap, None,
                         "product_joint", info),
        CapacityEstimate(min(pc.rhs, 1.0), "product_formula", 0.0, pc.gap, None,
                         "product_factorized", info),
    ]


def run_capacity(cfg: ExperimentConfig):
    rows = _capacity_rows(cfg)
    text = CSV_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in rows)
    return {"capacity.csv": text.encode()}, True


def run_sample(cfg: ExperimentConfig):
    band, payoff, horizon = cfg.band(), cfg.payoff(), cfg["sample.horizon"]
    if cfg["sample.policy"] == "feedback":
        field = solve_auto(payoff, band, horizon, cfg.solver_params())
        policy = extract_feedback_policy(field, band)
        pde = field.at(horizon, 0.0)
    else:
        policy, pde = cfg.constant_policy(), None
    try:
        ens = sample_paths(policy, band, cfg["sample.dt"], horizon, cfg["sample.count"],
                           cfg["seed"], record_every=cfg["sample.record_every"],
                           threads=cfg["threads"])
    except ValueError as exc:
        cfg.fail(["sample.dt", "sample.horizon", "sample.record_every"], str(exc))
    mean, se = mc_expectation(ens, payoff)
    stats = path_statistics(ens, cfg.stat_spec()) if ens.steps >= 2 else None
    doc = {
        "config_hash": cfg.hash,
        "payoff_mean": mean,
        "payoff_se": se,
        "pde_value": pde,
        "statistics": stats.values if stats is not None else {},
    }
    name = "ensemble.bin" if cfg["sample.format"] == "bin" else "ensemble.csv"
    data = ens.to_bytes() if cfg["sample.format"] == "bin" else ens.to_csv().encode()
    return {name: data, "stats.json": _json(doc)}, True


def run_verify(cfg: ExperimentConfig, checks):
    names = list(checks or cfg["verify.checks"])
    unknown = [c for c in names if c not in SUITE]
    if unknown:
        cfg.fail("verify.checks", f"unknown checks {unknown}; known: {list(SUITE)}")
    reports = run_suite(cfg.band(), cfg["seed"], cfg["threads"], names or None)
    for r in reports:
        line = f"{r.check_name}: {r.verdict}"
        if not r.passed:
            line += f"  worst {r.worst()}"
        print(line, file=sys.stderr)
    text = suite_json(reports, {"config_hash": cfg.hash, "seed": cfg["seed"]},
                      timings=cfg["verify.timings"])
    return {"report.json": text.encode()}, all(r.passed for r in reports)


def run_holder(cfg: ExperimentConfig):
    band, beta, thr = cfg.band(), cfg["holder.beta"], cfg["holder.threshold"]
    rows = ["gamma,beta,l,log10_n,log10_term"]
    summary = ["gamma,beta,l,threshold,first_n_below"]
    for g in cfg["holder.gammas"]:
        l = holder_exponent_count(g, band)
        n_star = holder_first_n_below(g, beta, band, thr)
        top = cfg["holder.max_log10"] or len(str(n_star)) + 5
        logs = holder_chain_log10(g, beta, band, [10**k for k in range(top + 1)])
        rows += [f"{g!r},{beta!r},{l},{k},{v!r}" for k, v in enumerate(logs)]
        summary.append(f"{g!r},{beta!r},{l},{thr!r},{n_star}")
    return {
        "holder.csv": ("\n".join(rows) + "\n").encode(),
        "holder_summary.csv": ("\n".join(summary) + "\n").encode(),
    }, True


def write_atomically(out_dir: str, files: dict) -> None:
    """Stage every file as a temp file, then rename them all into place."""
    os.makedirs(out_dir, exist_ok=True)
    umask = os.umask(0)
    os.umask(umask)
    staged = []
    try:
        for name, data in files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=out_dir)
            staged.append((tmp, os.path.join(out_dir, name)))
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.chmod(tmp, 0o666 & ~umask)
    except BaseException:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise
    for tmp, dest in staged:
        os.replace(tmp, dest)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gbrownian", description="G-Brownian motion numerics.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", metavar="PATH", help="flat key: value YAML file")
    p.add_argument("--seed", type=int, metavar="U64")
    p.add_argument("--threads", type=int, metavar="N")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--check", action="append", metavar="NAME",
                   help=f"verify only this check (repeatable): {', '.join(SUITE)}")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--print-config", action="store_true",
                   help="print the resolved config and exit")
    p.add_argument("--timings", action="store_true", help="include runtimes in report.json")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    for item in args.set:
        apply_override(cfg, item)
    for key, val in (("seed", args.seed), ("threads", args.threads), ("out", args.out)):
        if val is not None:
            cfg.set(key, val, f"--{key}")
    if args.timings:
        cfg.set("verify.timings", True, "--timings")
    if args.check:
        cfg.set("verify.checks", args.check, "--check")
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    sub = args.subcommand
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(cfg.dumps())
            return EXIT_OK
        if sub == "verify":
            files, ok = run_verify(cfg, None)
        else:
            files, ok = {"solve": run_solve, "capacity": run_capacity, "sample": run_sample,
                         "holder": run_holder}[sub](cfg)
    except ConfigError as exc:
        print(f"gbrownian: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, CheckError, CapacityError, ValueError) as exc:
        print(f"gbrownian: {sub} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest = {
        "subcommand": sub,
        "config_hash": cfg.hash,
        "passed": ok,
        "files": {k: hashlib.sha256(v).hexdigest() for k, v in sorted(files.items())},
    }
    files[f"{sub}.config.yaml"] = cfg.dumps(runtime=False).encode()
    files[f"{sub}.manifest.json"] = _json(manifest)
    write_atomically(cfg["out"], files)
    return EXIT_OK if ok else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
