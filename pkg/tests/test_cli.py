import json
import os

import pytest

from gbrownian.cli import main
from gbrownian.config import (
    DEFAULTS,
    ConfigError,
    ExperimentConfig,
    apply_override,
    parse_config,
)


def test_config_roundtrip_is_lossless():
    cfg = ExperimentConfig()
    apply_override(cfg, "solver.dx=0.005")
    apply_override(cfg, "payoff.intervals=[[0, .inf], [-3, -1]]")
    text = cfg.dumps()
    back = parse_config(text)
    assert back.values == cfg.values
    assert back.dumps() == text
    assert back.hash == cfg.hash


def test_hash_ignores_runtime_keys():
    a, b = ExperimentConfig(), ExperimentConfig()
    apply_override(b, "threads=8")
    apply_override(b, "out=/elsewhere")
    assert a.hash == b.hash
    apply_override(b, "seed=7")
    assert a.hash != b.hash


def test_exponent_literals_accepted():
    cfg = parse_config("holder.threshold: 1e-8\n")
    assert cfg["holder.threshold"] == 1e-8


@pytest.mark.parametrize("text, line", [
    ("seed: 1\nnope: 2\n", 2),
    ("seed: 1\nseed: 2\n", 2),
    ("seed: 1\n\nsolver.dx: [1,\n", 4),
    ("band.sigma_lo_sq: yes\n", 1),
    ("band:\n  sigma_lo_sq: 0.5\n", 1),
])
def test_config_errors_reference_lines(text, line):
    with pytest.raises(ConfigError, match=f"cfg.yaml:{line}"):
        parse_config(text, "cfg.yaml")


def test_validation_names_source_line():
    cfg = parse_config("seed: 1\nband.sigma_lo_sq: 2.0\n", "cfg.yaml")
    with pytest.raises(ConfigError, match="cfg.yaml:2"):
        cfg.validate()


def _run(tmp_path, *argv):
    out = tmp_path / "out"
    rc = main([*argv, "--out", str(out)])
    return rc, out


def test_solve_constant_payoff(tmp_path):
    rc, out = _run(tmp_path, "solve", "--set", "payoff.kind=constant", "--set",
                   "solve.horizon=0.05", "--set", "solver.max_levels=3")
    assert rc == 0
    lines = (out / "field.csv").read_text().splitlines()
    assert lines[0] == "t,x,u"
    assert all(float(l.split(",")[2]) == 1.0 for l in lines[1:])
    manifest = json.loads((out / "solve.manifest.json").read_text())
    assert manifest["config_hash"] == parse_config(
        (out / "solve.config.yaml").read_text()).hash


def test_capacity_ball_row(tmp_path):
    rc, out = _run(tmp_path, "capacity")
    assert rc == 0
    header, row = (out / "capacity.csv").read_text().splitlines()
    assert header.split(",")[3] == "upper_bound"
    assert abs(float(row.split(",")[3]) - 0.52139) < 5e-5


def test_runs_are_byte_identical(tmp_path):
    args = ["sample", "--set", "sample.count=300", "--set", "sample.dt=0.01",
            "--set", "sample.policy=constant"]
    main([*args, "--out", str(tmp_path / "a")])
    main([*args, "--out", str(tmp_path / "b"), "--threads", "3"])
    for name in ("ensemble.bin", "stats.json", "sample.manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_holder_outputs(tmp_path):
    rc, out = _run(tmp_path, "holder", "--set", "holder.gammas=[0.75]")
    assert rc == 0
    summary = (out / "holder_summary.csv").read_text().splitlines()
    assert summary[1].split(",")[2] == "9"
    assert len(summary[1].split(",")[4]) == 101


def test_bad_config_writes_nothing(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("solver.dx: 0.01\nsolver.cfl: 3\n")
    rc, out = _run(tmp_path, "solve", "--config", str(cfg))
    assert rc == 2
    assert "bad.yaml:2" in capsys.readouterr().err
    assert not out.exists()


def test_policy_band_mismatch_rejected(tmp_path):
    rc, out = _run(tmp_path, "sample", "--set", "sample.policy=constant",
                   "--set", "sample.sigma_sq=2")
    assert rc == 2 and not out.exists()


def test_runtime_failure_writes_nothing(tmp_path):
    rc, out = _run(tmp_path, "capacity", "--set", "capacity.event=running_max_leq",
                   "--set", "capacity.eps=0.02")
    assert rc == 3 and not out.exists()


def test_print_config(tmp_path, capsys):
    rc = main(["verify", "--print-config", "--seed", "9", "--set", "solver.dx=0.02"])
    assert rc == 0
    text = capsys.readouterr().out
    cfg = parse_config(text)
    assert cfg["seed"] == 9 and cfg["solver.dx"] == 0.02
    assert len(text.splitlines()) == len(DEFAULTS)


def test_verify_named_check(tmp_path):
    rc, out = _run(tmp_path, "verify", "--check", "holder_chain", "--check", "linear_oracle")
    assert rc == 0
    doc = json.loads((out / "report.json").read_text())
    assert [c["check_name"] for c in doc["checks"]] == ["holder_chain", "linear_oracle"]
    assert doc["all_pass"]
    assert not [f for f in os.listdir(out) if f.startswith(".")]
