import csv
import json
from pathlib import Path

import pytest

from splitserve.cli import EXIT_CONFIG, main
from splitserve.config import ConfigError, apply_overrides, config_from_dict, load_config
from splitserve.costmodel import default_profile

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_config_uses_defaults():
    cfg = config_from_dict({"hardware": "default"})
    assert cfg.hardware == default_profile()
    assert cfg.system.policy == "aps" and cfg.cluster.n_instances == 2
    assert cfg.system.batch_target_ms == pytest.approx(97.0)


def test_missing_hardware_is_named():
    with pytest.raises(ConfigError, match="hardware"):
        config_from_dict({})


@pytest.mark.parametrize("data,msg", [
    ({"hardware": "default", "bogus": 1}, "bogus"),
    ({"hardware": "default", "workload": {"rate_qps": -1}}, "rate_qps"),
    ({"hardware": "default", "cluster": {"n_instances": "two"}}, "n_instances"),
    ({"hardware": {"flops_per_ms": 1.0}}, "required"),
    ({"hardware": {"base": "default", "typo": 1}}, "typo"),
])
def test_invalid_configs(data, msg):
    with pytest.raises(ConfigError, match=msg):
        config_from_dict(data)


def test_hardware_override_on_default_base():
    cfg = config_from_dict({"hardware": {"base": "default", "hbm_capacity_tokens": 100000}})
    assert cfg.hardware.hbm_capacity_tokens == 100000
    assert cfg.hardware.flops_per_ms == default_profile().flops_per_ms


def test_overrides():
    data = apply_overrides({"hardware": "default"}, ["workload.rate_qps=3.5", "system.scheduler.K=4",
                                                     "hardware.noise_sigma=0.05"])
    cfg = config_from_dict(data)
    assert cfg.workload.rate_qps == 3.5 and cfg.system.scheduler.K == 4
    assert cfg.hardware.noise_sigma == 0.05
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no_equals"])


def test_top_level_seed_reaches_workload():
    assert config_from_dict({"hardware": "default", "seed": 9}).workload.seed == 9


@pytest.mark.parametrize("name", ["symmetric.yaml", "capacity_hybrid.yaml", "capacity_reasoning.yaml"])
def test_shipped_configs_load(name):
    load_config(CONFIGS / name)


def test_cli_run_writes_outputs(tmp_path, capsys):
    cfg = write(tmp_path, "hardware: default\nworkload: {preset: balanced, rate_qps: 1.0, duration_s: 10}\n")
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "requests.jsonl").read_text().splitlines()
    assert "summary" in json.loads(lines[-1])
    rows = list(csv.DictReader(open(tmp_path / "o" / "summary.csv")))
    assert rows[0]["policy"] == "aps"
    assert "splitserve run" in capsys.readouterr().out


def test_cli_bad_config_exit_code(tmp_path, capsys):
    cfg = write(tmp_path, "workload: {preset: balanced}\n")
    assert main(["run", str(cfg)]) == EXIT_CONFIG
    assert "hardware" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    bad = write(tmp_path, "hardware: [\n", "bad.yaml")
    assert main(["run", str(bad)]) == EXIT_CONFIG


def test_cli_sweep(tmp_path):
    cfg = write(tmp_path, "hardware: default\nsweep: {num_requests: 30, rate_qps: 4.0, warmup_s: 1.0}\n")
    assert main(["sweep-split", str(cfg), "--prompt", "256", "--decode", "64", "--step", "160",
                 "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep_P256_D64.csv")))
    assert [r["s"] for r in rows[:-1]] == ["0", "160", "256", "320"]
    assert rows[-1]["kind"] == "aps"


def test_cli_capacity_rows(tmp_path, capsys):
    cfg = write(tmp_path, "hardware: default\nworkload: {preset: balanced}\n"
                          "capacity: {lo: 0.5, hi: 1.0, resolution: 0.5, seeds: [0], duration_s: 10,"
                          " coloc_chunks: [512]}\n")
    assert main(["capacity", str(cfg), "--policies", "aps,coloc", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "capacity.csv")))
    assert [r["policy"] for r in rows] == ["aps", "coloc"]
    assert all(r["report"] for r in rows)


def test_cli_replay_needs_trace(tmp_path):
    cfg = write(tmp_path, "hardware: default\n")
    assert main(["replay", str(cfg)]) == EXIT_CONFIG


def test_cli_replay(tmp_path):
    trace = write(tmp_path, "arrival_ms,prompt_tokens,output_tokens\n0,500,20\n1000,800,30\n70000,300,10\n",
                  "t.csv")
    cfg = write(tmp_path, "hardware: default\n")
    assert main(["replay", str(cfg), "--trace", str(trace), "--bucket-min", "1", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "replay.csv")))
    assert rows and {"aps", "disagg", "coloc"} <= {r["policy"] for r in rows}
