import json

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from hammersim import cli
from hammersim.calibration import CalibrationError
from hammersim.config import ConfigError, ScenarioConfig, config_from_dict, config_to_dict, dump_config, parse_config
from hammersim.opflip.database import FlipDatabaseEntry, write_database


def test_defaults_roundtrip():
    cfg = ScenarioConfig()
    assert config_from_dict(yaml.safe_load(dump_config(cfg))) == cfg


@settings(max_examples=40)
@given(seed=st.integers(0, 2**31), para=st.none() | st.floats(0.0, 1.0), window=st.integers(1, 10**9),
       policy=st.sampled_from(["adaptive", "open_page", "closed_page"]), gib=st.floats(0.5, 64.0),
       machines=st.lists(st.sampled_from(["desktop", "server"]), min_size=1, max_size=2))
def test_dump_parse_roundtrip(seed, para, window, policy, gib, machines):
    data = {"seed": seed, "dram": {"page_policy": policy, "para_probability": para},
            "defenses": {"window_ns": window}, "optimizer": {"memory_gib": gib}, "dos": {"machines": machines}}
    cfg = config_from_dict(data)
    again = config_from_dict(yaml.safe_load(dump_config(cfg)))
    assert again == cfg
    assert type(again.defenses.window_ns) is int
    assert config_to_dict(again) == config_to_dict(cfg)


def test_dump_can_omit_keys():
    assert "out:" not in dump_config(ScenarioConfig(), omit=("out",))


@pytest.mark.parametrize("data,fragment", [
    ({"sead": 1}, "unknown key sead"),
    ({"dram": {"policy": "x"}}, "unknown key dram.policy"),
    ({"dram": {"para_probability": 1.5}}, "para_probability: probability ∈ [0,1], got 1.5"),
    ({"seed": "one"}, "seed: expected an integer"),
    ({"defenses": {"window_ns": 1.5}}, "defenses.window_ns: expected an integer"),
    ({"template": {"technique": "triple"}}, "template"),
    ({"profile": "laptop"}, "profile"),
    ({"attack": {"template_fraction": 0.9}}, "attack"),
])
def test_config_errors_name_the_key(data, fragment):
    with pytest.raises(ConfigError) as info:
        config_from_dict(data)
    assert fragment in str(info.value)


def test_invalid_yaml(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: [1,\n")
    with pytest.raises(ConfigError):
        parse_config(path)


def test_cli_usage_errors(tmp_path, capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["teleport"]) == cli.EXIT_USAGE
    bad = tmp_path / "bad.yaml"
    bad.write_text("dram:\n  para_probability: 2\n")
    assert cli.main(["optimize", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE
    assert "para_probability" in capsys.readouterr().err
    assert cli.main(["optimize", "--config", str(tmp_path / "missing.yaml")]) == cli.EXIT_USAGE
    assert cli.main(["optimize", "--seed", "-1", "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE


def test_cli_optimize_ok(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["optimize", "--out", str(out), "--seed", "4"]) == cli.EXIT_OK
    doc = json.loads((out / "outcome.json").read_text())
    assert doc["plan"]["n"] == 50
    assert parse_config(out / "config.yaml").seed == 4
    assert len((out / "table3.csv").read_text().splitlines()) == 7


def test_cli_failed_verification_exits_2(tmp_path):
    db = tmp_path / "db.tsv"
    write_database([FlipDatabaseEntry("x.so", 0x1001, 0, "jnz 0x1010", "jb 0x1010", True, b"\x75\x0d", 1)], db)
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"opflip:\n  database: {db}\n")
    assert cli.main(["opflip-scan", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_FAILED
    doc = json.loads((tmp_path / "o" / "outcome.json").read_text())
    assert doc["verification"]["mismatched"] == 1


def test_cli_calibration_failure_exits_3(tmp_path, monkeypatch):
    def fail(**_):
        raise CalibrationError("no fit")
    monkeypatch.setattr(cli, "calibrate", fail)
    assert cli.main(["calibrate", "--out", str(tmp_path)]) == cli.EXIT_CALIBRATION
    assert json.loads((tmp_path / "calibration.json").read_text())["converged"] is False
