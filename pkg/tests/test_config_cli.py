import csv
import json

import pytest
import yaml

from transferrisk.cli import main
from transferrisk.config import ConfigError, from_dict, load, to_dict
from transferrisk.montecarlo import RISK_CURVE_COLUMNS

SMALL = {
    "kind": "risk-curve",
    "instance": {"p": 12, "q": 4, "covariance": {"kind": "ar1", "rho": 0.3}},
    "predictors": [{"name": "RP", "kind": "rp"}, {"name": "O", "kind": "ofp", "lam": [1.0, 0.0, 10.0]}],
    "n_grid": [3, 8, 12, 20],
    "replicates": 4,
}


def _write(tmp_path, data, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data) if name.endswith(".yaml") else json.dumps(data))
    return path


def test_round_trip():
    cfg = from_dict(SMALL)
    assert cfg.instance.covariance.rho == 0.3
    assert cfg.predictors[1].lam == [1.0, 0.0, 10.0]
    assert from_dict(to_dict(cfg)) == cfg


@pytest.mark.parametrize(
    "patch, msg",
    [
        ({"colour": 1}, "unknown key"),
        ({"instance": {"p": 12, "qq": 3}}, r"instance: unknown key\(s\) qq"),
        ({"instance": {"p": "12"}}, "instance.p: expected an integer"),
        ({"instance": {"p": True}}, "expected an integer"),
        ({"kind": "nope"}, "kind must be one of"),
        ({"predictors": [{"kind": "rp"}]}, "missing required key"),
        ({"predictors": [{"name": "a", "kind": "xyz"}]}, "kind must be one of"),
        ({"n_grid": []}, "non-empty n_grid"),
        ({"replicates": 1}, "replicates"),
        ({"instance": {"support": 0}}, "support"),
    ],
)
def test_invalid_configs(patch, msg):
    with pytest.raises(ConfigError, match=msg):
        from_dict({**SMALL, **patch})


def test_single_n_kinds():
    with pytest.raises(ConfigError, match="exactly one n"):
        from_dict({"kind": "full-opt", "n_grid": [5, 6]})
    from_dict({"kind": "full-opt", "n_grid": [5]})


def test_load_yaml_and_json(tmp_path):
    assert load(_write(tmp_path, SMALL)) == load(_write(tmp_path, SMALL, "cfg.json"))


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("kind: [unclosed")
    with pytest.raises(ConfigError, match="cannot parse"):
        load(bad)


def test_cli_config_errors_exit_1(tmp_path, capsys):
    path = _write(tmp_path, {**SMALL, "extra": 1})
    assert main(["asymptotics", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
    assert "config error" in capsys.readouterr().err
    path = _write(tmp_path, SMALL)
    assert main(["heatmap", "--config", str(path)]) == 1
    assert main(["asymptotics", "--config", str(path), "--threads", "0"]) == 1
    assert main(["asymptotics", "--config", str(path), "--seed", "-1"]) == 1


def test_cli_numeric_failure_exit_2(tmp_path, capsys):
    cfg = {"kind": "full-opt", "instance": {"p": 6, "q": 2}, "n_grid": [6]}
    path = _write(tmp_path, cfg)
    assert main(["full-opt", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "numeric failure" in capsys.readouterr().err


def test_cli_io_failure_exit_3(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    path = _write(tmp_path, SMALL)
    assert main(["asymptotics", "--config", str(path), "--out", str(blocker / "sub")]) == 3


def test_simulate_schema_and_manifest(tmp_path):
    path = _write(tmp_path, SMALL)
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(path), "--out", str(out), "--seed", "7"]) == 0
    with open(out / "results.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == RISK_CURVE_COLUMNS
    statuses = {r[-1] for r in rows[1:]}
    assert statuses == {"ok", "boundary", "ok_sample_rich"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["command"] == "simulate"
    assert "threads" not in manifest


def test_threads_do_not_change_outputs(tmp_path):
    path = _write(tmp_path, SMALL)
    for t in (1, 3):
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path / f"t{t}"), "--threads", str(t)]) == 0
    for name in ("results.csv", "summary.json", "manifest.json"):
        assert (tmp_path / "t1" / name).read_bytes() == (tmp_path / "t3" / name).read_bytes()


def test_heatmap_outputs(tmp_path):
    cfg = {
        "kind": "heatmap",
        "instance": {"p": 8, "q": 2, "snr": 20.0},
        "n_grid": [5],
        "optimizer": {"episode_length": 5, "max_episodes": 2},
    }
    out = tmp_path / "h"
    assert main(["heatmap", "--config", str(_write(tmp_path, cfg)), "--out", str(out)]) == 0
    for name in ("M.csv", "N.csv", "spectrum.csv", "results.csv"):
        assert (out / name).exists()
    with open(out / "M.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + 8


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)
