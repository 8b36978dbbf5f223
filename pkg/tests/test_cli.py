import csv
import io
import json

import pytest

from pentidef.cli import main
from pentidef.oracles import FIXTURES

CONFIG = """
n_clients = 5
rounds = 1
adversary_fraction = 0.2
seed = 4
[data]
n_samples = 800
n_features = 5
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(CONFIG)
    return p


def test_simulate_writes_report(cfg_file, tmp_path):
    out = tmp_path / "r.json"
    assert main(["simulate", "--config", str(cfg_file), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["chain_valid"] and rep["config"]["seed"] == 4
    out2 = tmp_path / "r2.json"
    assert main(["simulate", "--config", str(cfg_file), "--seed", "9", "--out", str(out2),
                 "--jobs", "2"]) == 0
    assert json.loads(out2.read_text())["config"]["seed"] == 9


def test_simulate_missing_config(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "missing.toml")]) != 0
    assert "missing.toml" in capsys.readouterr().err


def test_validate_config(cfg_file, tmp_path, capsys):
    assert main(["validate-config", str(cfg_file)]) == 0
    bad = tmp_path / "bad.toml"
    bad.write_text("adversary_fraction = 0.6\n")
    assert main(["validate-config", str(bad)]) != 0
    assert "threat model" in capsys.readouterr().err


def test_bench_ledger_csv(tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench-ledger", "--txs", "50", "--rate", "5", "--out", str(out)]) == 0
    rows = list(csv.reader(io.StringIO(out.read_text())))
    assert rows[0][:3] == ["Name", "Succ", "Fail"]
    assert all(r[1] == "50" and r[2] == "0" for r in rows[1:])


@pytest.mark.parametrize("name", FIXTURES)
def test_oracle_fixtures(name, capsys):
    assert main(["oracle", name]) == 0
    assert isinstance(json.loads(capsys.readouterr().out), dict)


def test_unknown_subcommand_exits_nonzero():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code != 0
