import csv
import json
import subprocess
import sys

import pytest

from smallcell_pf.cli import CONVERGENCE_COLUMNS, SUMMARY_COLUMNS, ExperimentSpec, main, run_experiment
from smallcell_pf.scenario import ConfigurationError, ScenarioConfig

SMALL = ScenarioConfig(num_sbs=2, num_users=4, num_rbs=3, rng_seed=10)


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_golden_columns(tmp_path):
    spec = ExperimentSpec(base=SMALL, sweep=(20.0,), methods=("greedy",), out=tmp_path)
    assert run_experiment(spec) == 0
    with open(tmp_path / "summary.csv", newline="") as fh:
        assert next(csv.reader(fh)) == [
            "method", "backhaul_mbps", "seed", "utility_nats", "feasible", "min_slack_mbps", "wall_ms",
        ]
    with open(tmp_path / "convergence.csv", newline="") as fh:
        assert next(csv.reader(fh)) == CONVERGENCE_COLUMNS
    assert SUMMARY_COLUMNS[0] == "method"
    assert (tmp_path / "summary.csv").read_bytes().count(b"\r\n") == 2


def test_one_run_gives_one_row(tmp_path):
    run_experiment(ExperimentSpec(base=SMALL, sweep=(20.0,), methods=("greedy",), out=tmp_path))
    rows = _rows(tmp_path / "summary.csv")
    assert len(rows) == 1
    assert rows[0]["method"] == "greedy" and rows[0]["seed"] == "10"


def test_seed_derivation_and_spec_echo(tmp_path):
    spec = ExperimentSpec(base=SMALL, sweep=(10.0, 30.0), trials=3, methods=("greedy", "brute"), out=tmp_path,
                          timing=False)
    assert run_experiment(spec) == 0
    rows = _rows(tmp_path / "summary.csv")
    assert len(rows) == 12
    assert sorted({int(r["seed"]) for r in rows}) == [10, 11, 12]
    keys = [(r["method"], float(r["backhaul_mbps"]), int(r["seed"])) for r in rows]
    assert keys == sorted(keys)
    echo = json.loads((tmp_path / "spec.json").read_text())
    assert echo["seeds"] == [10, 11, 12] and echo["sweep_backhaul_mbps"] == [10.0, 30.0]
    # convergence rows only for the first trial
    assert {int(r["seed"]) for r in _rows(tmp_path / "convergence.csv")} == {10}


def test_identical_specs_give_identical_bytes(tmp_path):
    outs = []
    for name in ("a", "b"):
        spec = ExperimentSpec(base=SMALL, sweep=(20.0, 60.0), trials=2, methods=("proposed_low", "greedy", "ga"),
                              out=tmp_path / name, timing=False)
        spec.ga = type(spec.ga)(max_gen=10)
        assert run_experiment(spec) == 0
        outs.append([(tmp_path / name / f).read_bytes() for f in ("summary.csv", "convergence.csv", "spec.json")])
    assert outs[0] == outs[1]


@pytest.mark.parametrize("kw", [
    {"trials": 0},
    {"sweep": ()},
    {"sweep": (40.0, 20.0)},
    {"sweep": (-1.0,)},
    {"methods": ("nope",)},
    {"threads": 0},
])
def test_spec_validation(tmp_path, kw):
    with pytest.raises(ConfigurationError):
        ExperimentSpec(base=SMALL, out=tmp_path, **kw).validate()


def test_brute_refused_on_large_instances(tmp_path):
    big = ScenarioConfig(num_sbs=4, num_users=10, num_rbs=20)
    with pytest.raises(ConfigurationError):
        ExperimentSpec(base=big, methods=("brute",), out=tmp_path).validate()


def test_main_end_to_end(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"num_sbs": 2, "num_users": 4, "num_rbs": 3}))
    out = tmp_path / "run"
    code = main(["--config", str(cfg), "--preset", "low", "--sweep", "20,40", "--trials", "2",
                 "--methods", "proposed_low,greedy", "--out", str(out), "--seed", "5", "--no-timing"])
    assert code == 0
    rows = _rows(out / "summary.csv")
    assert len(rows) == 8
    assert {r["wall_ms"] for r in rows} == {"0.0"}
    assert json.loads((out / "spec.json").read_text())["base"]["iters"]["I_P"] == 10


def test_main_exit_codes(tmp_path, capsys):
    assert main(["--sweep", "40,20", "--out", str(tmp_path)]) == 2
    assert "strictly increasing" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["--config", str(bad), "--out", str(tmp_path)]) == 2
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["--methods", "greedy", "--sweep", "20", "--out", str(blocker / "sub")]) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "smallcell_pf", "--methods", "greedy", "--sweep", "20", "--out", str(tmp_path),
         "--config", "/nonexistent.json"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2
    assert "cannot read config" in proc.stderr
