import csv
import os

import numpy as np
import pytest

from powerlab import cli
from powerlab.config import ConfigError, RunConfig, parse_config
from powerlab.trainer import NumericalFailure


def read_rows(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def test_reproduce_example(tmp_path):
    code = cli.main(["reproduce", "--prop", "1", "--methods", "dpo,simpo,ipo,chipo", "--n", "10",
                     "--trials", "100", "--output", str(tmp_path)])
    assert code == 0
    rows = read_rows(tmp_path / "trials.csv")
    assert len(rows) == 400
    assert all(float(r["suboptimality"]) > 0.15 for r in rows)
    assert (tmp_path / "manifest.ini").exists()
    assert len(list((tmp_path / "plot").glob("suboptimality_*.dat"))) == 4


def test_dynamics_preset(tmp_path, capsys):
    assert cli.main(["dynamics", "--preset", "thm3-low", "--output", str(tmp_path)]) == 0
    assert "low-coverage bound holds" in capsys.readouterr().out
    rows = read_rows(tmp_path / "trajectory.csv")
    assert len(rows) == 10001 and float(rows[-1]["t"]) == 40.0
    verdict = read_rows(tmp_path / "verdict.csv")[0]
    assert verdict["regime"] == "low" and verdict["holds"] == "true"


def test_gradcheck_all_methods(tmp_path):
    assert cli.main(["gradcheck", "--samples", "100", "--output", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "gradcheck.csv")
    assert len(rows) == 15
    assert max(float(r["max_rel_error"]) for r in rows) <= 1e-6


def test_manifest_reproduces_identical_outputs(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    args = ["reproduce", "--prop", "2", "--methods", "dpo,ipo", "--n", "10", "--trials", "5", "--seed", "17"]
    assert cli.main(args + ["--output", str(first)]) == 0
    assert cli.main(["reproduce", "--config", str(first / "manifest.ini"), "--output", str(second)]) == 0
    for name in ("trials.csv", "summary.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_summary_rederived_from_trials(tmp_path):
    cli.main(["reproduce", "--prop", "1", "--instance", "both", "--methods", "dpo,ipo", "--n", "10",
              "--trials", "7", "--output", str(tmp_path)])
    trials = read_rows(tmp_path / "trials.csv")
    for row in read_rows(tmp_path / "summary.csv"):
        mine = [t for t in trials if t["setup"] == row["setup"] and t["method"] == row["method"]]
        gaps = np.array([float(t["suboptimality"]) for t in mine])
        assert int(row["trials"]) == len(mine)
        assert int(row["passed"]) == sum(t["passed"] == "1" for t in mine)
        assert float(row["subopt_min"]) == gaps.min()
        assert float(row["subopt_mean"]) == pytest.approx(gaps.mean(), rel=1e-15)


def test_bad_config_exits_1(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[run]\ntrials = -3\n", encoding="utf-8")
    assert cli.main(["reproduce", "--config", str(path), "--output", str(tmp_path / "out")]) == 1
    assert "trials" in capsys.readouterr().err


def test_unknown_method_exits_1(tmp_path):
    assert cli.main(["reproduce", "--prop", "1", "--methods", "dpo,bogus", "--output", str(tmp_path)]) == 1


def test_method_sections_rejected_in_set(tmp_path):
    assert cli.main(["train", "--set", "method.0.beta=2", "--output", str(tmp_path)]) == 1


def test_acceptance_failure_exits_2(tmp_path):
    path = tmp_path / "ipo.ini"
    path.write_text("[run]\nprop = 1\ntrials = 3\n[instance]\nsetup = instance2\nn = 10\n"
                    "[method.0]\nmethod = ipo\ntau = 1.0\n", encoding="utf-8")
    assert cli.main(["reproduce", "--config", str(path), "--output", str(tmp_path / "out")]) == 2
    rows = read_rows(tmp_path / "out" / "trials.csv")
    assert all(r["passed"] == "0" for r in rows)


def test_numerical_failure_exits_3(tmp_path, monkeypatch):
    def explode(*args, **kwargs):
        raise NumericalFailure(7, "non-finite loss")

    monkeypatch.setattr(cli, "train", explode)
    assert cli.main(["train", "--output", str(tmp_path)]) == 3


def test_env_var_sets_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("POWERLAB_OUTPUT_DIR", str(tmp_path / "env"))
    assert cli.main(["concentrability", "--grid-step", "0.25"]) == 0
    rows = read_rows(tmp_path / "env" / "concentrability.csv")
    assert float(rows[0]["grid_step"]) == 0.25
    assert float(rows[0]["grid_lower_bound"]) >= 0


def test_default_output_dir(tmp_path, monkeypatch):
    monkeypatch.delenv("POWERLAB_OUTPUT_DIR", raising=False)
    monkeypatch.chdir(tmp_path)
    assert cli.main(["dynamics", "--preset", "thm3-high"]) == 0
    assert (tmp_path / "powerlab-out" / "verdict.csv").exists()


def test_files_are_utf8_with_lf(tmp_path):
    cli.main(["train", "--method", "power-dl", "--instance", "2", "--steps", "20", "--lr", "0.1",
              "--label-update", "--output", str(tmp_path)])
    for path in [tmp_path / "train.csv", tmp_path / "manifest.ini", *(tmp_path / "plot").iterdir()]:
        data = path.read_bytes()
        data.decode("utf-8")
        assert b"\r" not in data
    header = (tmp_path / "train.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header.startswith("step,loss,theta_0") and "label_0" in header


def test_train_auto_learning_rate(tmp_path, capsys):
    assert cli.main(["train", "--method", "dpo", "--instance", "1", "--lr", "auto", "--output", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "train.csv")
    assert float(rows[-1]["theta_2"]) >= 1 - 1e-3


def test_train_on_instance_file(tmp_path):
    inst = tmp_path / "inst.ini"
    inst.write_text("[instance]\nrewards = 0.2,0.9\nlengths = 1,2\npairs = 0-1:1.0\n", encoding="utf-8")
    cfg = tmp_path / "run.ini"
    cfg.write_text(f"[instance]\nsetup = file\npath = {inst}\nn = 20\n[train]\nlearning_rate = 0.1\nsteps = 10\n",
                   encoding="utf-8")
    assert cli.main(["train", "--config", str(cfg), "--output", str(tmp_path / "out")]) == 0
    assert len(read_rows(tmp_path / "out" / "train.csv")) == 11


def test_sweep_thm3(tmp_path):
    assert cli.main(["sweep", "--kind", "thm3", "--output", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "thm3_sweep.csv")
    assert len(rows) == 55
    assert all(float(r["slack"]) >= 0 for r in rows)
    assert len(list((tmp_path / "plot").glob("bound_slack_*.dat"))) == 5


def test_sweep_over_n(tmp_path):
    assert cli.main(["sweep", "--prop", "2", "--methods", "dpo", "--n-values", "4,10", "--trials", "3",
                     "--event-trials", "1000", "--output", str(tmp_path)]) == 0
    assert len(read_rows(tmp_path / "trials.csv")) == 6
    assert (tmp_path / "plot" / "event_freq_vs_n_type2.dat").exists()


def test_config_roundtrip():
    cfg = RunConfig(command="reproduce", seed=5, trials=9, prop=4)
    assert parse_config(cfg.to_ini()) == cfg


def test_config_errors_name_the_field():
    with pytest.raises(ConfigError, match="seed"):
        parse_config("[run]\ncommand = reproduce\nseed = abc\n")
