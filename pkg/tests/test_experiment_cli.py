import csv
import json

import numpy as np
import pytest

from kzpeps import cli
from kzpeps.experiment import ExperimentConfig, aggregate, load_config, read_results, run_experiment


def _cfg(tmp_path, **kw):
    base = dict(L=2, seeds=[1], t_a=[0.25, 0.5, 1.0], D_e=4, D_t=2, evaluator="both",
                det={"d": 4}, mc={"max_cycles": 60}, output=str(tmp_path / "run"))
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        _cfg(tmp_path, t_a=[]).validate()
    with pytest.raises(ValueError):
        _cfg(tmp_path, t_a=[2.0, 1.0]).validate()
    with pytest.raises(ValueError):
        _cfg(tmp_path, D_t=5).validate()
    with pytest.raises(ValueError):
        _cfg(tmp_path, evaluator="both-ish").validate()
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"L": 2, "bogus": 1}))
    with pytest.raises(ValueError):
        load_config(p)


def test_config_file_with_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"L": 2, "t_a": [1, 2, 4], "D_t": 2}))
    cfg = load_config(p, D_e=3, output=None)
    assert cfg.L == 2 and cfg.D_e == 3 and cfg.D_t == 2 and cfg.output == "kz-run"
    assert cfg.hash() == load_config(p, D_e=3, output="elsewhere").hash()


@pytest.fixture(scope="module")
def l2_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    cfg = _cfg(out)
    return cfg, run_experiment(cfg, workers=1)


def test_engines_agree_on_l2(l2_run):
    cfg, summary = l2_run
    assert summary["complete"] and summary["failed"] == 0
    rows = summary["rows"]
    assert len(rows) == 6
    for t in cfg.t_a:
        det = next(r for r in rows if r["t_a_ns"] == t and r["engine"] == "deterministic")
        mc = next(r for r in rows if r["t_a_ns"] == t and r["engine"] == "monte-carlo")
        assert mc["converged"] and mc["sigma_Q"] / mc["Q"] <= 0.01
        assert abs(det["Q"] - mc["Q"]) <= 3 * mc["sigma_Q"]


def test_results_files_and_provenance(l2_run):
    cfg, summary = l2_run
    out = summary["output"]
    with open(f"{out}/results.csv") as fh:
        header = next(csv.reader(fh))
    assert header[:5] == ["t_a_ns", "Q", "sigma_Q", "engine", "converged"]
    meta = json.load(open(f"{out}/metadata.json"))
    assert meta["config_hash"] == cfg.hash() and "code_version" in meta
    lines = [json.loads(s) for s in open(f"{out}/rows.jsonl")]
    prov = lines[0]["provenance"]
    for key in ("config_hash", "code_version", "disorder_seed", "schedule_source", "evaluator_settings"):
        assert key in prov


def test_rerun_is_resumable_and_deterministic(l2_run, tmp_path):
    cfg, summary = l2_run
    again = run_experiment(cfg, workers=1)
    assert len(again["rows"]) == len(summary["rows"])
    # fresh directory: deterministic rows are bit-identical
    fresh = run_experiment(_cfg(tmp_path, evaluator="deterministic"), workers=1)
    a = {r["t_a_ns"]: r["Q"] for r in summary["rows"] if r["engine"] == "deterministic"}
    b = {r["t_a_ns"]: r["Q"] for r in fresh["rows"]}
    assert a == b


def test_aggregate_drops_incomplete_seeds():
    rows = [
        {"engine": "deterministic", "seed": 1, "t_a_ns": 1.0, "Q": 0.4, "sigma_Q": 0.0},
        {"engine": "deterministic", "seed": 1, "t_a_ns": 2.0, "Q": 0.3, "sigma_Q": 0.0},
        {"engine": "deterministic", "seed": 2, "t_a_ns": 1.0, "Q": 0.6, "sigma_Q": 0.0},
        {"engine": "deterministic", "seed": 2, "t_a_ns": 2.0, "Q": float("nan"), "sigma_Q": float("nan")},
        {"engine": "monte-carlo", "seed": 1, "t_a_ns": 1.0, "Q": 0.5, "sigma_Q": 0.03},
        {"engine": "monte-carlo", "seed": 2, "t_a_ns": 1.0, "Q": 0.7, "sigma_Q": 0.04},
    ]
    assert aggregate(rows, "deterministic") == [(1.0, 0.4, 0.0), (2.0, 0.3, 0.0)]
    (t, q, s), = aggregate(rows, "monte-carlo")
    assert q == pytest.approx(0.6) and s == pytest.approx(0.025)


def test_cli_pipeline(tmp_path, capsys):
    d, g = tmp_path / "d.json", tmp_path / "g.json"
    assert cli.main(["gen-disorder", "--L", "2", "--seed", "3", "--out", str(d), "--ground-out", str(g)]) == 0
    st = tmp_path / "s.npz"
    assert cli.main(["evolve", "--disorder", str(d), "--t-a", "0.5", "--D-e", "4", "--D-t", "2",
                     "--out", str(st), "--log", str(tmp_path / "log.json")]) == 0
    capsys.readouterr()
    assert cli.main(["eval-det", "--state", str(st), "--disorder", str(d), "--ground", str(g), "--d", "4",
                     "--out", str(tmp_path / "corr.csv")]) == 0
    det = json.loads(capsys.readouterr().out)
    assert (tmp_path / "corr.json").exists()
    code = cli.main(["eval-mc", "--state", str(st), "--disorder", str(d), "--ground", str(g),
                     "--max-cycles", "60", "--seed", "1", "--out", str(tmp_path / "mc.json")])
    mc = json.loads(capsys.readouterr().out)
    assert code == 0 and mc["converged"]
    assert abs(mc["Q"] - det["Q"]) <= 3 * mc["sigma_Q"]


def test_cli_run_config_and_workers(tmp_path, monkeypatch, capsys):
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps({"L": 2, "seeds": [1, 2], "t_a": [0.25, 0.5, 1.0], "D_t": 2,
                                "evaluator": "deterministic", "det": {"d": 4}}))
    monkeypatch.setenv("KZPEPS_WORKERS", "2")
    out = tmp_path / "r"
    assert cli.main(["run", "--config", str(conf), "--out", str(out)]) == 0
    rows = read_results(out / "results.csv")
    assert len(rows) == 6
    fit = json.loads((out / "fit.json").read_text())
    assert np.isfinite(fit["deterministic"]["exponent"])
    capsys.readouterr()
    assert cli.main(["fit", "--results", str(out / "results.csv"), "--window", "0.25", "1.0"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["predicted_exponent"] == pytest.approx(-0.965, abs=5e-4)
    assert report["fits"]["deterministic"]["window"] == [0.25, 1.0]


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["eval-det", "--state", str(tmp_path / "missing.npz"), "--disorder", str(tmp_path / "x.json")]) == 1
    conf = tmp_path / "bad.json"
    conf.write_text(json.dumps({"L": 2, "t_a": []}))
    assert cli.main(["run", "--config", str(conf), "--out", str(tmp_path / "o")]) == 1
