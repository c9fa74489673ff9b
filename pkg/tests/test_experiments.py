import json
import os

import numpy as np
import pytest

from prompt_impute import experiments as ex
from prompt_impute.cli import main
from prompt_impute.experiments import ExperimentConfig

TINY = {
    "dataset": {"synthetic": {"record_count": 80, "feature_count": 3, "length_min": 4, "length_max": 8,
                              "missing_rate": 0.4, "seed": 5}},
    "task": "classification",
    "backbones": ["rnn"],
    "protocols": ["pai", "zero", "locf"],
    "train": {"epochs": 2, "batch_size": 16},
    "arch": {"hidden_dim": 4},
    "seeds": [1, 2, 3],
}


def tiny(**over):
    return ExperimentConfig.from_dict({**json.loads(json.dumps(TINY)), **over})


@pytest.fixture(scope="module")
def compare_report():
    return ex.run_compare_protocols(tiny())


def test_compare_rows(compare_report):
    rows = compare_report["rows"]
    assert len(rows) == 9
    assert all(r["status"] == "ok" for r in rows)
    for r in rows:
        assert all(0.0 <= r[m] <= 1.0 for m in ("auroc", "auprc", "min_pse"))
    assert compare_report["fairness"]["consistent"]
    assert len(compare_report["aggregates"]) == 3 * 3


def test_aggregates_recomputable(compare_report):
    for a in compare_report["aggregates"]:
        vals = [r[a["metric"]] for r in compare_report["rows"]
                if r["protocol"] == a["protocol"] and r["backbone"] == a["backbone"]]
        assert a["median"] == float(np.median(vals)) and a["n"] == len(vals)


def test_zero_only_has_no_prompt():
    report = ex.run_compare_protocols(tiny(protocols=["zero"], seeds=[1]))
    assert report["manifest"]["prompt_parameters_total"] == 0
    assert all(r["prompt_params"] == 0 for r in report["rows"])


def test_emit_report(compare_report, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    ex.emit_report(compare_report, str(a), ["json", "csv", "figure-data"])
    ex.emit_report(compare_report, str(b), ["json", "csv", "figure-data"])
    for name in ("report.json", "report.csv", "figure_rnn.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    lines = (a / "report.csv").read_text().splitlines()
    assert len(lines) == 10
    fig = (a / "figure_rnn.csv").read_text().splitlines()
    assert fig[0] == "sweep_value,protocol,metric,median,min,max"
    assert not any(p.endswith(".tmp") for p in os.listdir(a))
    with pytest.raises(ValueError):
        ex.emit_report(compare_report, str(a), [])
    with pytest.raises(ValueError):
        ex.emit_report(compare_report, str(a), ["xml"])


def test_rerun_identical(compare_report):
    again = ex.run_compare_protocols(tiny())
    assert ex.without_timing(again) == ex.without_timing(compare_report)


def test_regenerate_from_manifest(compare_report):
    cfg = ExperimentConfig.from_dict(compare_report["manifest"]["config"])
    assert cfg.config_hash() == compare_report["manifest"]["config_hash"]
    assert ex.without_timing(ex.run_sweep(cfg)) == ex.without_timing(compare_report)


def test_missing_sweep_fairness():
    cfg = tiny(protocols=["pai", "zero"], seeds=[1],
               sweep={"kind": "missing", "values": [0.4, 0.5, 0.6, 0.7]})
    report = ex.run_sweep(cfg)
    assert len(report["rows"]) == 8
    fair = report["fairness"]
    assert fair["consistent"] and len(fair["hashes"]) == 4
    assert len({v[0] for v in fair["hashes"].values()}) == 4
    rates = []
    for v in cfg.sweep["values"]:
        tr, va, te, _, _ = ex.prepare_splits(cfg, 1, v)
        total = sum(r.mask.size for d in (tr, va, te) for r in d)
        observed = sum(int(r.mask.sum()) for d in (tr, va, te) for r in d)
        rates.append(1 - observed / total)
    assert all(abs(r - v) < 1e-3 for r, v in zip(rates, cfg.sweep["values"]))


def test_samples_full_equals_compare(compare_report):
    sweep = ex.run_sweep(tiny(sweep={"kind": "samples", "values": [1.0]}))
    strip = lambda rows: [{k: v for k, v in r.items() if k not in ("sweep_value", "wall_time_s")} for r in rows]
    assert strip(sweep["rows"]) == strip(compare_report["rows"])


def test_lr_and_layers_sweeps():
    report = ex.run_sweep(tiny(protocols=["pai", "zero"], seeds=[1],
                               sweep={"kind": "lr", "values": [1e-1, 1e-3]}))
    pai = [r for r in report["rows"] if r["protocol"] == "pai"]
    assert sorted(r["lr_prompt"] for r in pai) == [1e-3, 1e-1]
    assert all(r["lr_model"] == 1e-2 for r in report["rows"])
    assert set(report["lr_regimes"]["rnn"]) == {"prompt_lr_below_model", "prompt_lr_at_or_above_model"}
    report = ex.run_sweep(tiny(protocols=["pai", "zero"], seeds=[1],
                               sweep={"kind": "layers", "values": [1, 2]}))
    layers = {(r["protocol"], r["sweep_value"]): r["layers"] for r in report["rows"]}
    assert layers == {("pai", 1): 1, ("pai", 2): 1, ("zero", 1): 1, ("zero", 2): 2}


def test_config_validation():
    with pytest.raises(ValueError):
        tiny(protocols=[])
    with pytest.raises(ValueError):
        tiny(bogus=1)
    with pytest.raises(ValueError):
        tiny(sweep={"kind": "missing", "values": [0.3, 0.5]})
    with pytest.raises(ValueError):
        tiny(sweep={"kind": "missing", "values": [0.6, 0.5]})
    with pytest.raises(ValueError):
        tiny(sweep={"kind": "layers", "values": [0]})


def test_failed_cell_recorded():
    report = ex.run_sweep(tiny(protocols=["zero"], seeds=[1], sweep={"kind": "samples", "values": [0.01]}))
    (row,) = report["rows"]
    assert row["status"] == "failed" and "StratificationError" in row["error"]
    assert report["manifest"]["failed_rows"] == 1


def test_parallel_workers_match_serial(compare_report):
    parallel = ex.run_compare_protocols(tiny(), workers=2)
    assert ex.without_timing(parallel) == ex.without_timing(compare_report)


# -- CLI -------------------------------------------------------------------

@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**TINY, "seeds": [1]}))
    return str(path)


def test_cli_compare_and_report(cfg_file, tmp_path, capsys):
    out = str(tmp_path / "cmp")
    assert main(["compare", "--config", cfg_file, "--out", out]) == 0
    first = open(os.path.join(out, "report.json"), "rb").read()
    assert {"report.json", "report.csv", "figure_rnn.csv"} <= set(os.listdir(out))
    assert main(["compare", "--config", cfg_file, "--out", out, "--format", "json"]) == 0
    second = json.loads(open(os.path.join(out, "report.json")).read())
    assert ex.without_timing(second) == ex.without_timing(json.loads(first))
    out3 = str(tmp_path / "re")
    assert main(["report", "--report", os.path.join(out, "report.json"), "--out", out3, "--format", "json"]) == 0
    current = open(os.path.join(out, "report.json"), "rb").read()
    assert open(os.path.join(out3, "report.json"), "rb").read() == current


def test_cli_seed_override(cfg_file, tmp_path):
    out = str(tmp_path / "s")
    assert main(["compare", "--config", cfg_file, "--out", out, "--seed", "4", "--seed", "5",
                 "--format", "csv"]) == 0
    assert len(open(os.path.join(out, "report.csv")).read().splitlines()) == 1 + 2 * 3


def test_cli_train_predict(cfg_file, tmp_path):
    run_dir = str(tmp_path / "run")
    assert main(["synthesize", "--config", cfg_file, "--out", str(tmp_path / "syn"), "--seed", "5"]) == 0
    stem = str(tmp_path / "syn" / "synthetic_seed5")
    assert main(["train", "--config", cfg_file, "--out", run_dir]) == 0
    assert {"manifest.json", "history.csv", "checkpoint"} <= set(os.listdir(run_dir))
    assert "prompt.json" in os.listdir(os.path.join(run_dir, "checkpoint"))
    scores = str(tmp_path / "scores.csv")
    assert main(["predict", "--run", run_dir, "--data", stem + "_data.csv", "--labels", stem + "_labels.csv",
                 "--out", scores]) == 0
    lines = open(scores).read().splitlines()
    assert lines[0] == "record_id,score" and len(lines) == 81
    json_scores = str(tmp_path / "scores2.csv")
    assert main(["predict", "--run", run_dir, "--data", stem + ".json", "--out", json_scores]) == 0
    assert open(json_scores).read() == open(scores).read()


def test_cli_gradcheck(tmp_path):
    assert main(["gradcheck", "--instances", "1", "--out", str(tmp_path)]) == 0
    results = json.loads((tmp_path / "gradcheck.json").read_text())
    assert len(results) == 12


def test_cli_exit_codes(cfg_file, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["compare", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({**TINY, "colour": "red"}))
    assert main(["compare", "--config", str(unknown), "--out", str(tmp_path / "x")]) == 1
    assert main(["sweep", "--config", cfg_file, "--out", str(tmp_path / "x")]) == 1
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["compare", "--config", cfg_file, "--out", str(blocker / "sub")]) == 3
    assert main(["compare", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 3
    failing = tmp_path / "failing.json"
    failing.write_text(json.dumps({**TINY, "protocols": ["zero"], "seeds": [1],
                                   "sweep": {"kind": "samples", "values": [0.01]}}))
    assert main(["sweep", "--config", str(failing), "--out", str(tmp_path / "f")]) == 2
