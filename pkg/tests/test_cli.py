import csv
import io
import json
import math

import pytest

from progap.cli import bootstrap_ci, load_schema, main, validate


def _config(tmp_path, **over):
    cfg = {
        "schema_version": 1,
        "dataset": {"sbm": {"num_nodes": 300, "num_classes": 3, "intra_p": 0.06,
                            "inter_p": 0.005, "feature_dim": 6, "seed": 1}},
        "model": {"depth": 1, "hidden_dim": 8},
        "privacy": {"level": "edge", "epsilon": 2.0},
        "train": {"epochs": 5},
        "seeds": [0],
    }
    for k, v in over.items():
        cfg[k] = v
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_missing_config_is_usage_error(capsys, tmp_path):
    missing = tmp_path / "nope.json"
    code, _, err = _run(capsys, "train", missing)
    assert code == 2
    assert str(missing) in err


def test_invalid_config_is_usage_error(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"schema_version": 1, "dataset": {}}))
    code, _, err = _run(capsys, "train", path)
    assert code == 2 and "invalid config" in err


def test_account_edge(capsys):
    code, out, _ = _run(capsys, "account", "--level", "edge", "-K", 1, "--sigma", 1, "--delta", 1e-5)
    assert code == 0
    rep = json.loads(out)
    validate(rep, "report")
    assert {"epsilon", "alpha_star", "delta"} <= set(rep)
    assert rep["epsilon"] == pytest.approx(5.2985, abs=1e-4)


def test_account_node_trivial(capsys):
    code, out, _ = _run(capsys, "account", "--level", "node", "-K", 0, "--delta", 1e-5,
                        "-D", 3, "-T", 0, "-B", 10, "-N", 100)
    assert code == 0
    assert json.loads(out)["epsilon"] == 0.0


def test_account_node_missing_flags(capsys):
    code, _, err = _run(capsys, "account", "--level", "node", "-K", 1, "--sigma", 1, "--delta", 1e-5)
    assert code == 2 and "--max-degree" in err


def test_calibrate_roundtrip(capsys):
    code, out, _ = _run(capsys, "calibrate", "--level", "edge", "-K", 3, "--delta", 1e-5, "--epsilon", 1)
    assert code == 0
    res = json.loads(out)
    validate(res, "calibration")
    assert 0.9999 <= res["epsilon"] <= 1.0
    code, out, _ = _run(capsys, "account", "--level", "edge", "-K", 3, "--delta", 1e-5,
                        "--sigma", res["sigma_ap"])
    assert 0.9999 <= json.loads(out)["epsilon"] <= 1.0


def test_calibrate_infinite(capsys):
    code, out, _ = _run(capsys, "calibrate", "--level", "edge", "-K", 2, "--delta", 1e-5, "--epsilon", "inf")
    assert code == 0
    assert json.loads(out)["sigma_ap"] == 0.0


def test_calibrate_unreachable(capsys):
    code, out, err = _run(capsys, "calibrate", "--level", "node", "-K", 2, "--delta", 1e-5,
                          "--epsilon", 0.001, "-D", 4, "-T", 1000000, "-B", 50, "-N", 100)
    assert code == 1
    assert json.loads(out)["achievable_epsilon"] > 0.001
    assert "unreachable" in err


def test_generate(capsys, tmp_path):
    code, out, _ = _run(capsys, "generate", "--num-nodes", 50, "--num-classes", 2, "--intra-p", 0.2,
                        "--inter-p", 0.05, "--out", tmp_path / "g")
    assert code == 0
    info = json.loads(out)
    assert (tmp_path / "g" / "edges.tsv").exists()
    cfg = {"schema_version": 1,
           "dataset": {"files": {"edges": "g/edges.tsv", "features": "g/features.csv",
                                 "labels": "g/labels.txt"}},
           "model": {"depth": 1}, "privacy": {"epsilon": "inf"}, "train": {"epochs": 2}}
    path = tmp_path / "files.json"
    path.write_text(json.dumps(cfg))
    code, out, _ = _run(capsys, "train", path)
    assert code == 0
    assert info["num_nodes"] == 50


def test_train_ten_seeds_aggregate(capsys, tmp_path):
    path = _config(tmp_path, seeds=list(range(10)))
    code, out, _ = _run(capsys, "train", path, "--out", tmp_path / "run")
    assert code == 0
    agg = json.loads((tmp_path / "run" / "aggregate.json").read_text())
    validate(agg, "aggregate")
    assert agg["ci_low"] <= agg["mean"] <= agg["ci_high"]
    assert agg["n_bootstrap"] == 1000
    assert len(agg["test_accs"]) == 10
    for s in range(10):
        summary = json.loads((tmp_path / "run" / f"seed_{s}" / "summary.json").read_text())
        validate(summary, "summary")
        assert summary["nap_calls"] == 1
        lines = (tmp_path / "run" / f"seed_{s}" / "metrics.jsonl").read_text().splitlines()
        for line in lines[:3]:
            validate(json.loads(line), "metrics")


def test_non_private_reports_null_epsilon(capsys, tmp_path):
    path = _config(tmp_path, privacy={"level": "edge", "epsilon": "inf"})
    code, _, _ = _run(capsys, "train", path, "--out", tmp_path / "np")
    assert code == 0
    summary = json.loads((tmp_path / "np" / "seed_0" / "summary.json").read_text())
    assert summary["epsilon"] is None
    assert summary["level"] == "none"


def test_sweep_rows(capsys, tmp_path):
    path = _config(tmp_path, epsilons=[0.25, 0.5, 1, 2, 4])
    code, out, _ = _run(capsys, "sweep", path, "--out", tmp_path / "sw")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["epsilon"] for r in rows] == ["0.25", "0.5", "1.0", "2.0", "4.0"]
    assert set(rows[0]) == {"epsilon", "mean_acc", "ci_low", "ci_high", "monotone_ok"}
    assert (tmp_path / "sw" / "sweep.csv").read_text() == out


def test_sweep_infinite_row_matches_train(capsys, tmp_path):
    path = _config(tmp_path, epsilons=["inf"])
    _run(capsys, "sweep", path)
    _, out, _ = _run(capsys, "sweep", path)
    row = next(csv.DictReader(io.StringIO(out)))
    code, out, _ = _run(capsys, "train", path, "--epsilon", "inf")
    assert float(row["mean_acc"]) == json.loads(out)["mean"]


def test_bootstrap_ci_is_seeded():
    vals = [0.5, 0.6, 0.7, 0.65]
    assert bootstrap_ci(vals) == bootstrap_ci(vals)
    lo, hi = bootstrap_ci(vals)
    assert min(vals) <= lo <= hi <= max(vals)
    assert bootstrap_ci([0.3] * 5) == (0.3, 0.3)


def test_schemas_are_valid_documents():
    import jsonschema

    for name in ("config", "summary", "aggregate", "report", "calibration", "metrics"):
        jsonschema.Draft202012Validator.check_schema(load_schema(name))


def test_epsilon_inf_in_report_serializes_as_null():
    from progap.privacy import PrivacySpec, account

    data = account(PrivacySpec("none")).to_dict()
    assert data["epsilon"] is None
    assert not math.isnan(json.loads(json.dumps(data))["delta"])
