import csv
import io
import json
import re

import pytest

from shifteq import cli


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(doc if isinstance(doc, str) else json.dumps(doc))
    return str(p)


def strip_timestamp(text):
    doc = json.loads(text)
    doc["env"].pop("timestamp")
    return doc


def test_proof_suites_exit_zero(tmp_path, capsys):
    cfg = write(tmp_path, {"model": {"variant": "vit_poly"},
                           "suites": ["lemma1", "lemma2", "lemma3", "lemma4"]})
    out = tmp_path / "r.json"
    assert cli.main(["audit", "--config", cfg, "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["exit_code"] == 0
    assert all(v["ok"] for v in doc["summary"].values())
    assert "lemma3" in capsys.readouterr().out


@pytest.mark.parametrize("doc", [
    {"suites": ["lemma7"]},
    {"suites": []},
    {"colour": "red"},
    {"model": {"variant": "resnet"}},
    {"model": {"heads": 2}},
    {"sampler": {"mode": "sobol"}},
    {"sampler": {"range": [[-40, 40], [0, 0]]}},
    {"output": {"format": "xml"}},
    {"tolerances": {"lemma1": -1}},
    {"tolerances": {"lemma8": 1}},
    {"inputs": 0},
    "{not json",
    "[1, 2]",
])
def test_bad_config_exits_two(tmp_path, capsys, doc):
    assert cli.main(["audit", "--config", write(tmp_path, doc)]) == 2
    assert "error:" in capsys.readouterr().err


def test_missing_config_exits_two(tmp_path):
    assert cli.main(["audit", "--config", str(tmp_path / "nope.json")]) == 2


def test_zero_tolerance_on_float_suite_exits_one(tmp_path):
    cfg = write(tmp_path, {"suites": ["invariance"], "tolerances": {"invariance": 0}, "inputs": 2})
    assert cli.main(["audit", "--config", cfg]) == 1


def test_counterexample_suite_passes_as_expected_failure(tmp_path):
    cfg = write(tmp_path, {"suites": ["relpe_counterexample", "negative_gsa"], "trials": 5})
    out = tmp_path / "r.json"
    assert cli.main(["audit", "--config", cfg, "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["summary"]["relpe_counterexample"] == {"ok": True, "expect_equivariant": False}
    assert doc["reports"][0]["metrics"]["trials_failed"] == 5


def test_baseline_model_suites_are_expected_failures(tmp_path):
    cfg = write(tmp_path, {"model": {"variant": "vit"}, "suites": ["invariance"], "inputs": 4})
    out = tmp_path / "r.json"
    cli.main(["audit", "--config", cfg, "--out", str(out)])
    doc = json.loads(out.read_text())
    assert doc["summary"]["invariance"]["expect_equivariant"] is False


def test_reports_are_deterministic(tmp_path):
    cfg = write(tmp_path, {"suites": ["lemma2", "invariance", "worst_of_n"], "trials": 3, "inputs": 3,
                           "sampler": {"count": 4}})
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert cli.main(["audit", "--config", cfg, "--out", str(a)]) == 0
    assert cli.main(["audit", "--config", cfg, "--out", str(b)]) == 0
    assert strip_timestamp(a.read_text()) == strip_timestamp(b.read_text())


def test_env_seed_is_used(tmp_path, monkeypatch):
    cfg = write(tmp_path, {"suites": ["lemma1"], "trials": 2})
    out = tmp_path / "r.json"
    monkeypatch.setenv("SHIFTEQ_SEED", "17")
    cli.main(["audit", "--config", cfg, "--out", str(out)])
    assert json.loads(out.read_text())["config"]["seed"] == 17
    monkeypatch.setenv("SHIFTEQ_SEED", "x")
    assert cli.main(["audit", "--config", cfg]) == 2


def test_csv_output(tmp_path):
    cfg = write(tmp_path, {"suites": ["lemma1"], "trials": 2, "output": {"format": "csv"}})
    out = tmp_path / "r.csv"
    assert cli.main(["audit", "--config", cfg, "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert len(rows) == 2 * 64
    assert {r["suite"] for r in rows} == {"lemma1"}


def residuals(text):
    return [float(v) for v in re.findall(r"max \|logits residual\| = (\S+)", text)]


def test_demo_zero_shift(capsys):
    assert cli.main(["demo", "--variant", "vit", "--seed", "0", "--shift", "0", "0"]) == 0
    assert residuals(capsys.readouterr().out) == [0.0, 0.0]


def test_demo_reports_baseline_gap(capsys):
    assert cli.main(["demo", "--variant", "twins_poly", "--seed", "3", "--shift", "5", "-2"]) == 0
    base, poly = residuals(capsys.readouterr().out)
    assert base > 0 and poly <= 1e-9


def test_demo_bad_variant():
    assert cli.main(["demo", "--variant", "resnet"]) == 2


def test_bench_rows_and_budget(capsys):
    assert cli.main(["bench", "--sizes", "8"]) == 0
    table = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
    assert len(table) == 2
    rows = cli.bench_rows([32, 64])
    assert rows[1]["anchor"] < 0.1
    ratio = rows[1]["anchor"] / rows[0]["anchor"]
    assert 2.0 <= ratio <= 6.0


def test_bench_bad_sizes():
    assert cli.main(["bench", "--sizes", "7"]) == 2


def test_parser_errors_exit_two():
    assert cli.main([]) == 2
    assert cli.main(["audit"]) == 2
