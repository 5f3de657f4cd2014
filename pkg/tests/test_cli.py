import json
import os
import subprocess
import sys

import pytest

from tlscope.cli import main
from tlscope.ingest import read_jsonl


def run(*argv):
    return main([str(a) for a in argv])


def stderr_events(capsys):
    return [json.loads(line) for line in capsys.readouterr().err.splitlines() if line.startswith("{")]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert run("synth", "-n", 120, "--seed", 4, "--format", "pcap", "--out", d / "c.pcap",
               "--label-map", d / "labels.jsonl") == 0
    assert run("extract", d / "c.pcap", "--label-map", d / "labels.jsonl", "--out", d / "flows.jsonl") == 0
    return d


def test_extract_matches_synth(corpus, tmp_path):
    assert run("synth", "-n", 120, "--seed", 4, "--out", tmp_path / "direct.jsonl") == 0
    with open(corpus / "flows.jsonl") as a, open(tmp_path / "direct.jsonl") as b:
        assert read_jsonl(a) == read_jsonl(b)


def test_extract_logs_counts(corpus, capsys):
    assert run("extract", corpus / "c.pcap", "--out", os.devnull) == 0
    (event,) = stderr_events(capsys)
    assert event["flows"] == 120 and event["tls"] == 120


def test_extract_errors(tmp_path, capsys):
    bad = tmp_path / "bad.pcap"
    bad.write_bytes(b"\x00" * 40)
    assert run("extract", bad) == 2
    event = stderr_events(capsys)[-1]
    assert event["exit"] == 2 and event["error"]
    assert run("extract", tmp_path / "missing.pcap") == 1
    assert stderr_events(capsys)[-1]["exit"] == 1


def test_extract_directory_output(corpus, tmp_path):
    assert run("extract", corpus / "c.pcap", corpus / "c.pcap", "--out", tmp_path, "--jobs", 2) == 0
    assert (tmp_path / "c.jsonl").exists()
    assert run("extract", corpus / "c.pcap", corpus / "c.pcap", "--out", tmp_path / "x.jsonl") == 2


def test_train_is_reproducible(corpus, tmp_path):
    for name in ("a", "b"):
        assert run("train", corpus / "flows.jsonl", "--views", "TLS+SS", "--folds", 3, "--lambda-grid", "1e-2,1e-3",
                   "--seed", 1, "--out", tmp_path / f"{name}.json", "--report", tmp_path / f"{name}.report.json") == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    rep = json.loads((tmp_path / "a.report.json").read_text())
    assert rep["seed"] == 1 and rep["report"]["folds"]["k"] == 3


def test_train_ablation_rows(corpus, tmp_path, capsys):
    assert run("train", corpus / "flows.jsonl", "--ablate", "--folds", 3, "--lambda", "1e-2",
               "--out", tmp_path / "m.json", "--report", tmp_path / "r.json") == 0
    rows = [r["views"] for r in json.loads((tmp_path / "r.json").read_text())["ablation"]]
    assert rows == ["Meta+SPLT+BD+TLS+SS", "Meta+SPLT+BD+TLS", "TLS", "Meta+SPLT+BD"]
    out = capsys.readouterr().out
    assert all(r in out for r in rows)


@pytest.fixture(scope="module")
def model(corpus):
    path = corpus / "model.json"
    assert run("train", corpus / "flows.jsonl", "--views", "Meta+TLS", "--folds", 3, "--lambda", "1e-3", "--out", path) == 0
    return path


def test_classify_and_attribute_agree(corpus, model, tmp_path):
    assert run("classify", model, corpus / "flows.jsonl", "--out", tmp_path / "c.jsonl") == 0
    assert run("attribute", model, corpus / "flows.jsonl", "--window-secs", 1e-6, "--out", tmp_path / "a.jsonl") == 0
    per_flow = [json.loads(line) for line in (tmp_path / "c.jsonl").read_text().splitlines()]
    windows = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert len(per_flow) == 120
    singles = [w for w in windows if sum(w["votes"].values()) == 1]
    assert len(singles) > 100
    by_start = {}
    for c in per_flow:
        host, rest = c["scope"].split(":", 1)
        by_start.setdefault((host, int(rest.rsplit("@", 1)[1])), []).append(c)
    for w in singles:
        host, start = w["scope"]
        (c,) = by_start[(host, round(start * 1_000_000))]
        assert c["label"] == w["family"] and c["probs"] == pytest.approx(w["probs"], abs=1e-12)


def test_view_mismatch_is_an_error(corpus, model, capsys):
    assert run("classify", model, corpus / "flows.jsonl", "--views", "TLS") == 2
    assert "Meta+TLS" in stderr_events(capsys)[-1]["message"]


def test_report_and_fingerprint(corpus, tmp_path):
    assert run("report", corpus / "flows.jsonl", "--out", tmp_path / "r.json", "--similarity-csv", tmp_path / "s.csv") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert set(rep["labels"]) == {"enterprise", "malware"}
    assert (tmp_path / "s.csv").read_text().startswith("family,enterprise,malware")
    assert run("report", corpus / "flows.jsonl", "--format", "text", "--exclude-xp", "--out", tmp_path / "r.txt") == 0
    assert "xp config" in (tmp_path / "r.txt").read_text()
    assert run("fingerprint", corpus / "flows.jsonl", "--out", tmp_path / "f.json") == 0
    fp = json.loads((tmp_path / "f.json").read_text())
    assert len(fp["flows"]) == 120 and fp["xp_config"].startswith("xp-")


def test_config_file_supplies_defaults(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 9, "n": 7}))
    monkeypatch.setenv("TLSCOPE_CONFIG", str(cfg))
    assert run("synth", "--out", tmp_path / "a.jsonl") == 0
    monkeypatch.delenv("TLSCOPE_CONFIG")
    assert run("synth", "-n", 7, "--seed", 9, "--out", tmp_path / "b.jsonl") == 0
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()
    assert len((tmp_path / "a.jsonl").read_text().splitlines()) == 7


def test_stdin_stdout_pipeline():
    synth = subprocess.run([sys.executable, "-m", "tlscope", "synth", "-n", "5", "--format", "pcap"],
                           capture_output=True, check=True)
    ext = subprocess.run([sys.executable, "-m", "tlscope", "extract", "-"], input=synth.stdout,
                         capture_output=True, check=True)
    rep = subprocess.run([sys.executable, "-m", "tlscope", "report", "-"], input=ext.stdout,
                         capture_output=True, check=True)
    assert len(ext.stdout.splitlines()) == 5
    assert json.loads(rep.stdout)["labels"]["unlabeled"]["flows"] == 5
