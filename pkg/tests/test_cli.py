import json

import pandas as pd
import pytest

from fusesim.calibration import save_calibration
from fusesim.cli import EXIT_FILE, EXIT_INFEASIBLE, EXIT_OK, EXIT_SIMULATION, EXIT_USAGE, MANIFEST, RunManifest, main
from fusesim.models import FreqConfig
from fusesim.replay import REPORT_COLUMNS, ReplayReport, RequestResult
from fusesim.search import FuseTable, SearchGoal, TableEntry, load_table, save_table

PINNED = ["--pin-cpu", "2850", "--pin-gpu", "848", "--pin-mem", "3172"]
LABELS = ["prefill-32", "prefill-64", "prefill-128", "prefill-256", "prefill-512", "decode-32"]


def test_simulate_writes_trace_and_manifest(tmp_path, calib):
    out = tmp_path / "run"
    assert main(["simulate", "--nd", "4", "--out", str(out), "--calib", _packaged(tmp_path, calib), *PINNED]) == EXIT_OK
    trace = pd.read_csv(out / "trace.csv")
    assert trace["tokens_done"].iloc[-1] == 4
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["governors"] == "cpu=pin(2850) gpu=pin(848) mem=pin(3172)"

    manifest = RunManifest.load(out / MANIFEST)
    assert manifest.command == "simulate"
    assert manifest.artifacts == ["trace.csv", "metrics.json"]
    assert manifest.calib_hash == calib.calib_hash


def test_rerun_reproduces_outputs(tmp_path, calib):
    first, second = tmp_path / "first", tmp_path / "second"
    calib_path = _packaged(tmp_path, calib)
    assert main(["simulate", "--nd", "2", "--out", str(first), "--calib", calib_path]) == EXIT_OK
    assert main(["rerun", str(first / MANIFEST), "--out", str(second)]) == EXIT_OK
    assert (first / "trace.csv").read_bytes() == (second / "trace.csv").read_bytes()


def test_usage_errors(tmp_path):
    assert main(["simulate", "--nd", "2", "--pin-gpu", "999", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["simulate", "--bogus"]) == EXIT_USAGE
    assert main(["simulate", "--pin-gpu", "fast"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert main(["simulate", "--calib", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == EXIT_USAGE


def test_sweep_command(tmp_path):
    args = ["sweep", "--nd", "1", "--cpu", "2850", "--gpu", "848,762", "--mem", "3172", "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    profiles = pd.read_csv(tmp_path / "profiles.csv")
    assert len(profiles) == 2
    assert (tmp_path / "pareto.csv").is_file()


def test_search_command(tmp_path):
    out = tmp_path / "ok"
    assert main(["search", "--nd", "2", "--goal", "g1", "--budget-mj", "100000", "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "search.json").read_text())
    assert summary["cfg"]["f_gpu"] == 848
    assert summary["inferences_step1"] == 1

    out = tmp_path / "infeasible"
    assert main(["search", "--nd", "2", "--goal", "g1", "--budget-mj", "0.001", "--out", str(out)]) == EXIT_INFEASIBLE


def test_stall_is_a_simulation_error(tmp_path, calib):
    doc = calib.to_document().model_dump(mode="json")
    doc["engine"]["stall_limit_ms"] = 1.0
    path = tmp_path / "stalling.yaml"
    path.write_text(json.dumps(doc))
    args = ["simulate", "--nd", "1", "--calib", str(path), "--out", str(tmp_path / "run"), *PINNED]
    assert main(args) == EXIT_SIMULATION


def test_spiral_and_isolate_commands(tmp_path):
    assert main(["spiral", "--nd", "2", "--out", str(tmp_path / "spiral")]) == EXIT_OK
    assert (tmp_path / "spiral" / "trace.csv").is_file()

    args = ["isolate", "--component", "gpu", "--nd", "2", "--out", str(tmp_path / "isolate")]
    assert main(args) == EXIT_OK
    isolation = pd.read_csv(tmp_path / "isolate" / "isolation.csv")
    assert len(isolation) == 13


def test_replay_with_missing_request_file(tmp_path):
    args = ["replay", "--requests", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path)]
    assert main(args) == EXIT_FILE


def test_replay_gov_only(tmp_path):
    requests = tmp_path / "requests.jsonl"
    requests.write_text('{"id": "a", "prefill_tokens": 8, "decode_tokens": 2}\n')
    out = tmp_path / "run"
    assert main(["replay", "--requests", str(requests), "--policy", "gov", "--out", str(out)]) == EXIT_OK
    assert list(pd.read_csv(out / "gov.csv").columns) == REPORT_COLUMNS
    assert json.loads((out / "gov-summary.json").read_text())["requests"] == 1


def test_report_self_comparison(tmp_path):
    report = ReplayReport("gov", "abc", [RequestResult("a", 8, 3, 100.0, 20.0, 140.0, 5.0, 7.0)])
    path = report.to_csv(tmp_path / "gov.csv")
    out = tmp_path / "report"
    assert main(["report", "--base", str(path), "--other", str(path), "--out", str(out)]) == EXIT_OK
    comparison = pd.read_csv(out / "comparison.csv")
    assert comparison["ratio"].tolist() == pytest.approx([1.0] * 4)

    assert main(["report", "--out", str(out)]) == EXIT_USAGE


def _packaged(tmp_path, calib):
    return str(save_calibration(calib, tmp_path / "calib.yaml"))


def test_replay_both_policies_with_a_table(tmp_path, calib):
    entry = TableEntry(FreqConfig(2850, 848, None), SearchGoal.g1(1000.0), 1, 1)
    table = save_table(FuseTable(calib.model, calib.calib_hash, dict.fromkeys(LABELS, entry)), tmp_path / "t.yaml")
    requests = tmp_path / "requests.jsonl"
    requests.write_text('{"id": "a", "prefill_tokens": 8, "decode_tokens": 2}\n')
    out = tmp_path / "run"
    args = ["replay", "--requests", str(requests), "--table", str(table), "--policy", "both", "--out", str(out)]
    assert main(args) == EXIT_OK
    fuse = json.loads((out / "fuse-g1-summary.json").read_text())
    assert fuse["normalized_to"] == "gov"
    assert fuse["ratios"]["tpot"] < 1.0
    assert RunManifest.load(out / MANIFEST).artifacts == ["gov.csv", "gov-summary.json", "fuse-g1.csv", "fuse-g1-summary.json"]


@pytest.mark.slow
def test_table_command(tmp_path):
    out = tmp_path / "table"
    assert main(["table", "--goal", "g2", "--workers", "2", "--out", str(out)]) == EXIT_OK
    assert list(load_table(out / "table.yaml").entries) == LABELS
    settings = pd.read_csv(out / "settings.csv")
    assert len(settings) == 6
    assert (settings["inferences_step1"] <= 12).all()


def test_manifest_paths_survive_a_directory_change(tmp_path, calib, monkeypatch):
    first = tmp_path / "first"
    first.mkdir()
    save_calibration(calib, first / "calib.yaml")
    monkeypatch.chdir(first)
    assert main(["simulate", "--nd", "2", "--calib", "calib.yaml", "--out", "run", *PINNED]) == EXIT_OK
    manifest = RunManifest.load(first / "run" / MANIFEST)
    assert str((first / "calib.yaml").resolve()) in manifest.argv
    assert manifest.arguments["out"] == str((first / "run").resolve())

    elsewhere = tmp_path / "elsewhere"
    elsewhere.mkdir()
    monkeypatch.chdir(elsewhere)
    assert main(["rerun", str(first / "run" / MANIFEST), "--out", "again"]) == EXIT_OK
    assert (first / "run" / "trace.csv").read_bytes() == (elsewhere / "again" / "trace.csv").read_bytes()
