import logging

import numpy as np
import pytest
import yaml
from helpers.utils import LadderEvaluator, make_entry, pinned_evaluator, random_calibration

from fusesim.exceptions import BudgetInfeasible, TableFileError, TargetInfeasible
from fusesim.models import FreqConfig, FrequencyTable, PhaseSpec
from fusesim.profiler import evaluate
from fusesim.search import (
    FuseTable,
    SearchGoal,
    TableEntry,
    bucket_prefill_length,
    build_config_table,
    engine_evaluator,
    fuse_settings,
    is_quasi_convex,
    load_table,
    lookup_config,
    oracle_check,
    run_search,
    save_table,
    search_g1,
    search_g2,
)

LADDER = {700: (130.0, 410.0), 600: (150.0, 395.0), 500: (175.0, 388.0), 400: (210.0, 392.0)}
SMALL = FrequencyTable(cpu=(1000, 2000), gpu=(400, 500, 600, 700), mem=(1000,))
LABELS = ["prefill-32", "prefill-64", "prefill-128", "prefill-256", "prefill-512", "decode-32"]


def test_g1_stops_at_first_fit():
    evaluator = LadderEvaluator(LADDER)
    cfg, report = search_g1(evaluator, SMALL, 396.0)
    assert [e.cfg.f_gpu for e in report.step1] == [700, 600]
    assert report.candidates == (700, 600)
    assert cfg == FreqConfig(2000, 600, None)
    assert report.result.energy_per_token <= 396.0
    assert (report.inferences_step1, report.inferences_step2) == (2, 3)
    assert report.inferences == evaluator.calls


def test_g1_matches_brute_force():
    evaluator = LadderEvaluator(LADDER)
    _, report = search_g1(evaluator, SMALL, 396.0)
    check = oracle_check(evaluator, SMALL, report)
    assert check.applicable
    assert check.matches(report.goal, report.result)


def test_g1_generous_budget():
    _, report = search_g1(LadderEvaluator(LADDER), SMALL, 500.0)
    assert report.candidates == (700,)
    assert report.inferences_step1 == 1


def test_g1_infeasible_budget():
    evaluator = LadderEvaluator(LADDER)
    with pytest.raises(BudgetInfeasible):
        search_g1(evaluator, SMALL, 300.0)
    assert evaluator.calls == 4


def test_g1_lower_budget_never_lowers_latency():
    latencies = [search_g1(LadderEvaluator(LADDER), SMALL, b)[1].result.latency for b in (420.0, 400.0, 396.0, 390.0)]
    assert latencies == [130.0, 150.0, 150.0, 175.0]


def test_g2_minimum_energy_candidate():
    evaluator = LadderEvaluator(LADDER)
    cfg, report = search_g2(evaluator, SMALL, 200.0)
    assert [e.cfg.f_gpu for e in report.step1] == [700, 600, 500, 400]
    assert report.candidates == (500,)
    assert cfg == FreqConfig(1000, 500, None)
    assert report.result.energy_per_token == pytest.approx(384.0)
    check = oracle_check(evaluator, SMALL, report)
    assert check.applicable and check.matches(report.goal, report.result)


def test_g2_straddling_candidates():
    evaluator = LadderEvaluator(LADDER)
    cfg, report = search_g2(evaluator, SMALL, 160.0)
    assert report.candidates == (600, 500)
    assert cfg == FreqConfig(2000, 600, None)
    assert report.inferences_step2 == 3
    check = oracle_check(evaluator, SMALL, report)
    assert check.applicable and check.matches(report.goal, report.result)


def test_g2_infeasible_target():
    with pytest.raises(TargetInfeasible):
        search_g2(LadderEvaluator(LADDER), SMALL, 100.0)


def test_goal_validation():
    with pytest.raises(ValueError):
        SearchGoal.g1(0.0)
    with pytest.raises(ValueError):
        SearchGoal("g3", 1.0)
    assert str(SearchGoal.g2(12.5)) == "g2(12.5000 ms)"


def test_quasi_convexity():
    assert is_quasi_convex([5, 4, 3, 3, 4, 6])
    assert is_quasi_convex([1, 2, 3])
    assert not is_quasi_convex([3, 1, 2, 1])


@pytest.mark.parametrize("goal_kind", ["g1", "g2"])
def test_search_beats_default_governors(calib, goal_kind):
    phase = PhaseSpec.decode(8)
    gov = evaluate(calib, FreqConfig(None, None, None), phase)
    goal = SearchGoal.g1(gov.energy_per_token) if goal_kind == "g1" else SearchGoal.g2(gov.latency)
    _, report = run_search(engine_evaluator(calib, phase), calib.table, goal)
    assert report.inferences_step1 <= 12
    assert report.inferences_step2 <= 36
    if goal_kind == "g1":
        assert report.result.energy_per_token <= gov.energy_per_token
        assert report.result.latency < gov.latency
    else:
        assert report.result.latency <= gov.latency
        assert report.result.energy_per_token < gov.energy_per_token


def test_search_against_brute_force_on_random_calibrations(calib):
    phase = PhaseSpec.decode(1)
    searched = {"g1": 0, "g2": 0}
    for seed in range(50):
        scattered = random_calibration(calib, seed)
        evaluator = engine_evaluator(scattered, phase)
        rng = np.random.default_rng(1000 + seed)
        reference = evaluator(int(rng.choice(calib.table.cpu)), int(rng.choice(calib.table.gpu)))
        for goal in (SearchGoal.g1(reference.energy_per_token), SearchGoal.g2(reference.latency)):
            try:
                _, report = run_search(evaluator, scattered.table, goal)
            except (BudgetInfeasible, TargetInfeasible):
                continue
            searched[goal.kind] += 1
            assert report.inferences_step1 <= 12
            assert report.inferences_step2 <= 36
            check = oracle_check(evaluator, scattered.table, report)
            assert check.applicable == check.quasi_convex
            if goal.kind == "g1":
                assert report.result.energy_per_token <= goal.value
                assert check.optimum.latency <= report.result.latency
            else:
                assert report.result.latency <= goal.value
                assert check.optimum.energy_per_token <= report.result.energy_per_token
    assert searched["g1"] >= 20
    assert searched["g2"] >= 20


def test_g2_step2_stops_once_energy_rises():
    table = FrequencyTable(cpu=(500, 1000, 2000, 3000), gpu=(400, 500), mem=(1000,))
    energies = {None: 380.0, 3000: 400.0, 2000: 390.0, 1000: 395.0, 500: 399.0}

    def _evaluate(f_cpu, f_gpu):
        return make_entry(f_cpu, f_gpu, 100.0, energies[f_cpu] + (10.0 if f_gpu == 400 else 0.0))

    cfg, report = search_g2(_evaluate, table, 200.0)
    assert report.candidates == (500,)
    assert [e.cfg.f_cpu for e in report.step2] == [3000, 2000, 1000]
    assert cfg == FreqConfig(2000, 500, None)


@pytest.mark.parametrize(
    "n_p, expected",
    [(1, (0, 32)), (32, (0, 32)), (48, (0, 32)), (49, (1, 64)), (100, (2, 128)), (200, (3, 256)), (512, (4, 512))],
)
def test_bucket_prefill_length(n_p, expected):
    assert bucket_prefill_length(n_p) == expected


def test_bucket_needs_a_token():
    with pytest.raises(ValueError):
        bucket_prefill_length(0)


def _table(model="pixel7-tinyllama-like", calib_hash="abc"):
    gpus = dict(zip(LABELS, (848, 762, 701, 572, 510, 471)))
    return FuseTable(
        model,
        calib_hash,
        {label: TableEntry(FreqConfig(2850, gpu, None), SearchGoal.g1(400.0), 2, 5) for label, gpu in gpus.items()},
    )


def test_lookup_config():
    table = _table()
    assert lookup_config(table, "prefill", 200) == FreqConfig(2850, 572, None)
    assert lookup_config(table, "prefill", 1) == FreqConfig(2850, 848, None)
    assert lookup_config(table, "decode") == FreqConfig(2850, 471, None)
    with pytest.raises(ValueError):
        lookup_config(table, "prefill")


def test_table_needs_six_settings():
    with pytest.raises(TableFileError):
        FuseTable("m", "abc", {"decode-32": TableEntry(FreqConfig(2850, 471, None), SearchGoal.g1(1.0), 1, 1)})


def test_table_file_round_trip(tmp_path, calib, caplog):
    table = _table()
    path = save_table(table, tmp_path / "table.yaml")
    assert load_table(path) == table
    assert table.total_inferences == 42
    assert table.mean_inferences == pytest.approx(7.0)

    with caplog.at_level(logging.WARNING, logger="fusesim.search"):
        load_table(path, calib)
    assert calib.calib_hash in caplog.text


def test_bad_table_files(tmp_path):
    with pytest.raises(TableFileError):
        load_table(tmp_path / "missing.yaml")

    path = save_table(_table(), tmp_path / "table.yaml")
    data = yaml.safe_load(path.read_text())
    del data["entries"]["prefill-64"]
    path.write_text(yaml.safe_dump(data))
    with pytest.raises(TableFileError):
        load_table(path)

    path.write_text("entries: [unclosed\n")
    with pytest.raises(TableFileError):
        load_table(path)


def test_build_config_table(calib):
    goals = {
        label: SearchGoal.g1(pinned_evaluator(calib, phase)(None, 471).energy_per_token)
        for label, phase in fuse_settings(calib).items()
    }
    table, reports = build_config_table(calib, goals, evaluator_factory=pinned_evaluator)
    assert list(table.entries) == LABELS
    assert table.calib_hash == calib.calib_hash
    for label, entry in table.entries.items():
        calib.table.validate(entry.cfg)
        assert entry.cfg.f_mem is None
        assert entry.inferences_step1 <= 12 and entry.inferences_step2 <= 36
        assert reports[label].result.energy_per_token <= goals[label].value

    again, _ = build_config_table(calib, goals, max_workers=3, evaluator_factory=pinned_evaluator)
    assert again == table


def test_build_config_table_names_the_failing_setting(calib):
    goals = {label: SearchGoal.g1(1e-6) for label in LABELS}
    with pytest.raises(BudgetInfeasible, match="prefill-32"):
        build_config_table(calib, goals, evaluator_factory=pinned_evaluator)


def test_build_config_table_needs_every_goal(calib):
    with pytest.raises(ValueError):
        build_config_table(calib, {"decode-32": SearchGoal.g1(400.0)}, evaluator_factory=pinned_evaluator)
