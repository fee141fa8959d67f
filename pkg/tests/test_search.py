import json
import math

import numpy as np
import pytest

from archeval.costmodel import DatasetRecord
from archeval.search import (
    Constraint,
    SearchConfig,
    SearchError,
    constraint_filter,
    parse_constraint,
    regularized_evolution,
    threshold_from_dataset,
)
from archeval.searchspace import decode, parse_arch


def _records(metric, values):
    return [DatasetRecord("tss", i, None, {metric: float(v)}) for i, v in enumerate(values)]


def test_threshold_examples():
    assert threshold_from_dataset(_records("memory", [100, 200, 300]), "memory") == 200
    assert threshold_from_dataset(_records("memory", [1, 2, 100]), "memory", "median") == 2
    with pytest.raises(SearchError):
        threshold_from_dataset(_records("memory", [1]), "latency")
    with pytest.raises(SearchError):
        threshold_from_dataset(_records("memory", [1]), "memory", "mode")


def test_parse_constraint(small_dataset):
    c = parse_constraint("memory<=auto-mean", small_dataset)
    assert c.threshold == pytest.approx(small_dataset.column("memory").mean())
    assert c.direction == "max_allowed"
    c = parse_constraint(" latency >= 2.5 ")
    assert (c.metric, c.threshold, c.direction) == ("latency", 2.5, "min_required")
    assert parse_constraint("latency@edgetpu<=auto-median", small_dataset).threshold == pytest.approx(
        float(np.median(small_dataset.column("latency@edgetpu"))))
    for bad in ("memory<", "memory<=abc", "memory==3", "memory<=auto-max"):
        with pytest.raises(SearchError):
            parse_constraint(bad, small_dataset)
    with pytest.raises(SearchError, match="needs a dataset"):
        parse_constraint("memory<=auto-mean")
    with pytest.raises(SearchError):
        Constraint("memory", math.nan)
    with pytest.raises(SearchError):
        Constraint("memory", 1.0, "exactly")


def test_config_validation():
    with pytest.raises(SearchError):
        SearchConfig(cycles=0)
    with pytest.raises(SearchError):
        SearchConfig(population_size=5, tournament_size=6, cycles=10)
    with pytest.raises(SearchError):
        SearchConfig(population_size=25, cycles=10)
    with pytest.raises(SearchError):
        SearchConfig(fitness="zero_cost")


def test_unconstrained_deterministic():
    cfg = SearchConfig(cycles=300, seed=4)
    best_a, log_a = regularized_evolution(cfg)
    best_b, log_b = regularized_evolution(cfg)
    assert best_a == best_b
    assert [e["arch"] for e in log_a.entries] == [e["arch"] for e in log_b.entries]
    assert len(log_a.entries) == 300 and log_a.error is None
    assert log_a.best_entry()["arch"] == str(best_a)


def test_log_invariants():
    cfg = SearchConfig(population_size=10, tournament_size=3, cycles=200, seed=1)
    _, log = regularized_evolution(cfg)
    traj = [t for t in log.best_trajectory if t is not None]
    assert all(b >= a for a, b in zip(traj, traj[1:]))
    # aging window: each parent was born within the last population_size cycles
    for e in log.entries[cfg.population_size:]:
        window = {w["arch"] for w in log.entries[e["cycle"] - cfg.population_size:e["cycle"]]}
        assert e["parent"] in window
    assert [e["cycle"] for e in log.entries] == list(range(200))


def test_constraint_filter_basics(small_evaluator):
    ev = small_evaluator.evaluator
    arch = parse_arch("tss/125")
    assert constraint_filter(arch, None, []) == (True, {}, None)
    feasible, pred, reason = constraint_filter(arch, ev, [Constraint("memory", math.inf)])
    assert feasible and reason is None and set(pred) == set(ev.objectives)
    feasible, pred, reason = constraint_filter(parse_arch("tss/0"), ev, [Constraint("memory", 10.0)])
    assert not feasible and reason == "no_path"


def test_infinite_threshold_always_feasible(small_dataset, small_evaluator):
    ev = small_evaluator.evaluator
    c = [Constraint("memory", math.inf)]
    assert all(constraint_filter(decode("tss", r.arch_index), ev, c)[0] for r in small_dataset.records[:50])


def test_threshold_below_minimum_never_feasible(small_dataset, small_evaluator):
    ev = small_evaluator.evaluator
    c = [Constraint("memory", small_dataset.column("memory").min() - 1)]
    assert not any(constraint_filter(decode("tss", r.arch_index), ev, c)[0] for r in small_dataset.records)


def test_feasible_flags_are_honest(small_dataset, small_evaluator):
    ev = small_evaluator.evaluator
    c = parse_constraint("memory<=auto-mean", small_dataset)
    best, log = regularized_evolution(SearchConfig(cycles=300, seed=2), constraints=[c], evaluator=ev)
    feasible = [e for e in log.entries if e["feasible"]]
    assert feasible and best is not None
    for e in feasible:
        assert ev.predict_one(e["arch"])["memory"] <= c.threshold
    for e in log.entries:
        if not e["feasible"]:
            assert e["reason"]
    assert log.best_entry()["feasible"]


def test_constraint_layer_is_pure_filter(small_dataset, small_evaluator):
    ev = small_evaluator.evaluator
    cfg = SearchConfig(population_size=10, tournament_size=3, cycles=200, seed=5)
    _, free = regularized_evolution(cfg)
    # an always-satisfied constraint changes nothing
    _, loose = regularized_evolution(cfg, constraints=[Constraint("latency", math.inf)], evaluator=ev)
    assert [e["arch"] for e in loose.entries] == [e["arch"] for e in free.entries]
    # a binding constraint can only diverge after an infeasible member entered the population
    c = parse_constraint("latency<=auto-median", small_dataset)
    _, tight = regularized_evolution(cfg, constraints=[c], evaluator=ev)
    archs_free = [e["arch"] for e in free.entries]
    archs_tight = [e["arch"] for e in tight.entries]
    diverged = next((i for i, (a, b) in enumerate(zip(archs_free, archs_tight)) if a != b), None)
    assert diverged is not None
    assert diverged >= cfg.population_size
    window = tight.entries[diverged - cfg.population_size:diverged]
    assert not all(e["feasible"] for e in window)


def test_no_feasible_reports_error(small_evaluator):
    ev = small_evaluator.evaluator
    best, log = regularized_evolution(SearchConfig(cycles=60, seed=0),
                                      constraints=[Constraint("memory", -1.0)], evaluator=ev)
    assert best is None and log.error and "no feasible" in log.error
    # all-infeasible tournaments still produce children
    assert len(log.entries) == 60 and log.n_feasible == 0
    assert log.summary()["best"] is None


def test_evaluator_mismatch(small_evaluator):
    ev = small_evaluator.evaluator
    with pytest.raises(SearchError, match="no evaluator"):
        regularized_evolution(SearchConfig(cycles=30), constraints=[Constraint("memory", 1.0)])
    with pytest.raises(SearchError, match="constraints need"):
        regularized_evolution(SearchConfig(cycles=30), constraints=[Constraint("latency@edgetpu", 1.0)],
                              evaluator=ev)
    with pytest.raises(SearchError, match="vocabulary"):
        regularized_evolution(SearchConfig(cycles=30, space="sss"), constraints=[Constraint("memory", 1.0)],
                              evaluator=ev)


def test_log_serialization(tmp_path, small_dataset, small_evaluator):
    c = parse_constraint("memory<=auto-mean", small_dataset)
    _, log = regularized_evolution(SearchConfig(cycles=50, seed=3), constraints=[c],
                                   evaluator=small_evaluator.evaluator)
    path = tmp_path / "log.jsonl"
    log.to_jsonl(path)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(lines) == 50
    assert {"cycle", "arch_index", "fitness", "predicted", "feasible"} <= set(lines[0])
    summary = log.summary()
    assert summary["cycles_run"] == 50
    assert set(summary["phase_seconds"]) >= {"fitness", "predict", "evolution", "total"}
    truth = summary["best_ground_truth"]
    assert {"accuracy", "memory", "latency@edgetpu"} <= set(truth)
    json.dumps(summary)


def test_evaluator_accuracy_fitness(small_evaluator):
    ev = small_evaluator.evaluator
    best, log = regularized_evolution(SearchConfig(cycles=40, fitness="evaluator_accuracy"), evaluator=ev)
    assert best is not None
    assert log.best_entry()["fitness"] == pytest.approx(ev.predict_one(best)["accuracy"])
    with pytest.raises(SearchError):
        regularized_evolution(SearchConfig(cycles=40, fitness="evaluator_accuracy"))
