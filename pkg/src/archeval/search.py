"""Regularized (aging) evolution with evaluator-predicted hardware constraints.

A candidate's utility is ``feasible * fitness``: the evaluator only decides
feasibility, the fitness proxy ranks feasible candidates. Infeasible
candidates stay in the population but lose every tournament comparison
against a feasible one.
"""
from __future__ import annotations

import collections
import json
import math
import os
import re
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .costmodel import base_accuracy, latency, load_profiles, peak_memory
from .costmodel.dataset import MB, Dataset, DatasetRecord
from .graphir import MacroConfig, NoPathError, elaborate
from .netstring import UNK
from .searchspace import ArchSpec, SpaceId, mutate, parse_arch, sample

DIRECTIONS = ("max_allowed", "min_required")
FITNESS_KINDS = ("synthetic_proxy", "evaluator_accuracy")


class SearchError(ValueError):
    pass


@dataclass(frozen=True)
class Constraint:
    metric: str
    threshold: float
    direction: str = "max_allowed"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise SearchError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        never = -math.inf if self.direction == "max_allowed" else math.inf
        if math.isnan(self.threshold) or self.threshold == never:
            raise SearchError(f"constraint on {self.metric} has unusable threshold {self.threshold}")

    def satisfied(self, value: float) -> bool:
        if self.direction == "max_allowed":
            return value <= self.threshold
        return value >= self.threshold

    def __str__(self) -> str:
        op = "<=" if self.direction == "max_allowed" else ">="
        return f"{self.metric}{op}{self.threshold!r}"


_SPEC = re.compile(r"^\s*([A-Za-z_][\w@.-]*)\s*(<=|>=)\s*(\S+)\s*$")


def parse_constraint(spec: str, dataset: Dataset | Sequence[DatasetRecord] | None = None) -> Constraint:
    """Parse ``metric<=value``, ``metric<=auto-mean`` or ``metric<=auto-median`` (``>=`` too).

    ``auto-*`` thresholds are resolved against ``dataset``.
    """
    m = _SPEC.match(spec)
    if not m:
        raise SearchError(f"cannot parse constraint {spec!r}; expected metric<=value|auto-mean|auto-median")
    metric, op, rhs = m.groups()
    direction = "max_allowed" if op == "<=" else "min_required"
    if rhs.startswith("auto-"):
        stat = rhs[len("auto-"):]
        if stat not in ("mean", "median"):
            raise SearchError(f"unknown threshold statistic {stat!r} in {spec!r}")
        if dataset is None:
            raise SearchError(f"constraint {spec!r} needs a dataset to resolve its threshold")
        return Constraint(metric, threshold_from_dataset(dataset, metric, stat), direction)
    try:
        value = float(rhs)
    except ValueError:
        raise SearchError(f"threshold {rhs!r} in {spec!r} is not a number") from None
    return Constraint(metric, value, direction)


def threshold_from_dataset(records, metric: str, statistic: str = "mean") -> float:
    records = records.records if isinstance(records, Dataset) else records
    values = [r.metrics[metric] for r in records if metric in r.metrics]
    if not values:
        raise SearchError(f"no record carries metric {metric!r}")
    if statistic == "mean":
        return float(np.mean(values))
    if statistic == "median":
        return float(statistics.median(values))
    raise SearchError(f"statistic must be 'mean' or 'median', got {statistic!r}")


@dataclass(frozen=True)
class SearchConfig:
    population_size: int = 25
    tournament_size: int = 5
    cycles: int = 500
    seed: int = 0
    space: SpaceId = SpaceId.TSS
    fitness: str = "synthetic_proxy"

    def __post_init__(self):
        object.__setattr__(self, "space", SpaceId(self.space))
        if self.cycles < 1:
            raise SearchError("cycles must be >= 1")
        if self.population_size < 1 or not 1 <= self.tournament_size <= self.population_size:
            raise SearchError("need 1 <= tournament_size <= population_size")
        if self.cycles < self.population_size:
            raise SearchError(f"cycles ({self.cycles}) must be >= population_size ({self.population_size})")
        if self.fitness not in FITNESS_KINDS:
            raise SearchError(f"fitness must be one of {FITNESS_KINDS}")

    def to_dict(self) -> dict:
        return {"population_size": self.population_size, "tournament_size": self.tournament_size,
                "cycles": self.cycles, "seed": self.seed, "space": self.space.value, "fitness": self.fitness}


@dataclass
class SearchLog:
    config: SearchConfig
    constraints: list[Constraint]
    entries: list[dict] = field(default_factory=list)
    best_trajectory: list[float | None] = field(default_factory=list)
    phase_seconds: dict[str, float] = field(default_factory=lambda: collections.defaultdict(float))
    best_index: int | None = None
    error: str | None = None

    @property
    def n_feasible(self) -> int:
        return sum(e["feasible"] for e in self.entries)

    def best_entry(self) -> dict | None:
        return None if self.best_index is None else self.entries[self.best_index]

    def to_jsonl(self, path) -> None:
        _atomic_write(path, "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries))

    def summary(self, macro: MacroConfig | None = MacroConfig()) -> dict:
        """Run summary; with a ``macro`` the best arch's noise-free oracle metrics are included."""
        best = self.best_entry()
        out = {
            "config": self.config.to_dict(),
            "constraints": [c.__dict__ for c in self.constraints],
            "cycles_run": len(self.entries),
            "feasible_entries": self.n_feasible,
            "distinct_feasible_archs": len({e["arch"] for e in self.entries if e["feasible"]}),
            "phase_seconds": dict(self.phase_seconds),
            "error": self.error,
            "best": best,
        }
        if best is not None and macro is not None:
            out["best_ground_truth"] = ground_truth(parse_arch(best["arch"]), macro)
        return out


def ground_truth(arch: ArchSpec, macro: MacroConfig = MacroConfig(), profiles=None) -> dict[str, float]:
    """Noise-free oracle metrics (accuracy %, memory MiB, latency ms per device)."""
    profiles = load_profiles() if profiles is None else profiles
    try:
        graph = elaborate(arch, macro)
    except NoPathError:
        return {"accuracy": base_accuracy(arch)}
    out = {"accuracy": base_accuracy(arch), "memory": peak_memory(graph) / MB}
    out.update({"latency@" + name: latency(graph, p) for name, p in sorted(profiles.items())})
    return out


def _atomic_write(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def constraint_filter(arch: ArchSpec, evaluator, constraints: Sequence[Constraint],
                      cache: dict | None = None) -> tuple[bool, dict[str, float], str | None]:
    """(feasible, predicted metrics, reason). No constraints means feasible without a prediction."""
    if not constraints:
        return True, {}, None
    key = str(arch)
    if cache is not None and key in cache:
        predicted = cache[key]
    else:
        try:
            predicted = evaluator.predict_one(arch)
        except NoPathError:
            predicted = None
        if cache is not None:
            cache[key] = predicted
    if predicted is None:
        return False, {}, "no_path"
    violated = [str(c) for c in constraints if not c.satisfied(predicted[c.metric])]
    return not violated, predicted, ("violates " + ", ".join(violated)) if violated else None


def _fitness_fn(kind: str, evaluator) -> Callable[[ArchSpec], float]:
    if kind == "synthetic_proxy":
        return base_accuracy
    if evaluator is None or "accuracy" not in evaluator.objectives:
        raise SearchError("fitness 'evaluator_accuracy' needs an evaluator trained on accuracy")

    def predicted_accuracy(arch):
        try:
            return evaluator.predict_one(arch)["accuracy"]
        except NoPathError:
            return -math.inf

    return predicted_accuracy


def _check_evaluator(evaluator, constraints, space: SpaceId):
    if not constraints:
        return
    if evaluator is None:
        raise SearchError("constraints given but no evaluator loaded")
    missing = sorted({c.metric for c in constraints} - set(evaluator.objectives))
    if missing:
        raise SearchError(f"evaluator predicts {evaluator.objectives}, constraints need {missing}")
    trained_on = getattr(evaluator, "space", None)
    if trained_on is not None and SpaceId(trained_on) is not SpaceId(space):
        raise SearchError(f"evaluator vocabulary was built on {SpaceId(trained_on).value} archs, "
                          f"search runs on {SpaceId(space).value}")
    # the vocab must cover the space's structural tokens, otherwise predictions run on UNKs
    probe = sample(space, np.random.default_rng(0))
    try:
        seq = evaluator.tokens([evaluator.net_string(probe)])
        if (seq == UNK).mean() > 0.05:
            raise SearchError("evaluator vocabulary does not match this search space")
    except NoPathError:
        pass


def regularized_evolution(cfg: SearchConfig, fitness_fn: Callable[[ArchSpec], float] | None = None,
                          constraints: Sequence[Constraint] = (), evaluator=None) -> tuple[ArchSpec | None, SearchLog]:
    """Aging evolution; ``cfg.cycles`` counts every evaluated candidate, initial population included.

    Returns the best feasible architecture seen, or None with ``log.error``
    set when no candidate was ever feasible.
    """
    constraints = list(constraints)
    _check_evaluator(evaluator, constraints, cfg.space)
    fitness_fn = fitness_fn or _fitness_fn(cfg.fitness, evaluator)
    log = SearchLog(cfg, constraints)
    rng = np.random.default_rng(cfg.seed)
    prediction_cache: dict = {}
    fitness_cache: dict = {}
    phases = log.phase_seconds
    best_fit = -math.inf
    best_arch = None

    def evaluate(arch: ArchSpec, cycle: int, parent: str | None) -> dict:
        nonlocal best_fit, best_arch
        t0 = time.perf_counter()
        key = str(arch)
        if key not in fitness_cache:
            fitness_cache[key] = float(fitness_fn(arch))
        fit = fitness_cache[key]
        t1 = time.perf_counter()
        feasible, predicted, reason = constraint_filter(arch, evaluator, constraints, prediction_cache)
        t2 = time.perf_counter()
        phases["fitness"] += t1 - t0
        phases["predict"] += t2 - t1
        entry = {"cycle": cycle, "arch": key, "arch_index": arch.index, "parent": parent, "fitness": fit,
                 "predicted": predicted, "feasible": feasible, "reason": reason}
        if feasible and fit > best_fit:
            best_fit, best_arch = fit, arch
            log.best_index = len(log.entries)
        log.entries.append(entry)
        log.best_trajectory.append(None if best_arch is None else best_fit)
        return entry

    start = time.perf_counter()
    population: collections.deque = collections.deque()
    for cycle in range(cfg.population_size):
        arch = sample(cfg.space, rng)
        population.append((arch, evaluate(arch, cycle, None)))
    for cycle in range(cfg.population_size, cfg.cycles):
        picks = rng.choice(len(population), size=cfg.tournament_size, replace=False)
        contenders = [population[i] for i in picks]
        # feasible beats infeasible, then higher fitness; first drawn wins ties
        parent = max(contenders, key=lambda m: (m[1]["feasible"], m[1]["fitness"]))[0]
        child = mutate(parent, rng)
        population.append((child, evaluate(child, cycle, str(parent))))
        population.popleft()
    phases["total"] = time.perf_counter() - start
    phases["evolution"] = phases["total"] - phases["fitness"] - phases["predict"]
    if best_arch is None:
        log.error = f"no feasible architecture found in {cfg.cycles} cycles"
    return best_arch, log
