"""Architecture/metric datasets: oracle generation, JSONL persistence, CSV ingestion."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..graphir import MacroConfig, NoPathError, elaborate, live_edges
from ..netstring import graph_to_string
from ..searchspace import SpaceId, TssArch, decode, space_size, tss_decode
from . import oracles
from .profiles import DeviceProfile

DATASET_SCHEMA = "archeval.dataset"
DATASET_VERSION = 1
BASE_METRICS = ("accuracy", "latency", "memory")
SOURCES = ("oracle", "ingested")
DEFAULT_LATENCY_DEVICE = "edgegpu"
MB = 2 ** 20


class DatasetError(ValueError):
    pass


def is_metric_name(name: str) -> bool:
    """``accuracy``, ``memory``, ``latency`` or a device-qualified ``latency@<device>``."""
    base, _, device = name.partition("@")
    if base not in BASE_METRICS:
        return False
    return not device or (base == "latency" and device.isidentifier())


@dataclass
class DatasetRecord:
    space: SpaceId
    arch_index: int
    string_hash: str | None
    metrics: dict[str, float]
    source: str = "oracle"
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.space = SpaceId(self.space)
        if not self.metrics:
            raise DatasetError(f"record {self.space.value}/{self.arch_index} has no metrics")
        bad = [m for m in self.metrics if not is_metric_name(m)]
        if bad:
            raise DatasetError(f"unknown metric names {bad}; allowed: {BASE_METRICS} or latency@<device>")
        if self.source not in SOURCES:
            raise DatasetError(f"source must be one of {SOURCES}, got {self.source!r}")

    @property
    def arch_id(self) -> str:
        return f"{self.space.value}/{self.arch_index}"

    def to_dict(self) -> dict:
        return {"space": self.space.value, "arch_index": self.arch_index,
                "string_hash": self.string_hash, "metrics": self.metrics,
                "source": self.source, "flags": self.flags}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetRecord":
        return cls(d["space"], int(d["arch_index"]), d.get("string_hash"),
                   {k: float(v) for k, v in d["metrics"].items()},
                   d.get("source", "oracle"), list(d.get("flags", [])))


@dataclass
class Dataset:
    records: list[DatasetRecord]
    header: dict

    @property
    def space(self) -> SpaceId:
        return SpaceId(self.header["space"])

    @property
    def metric_names(self) -> list[str]:
        return list(self.header["metrics"])

    @property
    def macro_config(self) -> MacroConfig:
        return MacroConfig.from_dict(self.header.get("oracle_config", {}).get("macro", {}))

    def __len__(self) -> int:
        return len(self.records)

    def column(self, metric: str) -> np.ndarray:
        if metric not in self.metric_names:
            raise DatasetError(f"metric {metric!r} not in dataset; available: {self.metric_names}")
        return np.array([r.metrics[metric] for r in self.records], dtype=float)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.records[i] for i in indices], dict(self.header))


def string_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def config_digest(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def is_valid_index(space: SpaceId | str, index: int) -> bool:
    """False for TSS cells whose output is unreachable (elaboration would fail)."""
    if SpaceId(space) is SpaceId.SSS:
        return 0 <= index < space_size(space)
    return any(live_edges(tss_decode(index)))


def sample_valid_indices(space: SpaceId | str, n: int, rng: np.random.Generator) -> list[int]:
    """``n`` distinct indices drawn uniformly from the architectures that elaborate."""
    valid = np.array([i for i in range(space_size(space)) if is_valid_index(space, i)]) \
        if SpaceId(space) is SpaceId.TSS else np.arange(space_size(space))
    if not 0 <= n <= len(valid):
        raise DatasetError(f"cannot draw {n} distinct architectures; {len(valid)} are valid in {SpaceId(space).value}")
    return [int(i) for i in rng.choice(valid, size=n, replace=False)]


def _stream(seed: int, arch_index: int, name: str) -> np.random.Generator:
    # per-arch, per-metric streams: results do not depend on sample order
    ss = np.random.SeedSequence(seed, spawn_key=(arch_index, zlib.crc32(name.encode())))
    return np.random.default_rng(ss)


def oracle_config(profiles: Mapping[str, DeviceProfile], *, latency_device: str,
                  latency_noise: float | None, accuracy_noise: float, macro: MacroConfig) -> dict:
    return {
        "macro": macro.to_dict(),
        "profiles": {name: p.to_dict() for name, p in sorted(profiles.items())},
        "latency_device": latency_device,
        "latency_noise": latency_noise,
        "accuracy_noise": accuracy_noise,
        "accuracy_weights": {
            "tss_bias": oracles.TSS_ACCURACY_BIAS,
            "tss": {k.label: v for k, v in oracles.TSS_ACCURACY_WEIGHTS.items()},
            "sss_bias": oracles.SSS_ACCURACY_BIAS,
            "sss": oracles.SSS_ACCURACY_WEIGHT,
        },
        "bytes_per_element": oracles.BYTES_PER_ELEMENT,
    }


def cost_report(arch, profiles: Mapping[str, DeviceProfile], seed: int | None = None,
                macro: MacroConfig = MacroConfig(), accuracy_noise: float = oracles.ACCURACY_NOISE_SD):
    graph = elaborate(arch, macro)
    idx = arch.index
    lat = {
        name: oracles.latency(graph, p, None if seed is None else _stream(seed, idx, "latency@" + name))
        for name, p in profiles.items()
    }
    acc_rng = None if seed is None else _stream(seed, idx, "accuracy")
    return oracles.CostReport(
        flops=oracles.flops(graph),
        params=graph.param_count,
        peak_mem_bytes=oracles.peak_memory(graph),
        latency_ms=lat,
        accuracy_pct=oracles.synthetic_accuracy(arch, acc_rng, accuracy_noise),
    )


def build_dataset(space: SpaceId | str, sample_indices: Iterable[int],
                  profiles: Mapping[str, DeviceProfile], seed: int, *,
                  latency_device: str = DEFAULT_LATENCY_DEVICE, latency_noise: float | None = None,
                  accuracy_noise: float = oracles.ACCURACY_NOISE_SD,
                  macro: MacroConfig = MacroConfig()) -> Dataset:
    """Oracle metrics for each index.

    Metrics per record: ``accuracy`` (percent), ``memory`` (peak MiB),
    ``latency`` (ms on ``latency_device``, with ``latency_noise`` overriding the
    device's own noise level) and ``latency@<device>`` for every profile.
    """
    space = SpaceId(space)
    if latency_device not in profiles:
        raise DatasetError(f"latency device {latency_device!r} not among profiles {sorted(profiles)}")
    indices = list(sample_indices)
    if len(set(indices)) != len(indices):
        raise DatasetError("duplicate arch_index in sample")
    records = []
    for idx in indices:
        arch = decode(space, idx)
        graph = elaborate(arch, macro)
        metrics = {
            "accuracy": oracles.synthetic_accuracy(arch, _stream(seed, idx, "accuracy"), accuracy_noise),
            "memory": oracles.peak_memory(graph) / MB,
            "latency": oracles.latency(graph, profiles[latency_device], _stream(seed, idx, "latency"),
                                       noise_sigma=latency_noise),
        }
        for name, p in profiles.items():
            metrics["latency@" + name] = oracles.latency(graph, p, _stream(seed, idx, "latency@" + name))
        records.append(DatasetRecord(space, idx, string_hash(graph_to_string(graph)), metrics))
    cfg = oracle_config(profiles, latency_device=latency_device, latency_noise=latency_noise,
                        accuracy_noise=accuracy_noise, macro=macro)
    metric_names = ["accuracy", "latency", "memory"] + ["latency@" + n for n in profiles]
    header = _header(space, metric_names, "oracle", cfg, seed=seed)
    return Dataset(records, header)


def _header(space, metric_names, source, cfg, **extra) -> dict:
    return {"schema": DATASET_SCHEMA, "version": DATASET_VERSION, "space": SpaceId(space).value,
            "metrics": list(metric_names), "source": source,
            "oracle_config_digest": config_digest(cfg), "oracle_config": cfg, **extra}


def write_dataset(dataset: Dataset, path) -> None:
    sources = {r.source for r in dataset.records}
    if len(sources) > 1:
        raise DatasetError("oracle and ingested records cannot share one dataset file")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(dataset.header, sort_keys=True) + "\n")
        for r in dataset.records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DatasetError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}:1: bad header: {exc}") from None
    if header.get("schema") != DATASET_SCHEMA or header.get("version") != DATASET_VERSION:
        raise DatasetError(f"{path}: not a version-{DATASET_VERSION} {DATASET_SCHEMA} file")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            records.append(DatasetRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad record: {exc}") from None
    return Dataset(records, header)


def ingest_csv(path, schema: Mapping[str, str] | None = None, space: SpaceId | str | None = None,
               macro: MacroConfig = MacroConfig()) -> Dataset:
    """Read benchmark metrics from CSV.

    Required columns: ``space`` and ``arch_index``; every other column is a
    metric (renamed through ``schema`` if given). Negative latencies are kept
    but flagged, since real benchmark tables contain them.
    """
    schema = dict(schema or {})
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            columns = [c.strip() for c in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty CSV") from None
        for required in ("space", "arch_index"):
            if required not in columns:
                raise DatasetError(f"{path}:1: missing required column {required!r}")
        metric_cols = [c for c in columns if c not in ("space", "arch_index")]
        names = [schema.get(c, c) for c in metric_cols]
        bad = [n for n in names if not is_metric_name(n)]
        if bad or not names:
            raise DatasetError(f"{path}:1: bad metric columns {bad or '(none)'}")
        records, seen = [], {}
        for lineno, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            if len(row) != len(columns):
                raise DatasetError(f"{path}:{lineno}: expected {len(columns)} fields, got {len(row)}")
            cells = dict(zip(columns, (c.strip() for c in row)))
            try:
                sp = SpaceId(cells["space"].lower())
                idx = int(cells["arch_index"])
                if not 0 <= idx < space_size(sp):
                    raise ValueError(f"arch_index {idx} outside the {sp.value} space")
                metrics = {n: float(cells[c]) for c, n in zip(metric_cols, names)}
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            if any(not math.isfinite(v) for v in metrics.values()):
                raise DatasetError(f"{path}:{lineno}: non-finite metric value")
            if space is not None and sp is not SpaceId(space):
                raise DatasetError(f"{path}:{lineno}: space {sp.value} != expected {SpaceId(space).value}")
            if (sp, idx) in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate arch_index {idx} (first on line {seen[(sp, idx)]})")
            seen[(sp, idx)] = lineno
            flags = [f"negative:{n}" for n, v in metrics.items() if n.startswith("latency") and v < 0]
            try:
                shash = string_hash(graph_to_string(elaborate(decode(sp, idx), macro)))
            except NoPathError:
                shash = None
                flags.append("no_path")
            records.append(DatasetRecord(sp, idx, shash, metrics, "ingested", flags))
    spaces = {r.space for r in records}
    if len(spaces) > 1:
        raise DatasetError(f"{path}: mixed search spaces {sorted(s.value for s in spaces)}")
    sp = spaces.pop() if spaces else SpaceId(space or "tss")
    cfg = {"macro": macro.to_dict(), "csv": path.name, "schema": schema}
    return Dataset(records, _header(sp, names, "ingested", cfg))


def split_indices(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic shuffled train/val/test split."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
