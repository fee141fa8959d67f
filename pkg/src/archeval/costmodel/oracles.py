"""Analytic ground-truth oracles: FLOPs, parameters, peak memory, latency, accuracy."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..graphir import CompGraph, GNode, live_edges
from ..searchspace import OpKind, SSS_CHANNELS, SssArch, TssArch
from .profiles import DeviceProfile

BYTES_PER_ELEMENT = 4

# Logistic weights of the synthetic accuracy oracle. TSS features count live
# edges per op kind; SSS uses the summed log2 channel widths relative to 8.
TSS_ACCURACY_BIAS = 0.6
TSS_ACCURACY_WEIGHTS = {
    OpKind.SKIP_CONNECT: 0.05,
    OpKind.CONV_1X1: 0.20,
    OpKind.CONV_3X3: 0.35,
    OpKind.AVG_POOL_3X3: 0.10,
}
SSS_ACCURACY_BIAS = 0.8
SSS_ACCURACY_WEIGHT = 0.13
ACCURACY_NOISE_SD = 3.0


class CostModelError(ValueError):
    pass


@dataclass
class CostReport:
    flops: int
    params: int
    peak_mem_bytes: int
    latency_ms: dict[str, float] = field(default_factory=dict)
    accuracy_pct: float | None = None


def node_flops(graph: CompGraph, node: GNode) -> int:
    out = node.out_shape
    if out is None:
        raise CostModelError(f"node {node.id} has no inferred shape")
    a = node.attrs
    if node.op_name == "Conv2d":
        return 2 * a["in_channels"] * a["out_channels"] * a["kernel"] ** 2 * out.h * out.w * out.n
    if node.op_name == "Linear":
        return 2 * a["in_channels"] * a["out_channels"] * out.n
    if node.op_name in ("AvgPool2d", "ReLU", "BatchNorm", "Add", "GlobalAvgPool"):
        return out.numel
    raise CostModelError(f"no FLOP rule for op {node.op_name!r} at node {node.id}")


def flops(graph: CompGraph) -> int:
    return sum(node_flops(graph, n) for n in graph.nodes)


def params(graph: CompGraph) -> int:
    return graph.param_count


def _last_use(graph: CompGraph) -> list[int]:
    last = list(range(len(graph.nodes)))
    for node in graph.nodes:
        for i in node.inputs:
            last[i] = max(last[i], node.id)
    return last


def peak_memory(graph: CompGraph) -> int:
    """Peak bytes over an inference replay in node order.

    Weights stay resident for the whole run. Each node's output is allocated
    when it executes; after the node runs, every tensor whose last consumer
    has now executed is released. Tensors without consumers (the output) are
    never released.
    """
    last = _last_use(graph)
    release_at: dict[int, list[int]] = {}
    for nid, t in enumerate(last):
        if t != nid:
            release_at.setdefault(t, []).append(nid)
    size = [n.out_shape.numel * BYTES_PER_ELEMENT for n in graph.nodes]
    running = graph.param_count * BYTES_PER_ELEMENT
    peak = running
    for node in graph.nodes:
        running += size[node.id]
        peak = max(peak, running)
        for dead in release_at.get(node.id, ()):
            running -= size[dead]
    return peak


def peak_memory_bruteforce(graph: CompGraph) -> int:
    """Reference: rebuild the live set from scratch at every step."""
    nodes = graph.nodes
    consumers = graph.consumers()
    weights = graph.param_count * BYTES_PER_ELEMENT
    peak = weights
    for t in range(len(nodes)):
        live = [
            j for j in range(t + 1)
            if j == t or not consumers[j] or any(c >= t for c in consumers[j])
        ]
        total = weights + sum(nodes[j].out_shape.numel * BYTES_PER_ELEMENT for j in live)
        peak = max(peak, total)
    return peak


def latency(graph: CompGraph, profile: DeviceProfile, rng: np.random.Generator | None = None,
            noise_sigma: float | None = None) -> float:
    """Profile-weighted latency in ms: per-op cost per MFLOP plus a per-node overhead.

    A relative Normal(0, sigma) perturbation is applied when ``rng`` is given;
    ``noise_sigma`` overrides the profile's sigma.
    """
    total = 0.0
    for node in graph.nodes:
        try:
            coeff = profile.coefficients[node.op_name]
        except KeyError:
            raise CostModelError(f"profile {profile.name!r} has no coefficient for {node.op_name!r}") from None
        total += coeff * node_flops(graph, node) / 1e6
    total += profile.per_node_overhead_ms * len(graph.nodes)
    sigma = profile.noise_sigma if noise_sigma is None else noise_sigma
    if rng is not None and sigma > 0:
        total *= 1.0 + rng.normal(0.0, sigma)
    return total


def accuracy_features(arch) -> np.ndarray:
    if isinstance(arch, TssArch):
        live = live_edges(arch)
        return np.array([
            sum(1 for op, on in zip(arch.edge_ops, live) if on and op is kind)
            for kind in TSS_ACCURACY_WEIGHTS
        ], dtype=float)
    if isinstance(arch, SssArch):
        return np.array([sum(math.log2(c / SSS_CHANNELS[0]) for c in arch.channels)])
    raise TypeError(f"unsupported arch type {type(arch).__name__}")


def base_accuracy(arch) -> float:
    """Noise-free accuracy in percent: 100 * sigmoid(bias + w . features)."""
    x = accuracy_features(arch)
    if isinstance(arch, TssArch):
        z = TSS_ACCURACY_BIAS + float(np.dot(list(TSS_ACCURACY_WEIGHTS.values()), x))
    else:
        z = SSS_ACCURACY_BIAS + SSS_ACCURACY_WEIGHT * float(x[0])
    return 100.0 / (1.0 + math.exp(-z))


def synthetic_accuracy(arch, seed: int | np.random.Generator | None,
                       noise_sd: float = ACCURACY_NOISE_SD) -> float:
    """Base accuracy plus seeded Normal(0, noise_sd) points, clamped to [0, 100]."""
    value = base_accuracy(arch)
    if seed is not None and noise_sd > 0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        value += rng.normal(0.0, noise_sd)
    return float(min(100.0, max(0.0, value)))
