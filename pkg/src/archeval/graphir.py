"""Operation-level computational graphs elaborated from search-space points.

A :class:`CompGraph` is a list of :class:`GNode` in topological order. Node
ids are dense and every node only consumes strictly smaller ids, so the list
order is itself an execution schedule. Nodes with an empty ``inputs`` list
consume the graph input tensor.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .searchspace import TSS_EDGES, OpKind, SssArch, TssArch

GRAPH_FORMAT = "archeval.compgraph"
GRAPH_VERSION = 1
# bump when the stem/downsample/cell composition changes
SKELETON_VERSION = "cellnet-v1"

KNOWN_OPS = ("Conv2d", "BatchNorm", "ReLU", "AvgPool2d", "Add", "GlobalAvgPool", "Linear")


class GraphError(ValueError):
    pass


class ShapeError(GraphError):
    def __init__(self, node_id: int, message: str):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


class NoPathError(GraphError):
    """The cell output has no incoming path of non-``none`` edges."""


@dataclass(frozen=True)
class TensorShape:
    n: int
    c: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("n", "c", "h", "w"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"tensor dim {name}={v!r} must be a positive integer")

    @property
    def numel(self) -> int:
        return self.n * self.c * self.h * self.w

    def as_list(self) -> list[int]:
        return [self.n, self.c, self.h, self.w]

    def __str__(self) -> str:
        return f"{self.n}x{self.c}x{self.h}x{self.w}"


@dataclass(frozen=True)
class GNode:
    id: int
    op_name: str
    attrs: Mapping[str, int] = field(default_factory=dict)
    inputs: tuple[int, ...] = ()
    out_shape: TensorShape | None = None

    def __post_init__(self):
        object.__setattr__(self, "attrs", {k: int(self.attrs[k]) for k in sorted(self.attrs)})
        object.__setattr__(self, "inputs", tuple(int(i) for i in self.inputs))

    def _evolve(self, **changes) -> "GNode":
        # replace() without re-normalizing attrs; hot path during elaboration
        new = object.__new__(GNode)
        for name in ("id", "op_name", "attrs", "inputs", "out_shape"):
            object.__setattr__(new, name, changes.get(name, getattr(self, name)))
        return new

    @property
    def params(self) -> int:
        a = self.attrs
        if self.op_name == "Conv2d":
            return a["kernel"] ** 2 * a["in_channels"] * a["out_channels"]
        if self.op_name == "BatchNorm":
            return 2 * a["channels"]
        if self.op_name == "Linear":
            return a["in_channels"] * a["out_channels"] + a["out_channels"]
        return 0


@dataclass(frozen=True)
class MacroConfig:
    cells_per_stage: int = 5
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    input: TensorShape = TensorShape(1, 3, 32, 32)
    num_classes: int = 10

    def __post_init__(self):
        if self.cells_per_stage < 1 or self.num_classes < 1:
            raise ValueError("cells_per_stage and num_classes must be positive")
        if len(self.stage_channels) != 3 or min(self.stage_channels) < 1:
            raise ValueError("stage_channels must be three positive integers")

    def to_dict(self) -> dict:
        return {
            "cells_per_stage": self.cells_per_stage,
            "stage_channels": list(self.stage_channels),
            "input": self.input.as_list(),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MacroConfig":
        return cls(
            cells_per_stage=int(d.get("cells_per_stage", 5)),
            stage_channels=tuple(int(c) for c in d.get("stage_channels", (16, 32, 64))),
            input=TensorShape(*[int(x) for x in d.get("input", (1, 3, 32, 32))]),
            num_classes=int(d.get("num_classes", 10)),
        )


@dataclass
class CompGraph:
    nodes: list[GNode]
    input_shape: TensorShape

    @property
    def param_count(self) -> int:
        return sum(n.params for n in self.nodes)

    @property
    def sink(self) -> GNode:
        return self.nodes[-1]

    def consumers(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.nodes]
        for node in self.nodes:
            for i in node.inputs:
                if 0 <= i < len(out):
                    out[i].append(node.id)
        return out

    def to_dict(self) -> dict:
        return {
            "format": GRAPH_FORMAT,
            "version": GRAPH_VERSION,
            "skeleton": SKELETON_VERSION,
            "input_shape": self.input_shape.as_list(),
            "nodes": [
                {
                    "id": n.id,
                    "op": n.op_name,
                    "attrs": dict(n.attrs),
                    "inputs": list(n.inputs),
                    "shape": n.out_shape.as_list() if n.out_shape else None,
                }
                for n in self.nodes
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping) -> "CompGraph":
        if d.get("format") != GRAPH_FORMAT:
            raise GraphError(f"not a computational graph document (format={d.get('format')!r})")
        if d.get("version") != GRAPH_VERSION:
            raise GraphError(f"unsupported graph version {d.get('version')!r}")
        nodes = [
            GNode(
                id=int(n["id"]),
                op_name=n["op"],
                attrs=n.get("attrs", {}),
                inputs=tuple(n.get("inputs", ())),
                out_shape=TensorShape(*n["shape"]) if n.get("shape") else None,
            )
            for n in d["nodes"]
        ]
        return cls(nodes, TensorShape(*d["input_shape"]))

    @classmethod
    def from_json(cls, text: str) -> "CompGraph":
        return cls.from_dict(json.loads(text))


class _Builder:
    def __init__(self, input_shape: TensorShape):
        self.input_shape = input_shape
        self.nodes: list[GNode] = []

    def add(self, op: str, inputs: Iterable[int], **attrs) -> int:
        nid = len(self.nodes)
        self.nodes.append(GNode(nid, op, attrs, tuple(inputs)))
        return nid

    def conv_bn(self, src, cin, cout, kernel, stride, relu):
        inputs = () if src is None else (src,)
        ref = self.add("Conv2d", inputs, in_channels=cin, out_channels=cout,
                       kernel=kernel, stride=stride, padding=kernel // 2)
        ref = self.add("BatchNorm", (ref,), channels=cout)
        if relu:
            ref = self.add("ReLU", (ref,))
        return ref

    def graph(self) -> CompGraph:
        return infer_shapes(canonicalize(CompGraph(self.nodes, self.input_shape)))


def postorder(graph: CompGraph) -> list[int]:
    """Depth-first post-order from the last node, inputs in ascending id order."""
    nodes = graph.nodes
    root = len(nodes) - 1
    order: list[int] = []
    seen = {root}
    # explicit stack: chains run to several hundred nodes
    stack = [(root, iter(sorted(set(nodes[root].inputs))))]
    while stack:
        nid, children = stack[-1]
        for u in children:
            if u not in seen:
                seen.add(u)
                stack.append((u, iter(sorted(set(nodes[u].inputs)))))
                break
        else:
            stack.pop()
            order.append(nid)
    return order


def canonicalize(graph: CompGraph) -> CompGraph:
    """Renumber nodes in post-order so isomorphic builds compare equal."""
    order = postorder(graph)
    new_id = {old: new for new, old in enumerate(order)}
    nodes = [
        graph.nodes[old]._evolve(id=new, inputs=tuple(new_id[i] for i in graph.nodes[old].inputs))
        for new, old in enumerate(order)
    ]
    return CompGraph(nodes, graph.input_shape)


def live_edges(arch: TssArch) -> list[bool]:
    """Which cell edges carry data from the cell input to the cell output.

    An edge is live when its op is not ``none``, its source is reachable from
    node 0 and its target reaches node 3, all through non-``none`` edges.
    """
    on = [op is not OpKind.NONE for op in arch.edge_ops]
    fwd = {0}
    for (i, j), e_on in zip(TSS_EDGES, on):
        if e_on and i in fwd:
            fwd.add(j)
    bwd = {3}
    for (i, j), e_on in reversed(list(zip(TSS_EDGES, on))):
        if e_on and j in bwd:
            bwd.add(i)
    return [e_on and i in fwd and j in bwd for (i, j), e_on in zip(TSS_EDGES, on)]


def elaborate_tss(arch: TssArch, cfg: MacroConfig = MacroConfig()) -> CompGraph:
    live = live_edges(arch)
    if not any(live):
        raise NoPathError(f"{arch}: cell output node 3 is unreachable from the cell input")
    # archs differing only on dead edges share one graph
    effective = tuple(op if on else OpKind.NONE for op, on in zip(arch.edge_ops, live))
    g = _elaborate_effective(effective, cfg)
    return CompGraph(list(g.nodes), g.input_shape)


@functools.lru_cache(maxsize=4096)
def _elaborate_effective(ops: tuple[OpKind, ...], cfg: MacroConfig) -> CompGraph:
    arch = TssArch(ops)
    live = live_edges(arch)
    b = _Builder(cfg.input)
    c0 = cfg.stage_channels[0]
    ref = b.conv_bn(None, cfg.input.c, c0, 3, 1, relu=False)
    prev_c = c0
    for stage, ch in enumerate(cfg.stage_channels):
        if stage > 0:
            ref = b.conv_bn(ref, prev_c, ch, 3, 2, relu=False)
            prev_c = ch
        for _ in range(cfg.cells_per_stage):
            ref = _cell(b, arch, live, ref, ch)
    ref = b.add("GlobalAvgPool", (ref,))
    b.add("Linear", (ref,), in_channels=prev_c, out_channels=cfg.num_classes)
    return b.graph()


def _cell(b: _Builder, arch: TssArch, live: list[bool], src: int, ch: int) -> int:
    value: dict[int, int] = {0: src}
    for j in (1, 2, 3):
        terms = []
        for e, (i, jj) in enumerate(TSS_EDGES):
            if jj != j or not live[e]:
                continue
            op = arch.edge_ops[e]
            x = value[i]
            if op is OpKind.SKIP_CONNECT:
                terms.append(x)
            elif op is OpKind.CONV_1X1:
                terms.append(b.conv_bn(x, ch, ch, 1, 1, relu=True))
            elif op is OpKind.CONV_3X3:
                terms.append(b.conv_bn(x, ch, ch, 3, 1, relu=True))
            elif op is OpKind.AVG_POOL_3X3:
                terms.append(b.add("AvgPool2d", (x,), kernel=3, stride=1, padding=1))
        if len(terms) == 1:
            value[j] = terms[0]
        elif terms:
            value[j] = b.add("Add", terms)
    return value[3]


def elaborate_sss(arch: SssArch, cfg: MacroConfig = MacroConfig()) -> CompGraph:
    """Five Conv3x3-BN-ReLU blocks (stride 2 on blocks 2 and 4), pool, classifier."""
    b = _Builder(cfg.input)
    ref, cin = None, cfg.input.c
    for block, cout in enumerate(arch.channels):
        stride = 2 if block in (1, 3) else 1
        ref = b.conv_bn(ref, cin, cout, 3, stride, relu=True)
        cin = cout
    ref = b.add("GlobalAvgPool", (ref,))
    b.add("Linear", (ref,), in_channels=cin, out_channels=cfg.num_classes)
    return b.graph()


def elaborate(arch, cfg: MacroConfig = MacroConfig()) -> CompGraph:
    if isinstance(arch, TssArch):
        return elaborate_tss(arch, cfg)
    if isinstance(arch, SssArch):
        return elaborate_sss(arch, cfg)
    raise TypeError(f"cannot elaborate {type(arch).__name__}")


def _spatial(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def infer_shapes(graph: CompGraph) -> CompGraph:
    """Return a copy of ``graph`` with every ``out_shape`` computed."""
    shapes: list[TensorShape] = []
    nodes = []
    for node in graph.nodes:
        ins = []
        for i in node.inputs:
            if not 0 <= i < len(shapes):
                raise ShapeError(node.id, f"input {i} is not an earlier node")
            ins.append(shapes[i])
        if not ins:
            ins = [graph.input_shape]
        x = ins[0]
        a = node.attrs
        op = node.op_name
        if op == "Conv2d":
            if x.c != a["in_channels"]:
                raise ShapeError(node.id, f"Conv2d expects {a['in_channels']} channels, got {x}")
            h = _spatial(x.h, a["kernel"], a["stride"], a["padding"])
            w = _spatial(x.w, a["kernel"], a["stride"], a["padding"])
            if h < 1 or w < 1:
                raise ShapeError(node.id, f"convolution collapses spatial dims of {x}")
            out = TensorShape(x.n, a["out_channels"], h, w)
        elif op == "AvgPool2d":
            out = TensorShape(x.n, x.c, _spatial(x.h, a["kernel"], a["stride"], a["padding"]),
                              _spatial(x.w, a["kernel"], a["stride"], a["padding"]))
        elif op == "BatchNorm":
            if x.c != a["channels"]:
                raise ShapeError(node.id, f"BatchNorm over {a['channels']} channels got {x}")
            out = x
        elif op == "ReLU":
            out = x
        elif op == "Add":
            if len(ins) < 2:
                raise ShapeError(node.id, "Add needs at least two inputs")
            for other in ins[1:]:
                if other != x:
                    raise ShapeError(node.id, f"Add input shapes differ: {x} vs {other}")
            out = x
        elif op == "GlobalAvgPool":
            out = TensorShape(x.n, x.c, 1, 1)
        elif op == "Linear":
            if x.c * x.h * x.w != a["in_channels"]:
                raise ShapeError(node.id, f"Linear expects {a['in_channels']} features, got {x}")
            out = TensorShape(x.n, a["out_channels"], 1, 1)
        else:
            raise ShapeError(node.id, f"unknown op {op!r}")
        shapes.append(out)
        nodes.append(node._evolve(out_shape=out))
    return CompGraph(nodes, graph.input_shape)


def validate(graph: CompGraph) -> list[str]:
    """List invariant violations; an empty list means the graph is valid."""
    errors = []
    n = len(graph.nodes)
    if n == 0:
        return ["graph has no nodes"]
    for pos, node in enumerate(graph.nodes):
        if node.id != pos:
            errors.append(f"ids not dense: position {pos} holds node id {node.id}")
        if list(node.attrs) != sorted(node.attrs):
            errors.append(f"node {node.id}: attrs keys not sorted")
        for i in node.inputs:
            if i >= pos:
                errors.append(f"acyclicity: node {node.id} consumes node {i} which is not earlier")
            elif i < 0:
                errors.append(f"node {node.id}: negative input id {i}")
    if errors:
        return errors
    consumers = graph.consumers()
    sinks = [i for i, c in enumerate(consumers) if not c]
    if len(sinks) != 1:
        errors.append(f"expected exactly one sink, found {len(sinks)}: {sinks}")
    # every node must lie on a path from the input to the last node
    reaches = [False] * n
    reaches[n - 1] = True
    for i in range(n - 1, -1, -1):
        if reaches[i]:
            for j in graph.nodes[i].inputs:
                reaches[j] = True
    dead = [i for i in range(n) if not reaches[i]]
    if dead:
        errors.append(f"reachability: nodes {dead} do not reach the output node {n - 1}")
    return errors
