"""Enumerable architecture spaces: a 6-edge cell topology space (TSS) and a
5-position channel-width space (SSS).

Both spaces use a mixed-radix index so every architecture has a stable
integer id. ``tss/<index>`` and ``sss/<index>`` are the canonical text forms;
``tss[op,op,...]`` / ``sss[c,c,...]`` is the verbose form.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Union

import numpy as np


class OpKind(enum.IntEnum):
    NONE = 0
    SKIP_CONNECT = 1
    CONV_1X1 = 2
    CONV_3X3 = 3
    AVG_POOL_3X3 = 4

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "OpKind":
        try:
            return cls[label.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown cell operation {label!r}") from None


class SpaceId(str, enum.Enum):
    TSS = "tss"
    SSS = "sss"


# (from_node, to_node) for each edge of the 4-node cell, in the order used by
# TssArch.edge_ops.
TSS_EDGES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
SSS_CHANNELS = (8, 16, 24, 32, 40, 48, 56, 64)
N_OPS = len(OpKind)
TSS_SIZE = N_OPS ** len(TSS_EDGES)
SSS_POSITIONS = 5
SSS_SIZE = len(SSS_CHANNELS) ** SSS_POSITIONS


@dataclass(frozen=True)
class TssArch:
    edge_ops: tuple[OpKind, ...]

    def __post_init__(self):
        if len(self.edge_ops) != len(TSS_EDGES):
            raise ValueError(f"TSS arch needs {len(TSS_EDGES)} edge ops, got {len(self.edge_ops)}")
        object.__setattr__(self, "edge_ops", tuple(OpKind(op) for op in self.edge_ops))

    space = SpaceId.TSS

    @property
    def index(self) -> int:
        return tss_encode(self)

    def __str__(self) -> str:
        return f"tss/{self.index}"

    def verbose(self) -> str:
        return "tss[" + ",".join(op.label for op in self.edge_ops) + "]"


@dataclass(frozen=True)
class SssArch:
    channels: tuple[int, ...]

    def __post_init__(self):
        if len(self.channels) != SSS_POSITIONS:
            raise ValueError(f"SSS arch needs {SSS_POSITIONS} channel counts, got {len(self.channels)}")
        bad = [c for c in self.channels if c not in SSS_CHANNELS]
        if bad:
            raise ValueError(f"channel counts {bad} not in {SSS_CHANNELS}")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    space = SpaceId.SSS

    @property
    def index(self) -> int:
        return sss_encode(self)

    def __str__(self) -> str:
        return f"sss/{self.index}"

    def verbose(self) -> str:
        return "sss[" + ",".join(str(c) for c in self.channels) + "]"


ArchSpec = Union[TssArch, SssArch]


def _check_index(index, size: int, name: str) -> int:
    if isinstance(index, (bool, np.bool_)) or not isinstance(index, (int, np.integer)):
        raise TypeError(f"{name} index must be an integer, got {type(index).__name__}")
    if not 0 <= index < size:
        raise IndexError(f"{name} index {index} out of range; the space has {size} architectures")
    return int(index)


def tss_decode(index: int) -> TssArch:
    index = _check_index(index, TSS_SIZE, "TSS")
    ops = []
    for _ in TSS_EDGES:
        index, digit = divmod(index, N_OPS)
        ops.append(OpKind(digit))
    return TssArch(tuple(ops))


def tss_encode(arch: TssArch) -> int:
    return sum(int(op) * N_OPS ** e for e, op in enumerate(arch.edge_ops))


def sss_decode(index: int) -> SssArch:
    index = _check_index(index, SSS_SIZE, "SSS")
    radix = len(SSS_CHANNELS)
    channels = []
    for _ in range(SSS_POSITIONS):
        index, digit = divmod(index, radix)
        channels.append(SSS_CHANNELS[digit])
    return SssArch(tuple(channels))


def sss_encode(arch: SssArch) -> int:
    radix = len(SSS_CHANNELS)
    return sum(SSS_CHANNELS.index(c) * radix ** p for p, c in enumerate(arch.channels))


def space_size(space: SpaceId | str) -> int:
    return TSS_SIZE if SpaceId(space) is SpaceId.TSS else SSS_SIZE


def decode(space: SpaceId | str, index: int) -> ArchSpec:
    return tss_decode(index) if SpaceId(space) is SpaceId.TSS else sss_decode(index)


def encode(arch: ArchSpec) -> int:
    return arch.index


def sample(space: SpaceId | str, rng: np.random.Generator) -> ArchSpec:
    """Draw one architecture uniformly from ``space``."""
    return decode(space, int(rng.integers(space_size(space))))


def sample_indices(space: SpaceId | str, n: int, rng: np.random.Generator) -> list[int]:
    """Draw ``n`` distinct indices uniformly without replacement."""
    size = space_size(space)
    if not 0 <= n <= size:
        raise ValueError(f"cannot draw {n} distinct architectures from a space of {size}")
    return [int(i) for i in rng.choice(size, size=n, replace=False)]


def mutate(arch: ArchSpec, rng: np.random.Generator) -> ArchSpec:
    """Resample exactly one coordinate to a different value.

    The position is uniform over coordinates and the replacement is uniform
    over the remaining values of that coordinate.
    """
    if isinstance(arch, TssArch):
        ops = list(arch.edge_ops)
        pos = int(rng.integers(len(ops)))
        # shift by 1..N-1 so the new value always differs
        ops[pos] = OpKind((int(ops[pos]) + 1 + int(rng.integers(N_OPS - 1))) % N_OPS)
        return TssArch(tuple(ops))
    channels = list(arch.channels)
    pos = int(rng.integers(len(channels)))
    cur = SSS_CHANNELS.index(channels[pos])
    channels[pos] = SSS_CHANNELS[(cur + 1 + int(rng.integers(len(SSS_CHANNELS) - 1))) % len(SSS_CHANNELS)]
    return SssArch(tuple(channels))


_SHORT_RE = re.compile(r"^\s*(tss|sss)\s*/\s*(\d+)\s*$", re.IGNORECASE)
_VERBOSE_RE = re.compile(r"^\s*(tss|sss)\s*\[(.*)\]\s*$", re.IGNORECASE)


def parse_arch(text: str) -> ArchSpec:
    """Parse ``tss/<i>``, ``sss/<i>`` or the verbose bracket form."""
    m = _SHORT_RE.match(text)
    if m:
        return decode(m.group(1).lower(), int(m.group(2)))
    m = _VERBOSE_RE.match(text)
    if m:
        items = [s for s in m.group(2).split(",") if s.strip()]
        if m.group(1).lower() == "tss":
            return TssArch(tuple(OpKind.from_label(s) for s in items))
        try:
            return SssArch(tuple(int(s) for s in items))
        except ValueError as exc:
            raise ValueError(f"bad SSS channel list in {text!r}: {exc}") from None
    raise ValueError(f"cannot parse architecture id {text!r}; expected e.g. 'tss/42' or 'sss/9'")
