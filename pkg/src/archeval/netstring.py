"""Graph-to-string conversion, field tokenization and vocabulary handling.

A net string holds one record per emitted graph node::

    Conv2d|0|in_channels=3,kernel=3,out_channels=16,padding=1,stride=1
    BatchNorm|1|channels=16
    ...

Records are emitted by a depth-first post-order walk from the output node
(inputs visited in ascending id order, each node once), so the record id is
the emission counter rather than the graph node id.
"""
from __future__ import annotations

import hashlib
import json
import re
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .graphir import KNOWN_OPS, CompGraph, MacroConfig, elaborate, postorder, validate
from .searchspace import parse_arch

PAD, UNK, EOS = 0, 1, 2
RESERVED = ("<pad>", "<unk>", "<eos>")
VOCAB_FORMAT = "archeval.vocab"
VOCAB_VERSION = 1
TRAVERSALS = ("postorder_dfs", "bfs")

_SPLIT_RE = re.compile(r"[|,=\n]")


class TraversalError(ValueError):
    pass


def _record(name: str, rid: int, attrs, refs: list[str]) -> str:
    items = [f"{k}={v}" for k, v in attrs.items()] + [f"in={r}" for r in refs]
    return f"{name}|{rid}|" + ",".join(items)


def _input_refs(inputs: tuple[int, ...], rid: int, rid_of: dict[int, int]) -> list[str]:
    # chain links (single input = previous record) and the first node reading the
    # graph input are implicit; everything else is spelled out as in=<record id>
    if inputs == () and rid == 0:
        return []
    if len(inputs) == 1 and rid_of[inputs[0]] == rid - 1:
        return []
    if not inputs:
        return ["input"]
    return [str(rid_of[i]) for i in inputs]


def graph_to_string(graph: CompGraph, traversal: str = "postorder_dfs") -> str:
    if traversal not in TRAVERSALS:
        raise ValueError(f"traversal must be one of {TRAVERSALS}, got {traversal!r}")
    problems = validate(graph)
    if problems:
        raise TraversalError("cannot traverse invalid graph: " + "; ".join(problems))
    nodes = graph.nodes
    if traversal == "bfs":
        root = len(nodes) - 1
        order = []
        seen = {root}
        queue = deque([root])
        while queue:
            nid = queue.popleft()
            order.append(nid)
            for u in sorted(set(nodes[nid].inputs)):
                if u not in seen:
                    seen.add(u)
                    queue.append(u)
    else:
        order = postorder(graph)
    rid_of = {nid: rid for rid, nid in enumerate(order)}
    lines = []
    for rid, nid in enumerate(order):
        node = nodes[nid]
        lines.append(_record(node.op_name, rid, node.attrs, _input_refs(node.inputs, rid, rid_of)))
    return "\n".join(lines)


def fields(text: str) -> list[str]:
    return [f for f in _SPLIT_RE.split(text) if f]


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[int, ...]
    truncated: bool = False

    @property
    def length(self) -> int:
        return len(self.tokens)


class Vocab:
    """Field vocabulary. Ids 0-2 are reserved for PAD, UNK and EOS."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        clash = set(tokens) & set(RESERVED)
        if clash:
            raise ValueError(f"tokens {sorted(clash)} collide with reserved names")
        self.id_to_token = list(RESERVED) + tokens
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.id_to_token == other.id_to_token

    def __getitem__(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.id_to_token).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {"format": VOCAB_FORMAT, "version": VOCAB_VERSION,
                "reserved": list(RESERVED), "tokens": self.id_to_token[len(RESERVED):]}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        if d.get("format") != VOCAB_FORMAT or d.get("version") != VOCAB_VERSION:
            raise ValueError("not a version-1 vocabulary document")
        if list(d.get("reserved", [])) != list(RESERVED):
            raise ValueError(f"reserved header {d.get('reserved')} does not match {list(RESERVED)}")
        return cls(d["tokens"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def build_vocab(corpus: Iterable[str]) -> Vocab:
    distinct: set[str] = set()
    n = 0
    for text in corpus:
        distinct.update(fields(text))
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocab(sorted(distinct))


def tokenize(text: str, vocab: Vocab, max_len: int = 512) -> TokenSeq:
    ids = [vocab[f] for f in fields(text)]
    ids.append(EOS)
    truncated = len(ids) > max_len
    return TokenSeq(tuple(ids[:max_len]), truncated)


def detokenize(seq: TokenSeq | Sequence[int], vocab: Vocab) -> str:
    """Rebuild the record text; a record starts at every known op name."""
    ids = seq.tokens if isinstance(seq, TokenSeq) else seq
    records: list[list[str]] = []
    for i in ids:
        if i in (PAD, EOS):
            break
        tok = vocab.id_to_token[i]
        if tok in KNOWN_OPS or not records:
            records.append([tok])
        else:
            records[-1].append(tok)
    lines = []
    for rec in records:
        head, rest = rec[:2], rec[2:]
        pairs = ",".join(f"{k}={v}" for k, v in zip(rest[::2], rest[1::2]))
        lines.append("|".join(head) + "|" + pairs)
    return "\n".join(lines)


def pad_sequences(seqs: Sequence[TokenSeq], max_len: int | None = None) -> np.ndarray:
    width = max_len or max((s.length for s in seqs), default=1)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for row, s in enumerate(seqs):
        out[row, : s.length] = s.tokens[:width]
    return out


def arch_to_string(arch, cfg: MacroConfig = MacroConfig(), traversal: str = "postorder_dfs") -> str:
    if isinstance(arch, str):
        arch = parse_arch(arch)
    return graph_to_string(elaborate(arch, cfg), traversal)


class ArchStringifier(TransformerMixin, BaseEstimator):
    """Map architectures (objects or ``tss/<i>`` ids) to net strings. Stateless."""

    def __init__(self, macro_config=None, traversal="postorder_dfs"):
        self.macro_config = macro_config
        self.traversal = traversal

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        cfg = self.macro_config or MacroConfig()
        return [arch_to_string(a, cfg, self.traversal) for a in X]


class NetStringTokenizer(TransformerMixin, BaseEstimator):
    """Learn a field vocabulary on ``fit``; ``transform`` returns a padded id matrix.

    Attributes
    ----------
    vocab_ : Vocab
    truncated_ : ndarray of bool
        Per-row truncation flags from the last ``transform`` call.
    """

    def __init__(self, max_len=512, vocab=None):
        self.max_len = max_len
        self.vocab = vocab

    def fit(self, X, y=None):
        X = list(X)
        self.vocab_ = self.vocab if self.vocab is not None else build_vocab(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "vocab_")
        seqs = [tokenize(s, self.vocab_, self.max_len) for s in X]
        self.truncated_ = np.array([s.truncated for s in seqs], dtype=bool)
        return pad_sequences(seqs)
