"""Trained evaluator bundle (vocab + regressor + objective names) and its JSON checkpoint."""
from __future__ import annotations

import base64
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from ..graphir import MacroConfig, elaborate
from ..netstring import Vocab, graph_to_string, pad_sequences, tokenize
from ..searchspace import SpaceId, parse_arch
from .estimator import SurrogateRegressor
from .model import ModelConfig

CHECKPOINT_FORMAT = "archeval.checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ArchEvaluator:
    """Architecture -> predicted metric vector, one column per objective."""

    regressor: SurrogateRegressor
    vocab: Vocab
    objectives: list[str]
    macro: MacroConfig = field(default_factory=MacroConfig)
    traversal: str = "postorder_dfs"
    max_tokens: int | None = None
    space: SpaceId | None = None  # space of the training archs, None if unknown

    def __post_init__(self):
        if self.space is not None:
            self.space = SpaceId(self.space)

    @property
    def seq_len(self) -> int:
        return min(self.max_tokens or self.regressor.max_len, self.regressor.max_len)

    def net_string(self, arch) -> str:
        if isinstance(arch, str):
            arch = parse_arch(arch)
        return graph_to_string(elaborate(arch, self.macro), self.traversal)

    def tokens(self, strings) -> np.ndarray:
        return pad_sequences([tokenize(s, self.vocab, self.seq_len) for s in strings])

    def predict_strings(self, strings) -> np.ndarray:
        return self.regressor.predict_normalized(self.tokens(strings)) * self.regressor.target_std_ \
            + self.regressor.target_mean_

    def predict_archs(self, archs) -> np.ndarray:
        return self.predict_strings([self.net_string(a) for a in archs])

    def predict_one(self, arch) -> dict[str, float]:
        row = self.predict_archs([arch])[0]
        return dict(zip(self.objectives, row.tolist()))


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    return {"shape": list(a.shape), "dtype": str(a.dtype), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype=np.dtype(d["dtype"])).copy()
    if a.size != int(np.prod(d["shape"], dtype=np.int64)):
        raise CheckpointError(f"tensor payload has {a.size} elements, header declares shape {d['shape']}")
    return a.reshape(d["shape"])


def save_checkpoint(evaluator: ArchEvaluator, path, extra: dict | None = None) -> None:
    reg = evaluator.regressor
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": reg.config_.to_dict(),
        "estimator_params": reg.get_params(),
        "objectives": list(evaluator.objectives),
        "vocab": evaluator.vocab.to_dict(),
        "vocab_digest": evaluator.vocab.digest,
        "macro": evaluator.macro.to_dict(),
        "traversal": evaluator.traversal,
        "max_tokens": evaluator.seq_len,
        "space": None if evaluator.space is None else evaluator.space.value,
        "target_mean": reg.target_mean_.tolist(),
        "target_std": reg.target_std_.tolist(),
        "y_1d": bool(getattr(reg, "_y_1d", False)),
        "history": getattr(reg, "history_", []),
        "params": {k: _encode_array(v) for k, v in reg.params_.items()},
        "extra": extra or {},
    }
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path, expected_vocab_digest: str | None = None) -> ArchEvaluator:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint at offset {exc.pos}: {exc.msg}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not an evaluator checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {doc.get('version')} != {CHECKPOINT_VERSION}")
    vocab = Vocab.from_dict(doc["vocab"])
    if vocab.digest != doc["vocab_digest"]:
        raise CheckpointError(f"{path}: stored vocabulary does not match its digest")
    if expected_vocab_digest is not None and expected_vocab_digest != vocab.digest:
        raise CheckpointError(
            f"{path}: vocabulary digest {vocab.digest} does not match expected {expected_vocab_digest}")
    reg = SurrogateRegressor(**doc["estimator_params"])
    reg.config_ = ModelConfig(**doc["model_config"])
    reg.params_ = {k: _decode_array(v) for k, v in doc["params"].items()}
    reg.target_mean_ = np.array(doc["target_mean"], dtype=np.float64)
    reg.target_std_ = np.array(doc["target_std"], dtype=np.float64)
    reg._y_1d = doc["y_1d"]
    reg.history_ = doc.get("history", [])
    return ArchEvaluator(reg, vocab, list(doc["objectives"]), MacroConfig.from_dict(doc["macro"]),
                         doc.get("traversal", "postorder_dfs"), doc.get("max_tokens"), doc.get("space"))
