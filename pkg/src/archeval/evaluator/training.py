"""Dataset -> net strings -> vocab -> trained evaluator, with the deterministic split."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..costmodel.dataset import Dataset, DatasetError, split_indices
from ..graphir import MacroConfig
from ..netstring import NetStringTokenizer, arch_to_string
from ..searchspace import decode
from .checkpoint import ArchEvaluator
from .estimator import SurrogateRegressor


@dataclass
class TrainedRun:
    evaluator: ArchEvaluator
    split: tuple[np.ndarray, np.ndarray, np.ndarray]
    strings: list[str]
    targets: np.ndarray


def dataset_strings(dataset: Dataset, macro: MacroConfig | None = None, traversal: str = "postorder_dfs") -> list[str]:
    macro = macro or dataset.macro_config
    return [arch_to_string(decode(r.space, r.arch_index), macro, traversal) for r in dataset.records]


def check_objectives(dataset: Dataset, objectives) -> list[str]:
    objectives = list(objectives)
    if not objectives:
        raise DatasetError("at least one objective is required")
    missing = [o for o in objectives if o not in dataset.metric_names]
    if missing:
        raise DatasetError(f"unknown objective(s) {missing}; dataset provides {dataset.metric_names}")
    return objectives


def train_evaluator(dataset: Dataset, objectives, *, split_seed: int = 0, max_tokens: int | None = None,
                    traversal: str = "postorder_dfs", strings: list[str] | None = None,
                    **regressor_params) -> TrainedRun:
    """Fit a :class:`SurrogateRegressor` on the train split, selecting on the val split.

    The vocabulary is built from train-split strings only. ``max_tokens``
    truncates token sequences below the model's positional capacity.
    """
    objectives = check_objectives(dataset, objectives)
    macro = dataset.macro_config
    if strings is None:
        strings = dataset_strings(dataset, macro, traversal)
    Y = np.stack([dataset.column(o) for o in objectives], axis=1)
    train, val, test = split_indices(len(dataset), split_seed)
    reg = SurrogateRegressor(**regressor_params)
    seq_len = min(max_tokens or reg.max_len, reg.max_len)
    tok = NetStringTokenizer(max_len=seq_len).fit([strings[i] for i in train])
    X = tok.transform(strings)
    reg.set_params(vocab_size=len(tok.vocab_))
    if len(val):
        reg.fit(X[train], Y[train], X[val], Y[val])
    else:
        reg.fit(X[train], Y[train])
    evaluator = ArchEvaluator(reg, tok.vocab_, objectives, macro, traversal, max_tokens=seq_len,
                              space=dataset.space)
    return TrainedRun(evaluator, (train, val, test), strings, Y)
