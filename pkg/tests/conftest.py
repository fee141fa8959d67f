import hashlib

import numpy as np
import pytest

from archeval.costmodel import build_dataset, load_profiles, sample_valid_indices
from archeval.evaluator.training import train_evaluator
from archeval.graphir import NoPathError, elaborate
from archeval.netstring import graph_to_string
from archeval.searchspace import TSS_SIZE, tss_decode


@pytest.fixture(scope="session")
def tss_enumeration():
    """Every TSS index -> (net string, graph JSON digest); None for archs without a path."""
    out = {}
    for i in range(TSS_SIZE):
        try:
            g = elaborate(tss_decode(i))
        except NoPathError:
            out[i] = None
            continue
        out[i] = (graph_to_string(g), hashlib.sha256(g.to_json().encode()).hexdigest())
    return out


@pytest.fixture(scope="session")
def small_dataset():
    """300 valid TSS archs with oracle metrics (fixed seeds)."""
    idx = sample_valid_indices("tss", 300, np.random.default_rng(7))
    return build_dataset("tss", idx, load_profiles(), seed=7, latency_noise=0.05)


@pytest.fixture(scope="session")
def small_evaluator(small_dataset):
    """Quickly trained (accuracy, memory, latency) evaluator; good enough for plumbing tests."""
    run = train_evaluator(small_dataset, ["accuracy", "memory", "latency"], max_tokens=160,
                          d_model=32, ffn_dim=64, epochs=4, lr_schedule="cosine", learning_rate=2e-3)
    return run


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def report_criterion():
    """Record one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""
    def record(number, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
