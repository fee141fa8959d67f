"""``archeval`` command line: gen-dataset, train, eval, search, net2str, grad-check.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command that
writes files also writes a run manifest next to its outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from .costmodel import build_dataset, load_profiles, read_dataset, sample_valid_indices, write_dataset
from .costmodel.dataset import DatasetError, split_indices
from .costmodel.profiles import DEVICE_NAMES
from .evaluator.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluator.estimator import TrainingDivergedError
from .evaluator.gradcheck import grad_check, tiny_config, tiny_sample
from .evaluator.training import check_objectives, dataset_strings, train_evaluator
from .graphir import GraphError, MacroConfig
from .metrics import correlation_report, write_scatter_csv
from .netstring import NetStringTokenizer, arch_to_string
from .search import SearchConfig, SearchError, parse_constraint, regularized_evolution
from .searchspace import SpaceId, parse_arch, space_size

logger = logging.getLogger("archeval")


class UsageError(Exception):
    pass


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    tool_version: str = field(default_factory=tool_version)
    wall_seconds: float = 0.0

    @property
    def config_digest(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()[:16]

    def write(self, path) -> None:
        doc = asdict(self)
        doc["config_digest"] = self.config_digest
        atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def atomic_write_text(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _manifest_path(out: str | Path, directory: bool = False) -> str:
    """``<dir>/manifest.json`` for directory outputs, ``<file>.manifest.json`` next to file outputs."""
    return str(Path(out) / "manifest.json") if directory else str(out) + ".manifest.json"


def _macro(args) -> MacroConfig:
    if getattr(args, "macro_config", None):
        with open(args.macro_config, encoding="utf-8") as fh:
            return MacroConfig.from_dict(json.load(fh))
    return MacroConfig()


def _config_of(args) -> dict:
    skip = {"func", "config", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and not k.startswith("_")}


# --- commands -----------------------------------------------------------------

def cmd_gen_dataset(args) -> int:
    space = SpaceId(args.space)
    if args.n < 1 or args.n > space_size(space):
        raise UsageError(f"--n must lie in [1, {space_size(space)}] for {space.value}")
    profiles = load_profiles(args.profiles_dir)
    rng = np.random.default_rng(args.seed)
    try:
        indices = sample_valid_indices(space, args.n, rng)
    except DatasetError as exc:
        raise UsageError(str(exc)) from None
    ds = build_dataset(space, indices, profiles, args.seed, latency_device=args.latency_device,
                       latency_noise=args.latency_noise, accuracy_noise=args.accuracy_noise, macro=_macro(args))
    manifest = _manifest_path(args.out)
    ds.header["manifest"] = os.path.basename(manifest)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} records ({', '.join(ds.metric_names)}) to {args.out}")
    return _finish(args, "gen-dataset", [], [args.out], manifest)


def cmd_train(args) -> int:
    objectives = [o.strip() for o in args.objectives.split(",") if o.strip()]
    if not objectives:
        raise UsageError("--objectives needs at least one metric name")
    ds = read_dataset(args.dataset)
    try:
        check_objectives(ds, objectives)
    except DatasetError as exc:
        raise UsageError(str(exc)) from None
    run = train_evaluator(
        ds, objectives, split_seed=args.split_seed, max_tokens=args.max_tokens,
        d_model=args.d_model, n_layers=args.n_layers, n_heads=args.n_heads, ffn_dim=args.ffn_dim,
        max_len=args.max_len, dropout_p=args.dropout, learning_rate=args.lr, epochs=args.epochs,
        batch_size=args.batch_size, optimizer=args.optimizer, lr_schedule=args.lr_schedule,
        random_state=args.seed, verbose=args.verbose,
    )
    manifest = _manifest_path(args.out)
    history_csv = str(args.out) + ".history.csv"
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run.evaluator, args.out, extra={
        "dataset": os.path.abspath(args.dataset), "split_seed": args.split_seed,
        "manifest": os.path.basename(manifest)})
    _write_history(history_csv, run.evaluator.regressor.history_, objectives)
    reg = run.evaluator.regressor
    print(f"trained k={len(objectives)} ({', '.join(objectives)}) for {args.epochs} epochs; "
          f"best epoch {reg.best_epoch_}, val loss {reg.history_[reg.best_epoch_].get('val_loss')}")
    return _finish(args, "train", [args.dataset], [args.out, history_csv], manifest)


def _write_history(path, history, objectives) -> None:
    rows = [["epoch", "train_loss", "val_loss"] + [f"val_loss[{o}]" for o in objectives] + ["seconds"]]
    for h in history:
        per = h.get("val_loss_per_output", [""] * len(objectives))
        rows.append([h["epoch"], repr(h["train_loss"]), repr(h.get("val_loss", ""))] + [repr(v) for v in per]
                    + [f"{h['seconds']:.3f}"])
    atomic_write_text(path, "".join(",".join(map(str, r)) + "\n" for r in rows))


def cmd_eval(args) -> int:
    ev = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.dataset)
    missing = [o for o in ev.objectives if o not in ds.metric_names]
    if missing:
        raise DatasetError(f"dataset lacks metric column(s) {missing} that the checkpoint predicts")
    strings = dataset_strings(ds, ev.macro, ev.traversal)
    train, val, test = split_indices(len(ds), args.split_seed)
    if args.check_vocab:
        # the checkpoint's vocab must be the one this dataset's train split produces
        digest = NetStringTokenizer().fit([strings[i] for i in train]).vocab_.digest
        if digest != ev.vocab.digest:
            raise CheckpointError(f"vocabulary digest mismatch: checkpoint {ev.vocab.digest}, dataset {digest}; "
                                  "pass --no-check-vocab to evaluate on a foreign dataset")
    rows = {"train": train, "val": val, "test": test, "all": np.arange(len(ds))}[args.split]
    pred = ev.predict_strings([strings[i] for i in rows])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs, reports = [], {}
    for j, name in enumerate(ev.objectives):
        true = ds.column(name)[rows]
        report, pairs = correlation_report(pred[:, j], true)
        path = out_dir / f"scatter_{name.replace('@', '_at_')}.csv"
        write_scatter_csv(path, report, pairs)
        outputs.append(str(path))
        reports[name] = report.to_dict()
        print(f"{name}: kendall_tau={report.kendall_tau:.4f} pearson_r={report.pearson_r:.4f} n={report.n}")
    manifest = _manifest_path(out_dir, directory=True)
    report_path = out_dir / "report.json"
    atomic_write_text(report_path, json.dumps({"split": args.split, "metrics": reports,
                                               "manifest": os.path.basename(manifest)}, indent=2, sort_keys=True))
    outputs.append(str(report_path))
    return _finish(args, "eval", [args.checkpoint, args.dataset], outputs, manifest)


def cmd_search(args) -> int:
    ds = read_dataset(args.dataset) if args.dataset else None
    try:
        constraints = [parse_constraint(spec, ds) for spec in args.constraint]
    except SearchError as exc:
        raise UsageError(str(exc)) from None
    evaluator = load_checkpoint(args.checkpoint) if args.checkpoint else None
    cfg = SearchConfig(population_size=args.population, tournament_size=args.tournament, cycles=args.cycles,
                       seed=args.seed, space=args.space, fitness=args.fitness)
    best, log = regularized_evolution(cfg, constraints=constraints, evaluator=evaluator)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _manifest_path(out_dir, directory=True)
    log_path, summary_path = out_dir / "search_log.jsonl", out_dir / "summary.json"
    log.to_jsonl(log_path)
    summary = log.summary(evaluator.macro if evaluator else MacroConfig())
    summary["manifest"] = os.path.basename(manifest)
    atomic_write_text(summary_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for c in constraints:
        print(f"constraint {c}")
    if best is None:
        print(log.error)
    else:
        print(f"best {best} fitness={log.best_entry()['fitness']:.4f} "
              f"({log.n_feasible}/{len(log.entries)} feasible, {log.phase_seconds['total']:.2f}s)")
    inputs = [p for p in (args.checkpoint, args.dataset) if p]
    code = _finish(args, "search", inputs, [str(log_path), str(summary_path)], manifest)
    return 1 if best is None else code


def cmd_net2str(args) -> int:
    try:
        arch = parse_arch(args.arch)
    except (ValueError, IndexError, TypeError) as exc:
        raise UsageError(f"invalid architecture id {args.arch!r}: {exc}") from None
    sys.stdout.write(arch_to_string(arch, _macro(args), args.traversal) + "\n")
    return 0


def cmd_grad_check(args) -> int:
    cfg = tiny_config(vocab_size=args.vocab_size, k_outputs=args.k_outputs)
    tokens, targets = tiny_sample(cfg, seed=args.seed)
    dtype = np.dtype(args.dtype)
    worst, per_group = grad_check(cfg, tokens, targets, eps=args.eps, coords_per_group=args.coords,
                                  seed=args.seed, dtype=dtype)
    tol = args.tolerance if args.tolerance is not None else (1e-4 if dtype == np.float64 else 1e-2)
    if args.verbose:
        for name, err in per_group.items():
            print(f"  {name:16s} {err:.3e}")
    status = "PASS" if worst < tol else "FAIL"
    print(f"max relative error {worst:.3e} ({args.dtype}, tolerance {tol:g}): {status}")
    return 0 if worst < tol else 1


def _finish(args, command, inputs, outputs, manifest_path) -> int:
    RunManifest(command, _config_of(args), getattr(args, "seed", None), list(map(str, inputs)),
                list(map(str, outputs)), wall_seconds=time.perf_counter() - args._t0).write(manifest_path)
    return 0


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="archeval", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of option defaults; explicit flags override it")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-dataset", help="sample architectures and compute oracle metrics")
    p.add_argument("--space", choices=[s.value for s in SpaceId], default="tss")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profiles-dir")
    p.add_argument("--latency-device", choices=DEVICE_NAMES, default="edgegpu")
    p.add_argument("--latency-noise", type=float, help="override the device profile's noise sigma")
    p.add_argument("--accuracy-noise", type=float, default=3.0)
    p.add_argument("--macro-config", help="JSON macro skeleton config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train an evaluator on dataset objectives")
    p.add_argument("--dataset", required=True)
    p.add_argument("--objectives", required=True, help="comma separated metric names, e.g. accuracy,memory")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--ffn-dim", type=int, default=256)
    p.add_argument("--max-len", type=int, default=512)
    p.add_argument("--max-tokens", type=int, help="truncate token sequences below --max-len")
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-schedule", choices=["constant", "cosine"], default="constant")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="correlation report and scatter CSVs for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--no-check-vocab", dest="check_vocab", action="store_false")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("search", help="regularized evolution with predicted constraints")
    p.add_argument("--space", choices=[s.value for s in SpaceId], default="tss")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", help="dataset for auto-mean / auto-median thresholds")
    p.add_argument("--constraint", action="append", default=[],
                   help="metric<=value|auto-mean|auto-median (repeatable)")
    p.add_argument("--cycles", type=int, default=500)
    p.add_argument("--population", type=int, default=25)
    p.add_argument("--tournament", type=int, default=5)
    p.add_argument("--fitness", choices=["synthetic_proxy", "evaluator_accuracy"], default="synthetic_proxy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("net2str", help="print the net string of an architecture id")
    p.add_argument("arch", help="tss/<i> or sss/<i>")
    p.add_argument("--traversal", choices=["postorder_dfs", "bfs"], default="postorder_dfs")
    p.add_argument("--macro-config")
    p.set_defaults(func=cmd_net2str)

    p = sub.add_parser("grad-check", help="finite-difference check of the evaluator backward pass")
    p.add_argument("--dtype", choices=["float64", "float32"], default="float64")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--coords", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=10)
    p.add_argument("--k-outputs", type=int, default=2)
    p.add_argument("--tolerance", type=float)
    p.set_defaults(func=cmd_grad_check)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            with open(known.config, encoding="utf-8") as fh:
                defaults = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config {known.config}: {exc}")
        if not isinstance(defaults, dict):
            parser.error("--config must hold a JSON object")
        defaults = {k.replace("-", "_"): v for k, v in defaults.items()}
        subparsers = parser._subparsers._group_actions[0].choices
        command = next((a for a in argv if a in subparsers), None)
        if command is not None:
            # file values become defaults, so explicit flags still win
            sub = subparsers[command]
            dests = {a.dest for a in sub._actions}
            unknown = sorted(set(defaults) - dests)
            if unknown:
                parser.error(f"unknown keys in --config for {command}: {unknown}")
            sub.set_defaults(**defaults)
            for action in sub._actions:
                if action.dest in defaults:
                    action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args._t0 = time.perf_counter()
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"archeval {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, SearchError, TrainingDivergedError, GraphError, OSError,
            ValueError) as exc:
        print(f"archeval {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
