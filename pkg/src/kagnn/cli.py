"""Command-line entry point: ``kagnn {synth,train,eval,benchmark,hpsearch}``.

Exit codes: 0 success, 2 usage, config or data error, 3 unstable training
or failed search.

Seeding: ``--seed`` fixes the data split (``SplitSpec(seed=...)``) and the
training run, whose init/shuffle/dropout generators are spawned from it.
Benchmarks train with seeds ``seed, seed + 1, ...`` on the same split.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import warnings

from . import __version__
from .configs import read_config_file, resolve_configs, write_config_file
from .data import FeatureScaler, SYNTH_TASKS, TASKS, load_dataset, save_dataset, synth_generate
from .errors import KagnnError, SearchFailedError
from .hpsearch import DEFAULT_TRIALS, SearchSpace, run_search, write_trial_table
from .models import LAYER_KINDS, load_checkpoint, save_checkpoint
from .train import (METRICS, evaluate, format_table, make_splits, run_benchmark,
                    run_experiment, task_dims, write_result)

EXIT_OK, EXIT_USAGE, EXIT_UNSTABLE = 0, 2, 3
SPLIT_NAMES = ("train", "val", "test")


class UsageError(KagnnError):
    pass


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args):
    try:
        os.makedirs(args.out_dir, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {args.out_dir}: {exc.strerror}") from None
    return args.out_dir


def _load(path):
    if not os.path.exists(path):
        raise UsageError(f"dataset not found: {path}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        records = load_dataset(path)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    if not records:
        raise UsageError(f"dataset {path} is empty")
    return records


def _manifest(args, out_dir, extra):
    """Write the run manifest before any training starts."""
    payload = {
        "subcommand": args.command,
        "version": __version__,
        "seed": args.seed,
        "argv": sys.argv[1:],
        **extra,
    }
    path = os.path.join(out_dir, "manifest.json")
    _write_json(path, payload)
    return path


def _dataset_entry(path):
    return {"path": os.path.abspath(path), "sha256": file_sha256(path)}


def _overrides(args):
    model = {
        "num_layers": getattr(args, "num_layers", None),
        "hidden_dim": getattr(args, "hidden_dim", None),
        "dropout": getattr(args, "dropout", None),
        "grid_size": getattr(args, "grid_size", None),
        "spline_order": getattr(args, "spline_order", None),
    }
    train = {
        "learning_rate": getattr(args, "lr", None),
        "max_epochs": args.max_epochs,
        "patience": args.patience,
        "batch_size": args.batch_size,
        "seed": args.seed,
    }
    if getattr(args, "no_restore_best", False):
        train["restore_best"] = False
    return {"model": model, "train": train}


def _file_values(args):
    return read_config_file(args.config) if getattr(args, "config", None) else None


def _split_info(split, records, seed):
    return {"seed": seed, "fractions": [0.8, 0.1, 0.1],
            **{name: [records[i].id for i in idx] for name, idx in zip(SPLIT_NAMES, split)}}


def _prepare(args, records):
    splits, scaler, split = make_splits(records, args.task, split_seed=args.seed)
    in_dim, out_dim = task_dims(records, args.task)
    return splits, scaler, split, in_dim, out_dim


# -- subcommands -------------------------------------------------------------

def cmd_synth(args):
    records = synth_generate(args.task, args.n, (args.min_nodes, args.max_nodes), seed=args.seed)
    try:
        save_dataset(records, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc.strerror}") from None
    print(f"wrote {len(records)} {args.task} records to {args.out}")
    return EXIT_OK


def cmd_train(args):
    if args.manifest:
        _apply_manifest(args)
    if not args.data or not args.task:
        raise UsageError("train needs --data and --task (or --manifest)")
    records = _load(args.data)
    splits, scaler, split, in_dim, out_dim = _prepare(args, records)
    mcfg, tcfg = resolve_configs(args.task, in_dim, out_dim, args.model, _file_values(args), _overrides(args))
    out = _out_dir(args)
    paths = {name: os.path.join(out, name) for name in
             ("epochs.tsv", "checkpoint.npz", "result.json", "split.json")}
    _write_json(paths["split.json"], _split_info(split, records, args.seed))
    _manifest(args, out, {
        "task": args.task,
        "dataset": _dataset_entry(args.data),
        "config": {"model": mcfg.to_dict(), "train": tcfg.to_dict()},
        "artifacts": paths,
    })
    model, result = run_experiment(mcfg, tcfg, splits, epoch_log=paths["epochs.tsv"])
    meta = {"task": args.task, "batch_size": tcfg.batch_size, "metric_kind": tcfg.metric_kind,
            "split": _split_info(split, records, args.seed), "train_config": tcfg.to_dict(),
            "restored_best": result.restored_best}
    save_checkpoint(paths["checkpoint.npz"], model, extras=scaler.to_arrays(), meta=meta)
    write_result(paths["result.json"], result, {"task": args.task, "model": mcfg.layer_kind})
    if result.status != "ok":
        print(f"unstable: training diverged at epoch {result.stop_epoch}", file=sys.stderr)
        return EXIT_UNSTABLE
    label = METRICS[tcfg.metric_kind]
    print(f"{mcfg.layer_kind}\t{args.task}\tstop {result.stop_epoch}\tbest {result.best_epoch}\t"
          f"val {label} {result.best_val_metric!r}\ttest {label} {result.test_metric!r}")
    return EXIT_OK


def _apply_manifest(args):
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("subcommand") != "train":
        raise UsageError(f"{args.manifest} is not a train manifest")
    data = manifest["dataset"]
    if args.data is None:
        args.data = data["path"]
    if os.path.exists(args.data) and file_sha256(args.data) != data["sha256"]:
        raise UsageError(f"dataset {args.data} does not match the manifest hash")
    args.task = args.task or manifest["task"]
    model = dict(manifest["config"]["model"])
    args.model = args.model or model["layer_kind"]
    train = manifest["config"]["train"]
    if args.seed is None:
        args.seed = train["seed"]
    config_path = os.path.join(_out_dir(args), "manifest-config.json")
    write_config_file(config_path, model, train)
    if args.config is None:
        args.config = config_path


def _checkpoint_records(args, meta):
    records = _load(args.data)
    if args.split == "all":
        return records
    wanted = meta["split"][args.split]
    by_id = {r.id: r for r in records}
    missing = [rid for rid in wanted if rid not in by_id]
    if missing:
        raise UsageError(f"{len(missing)} {args.split} records from the checkpoint are not in "
                         f"{args.data} (first: {missing[0]!r})")
    return [by_id[rid] for rid in wanted]


def cmd_eval(args):
    try:
        model, extras, meta = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror}") from None
    records = _checkpoint_records(args, meta)
    scaler = FeatureScaler.from_arrays(extras)
    records = [scaler.transform(r) for r in records]
    kind = TASKS[meta["task"]].target_kind
    for r in records:
        if r.graph.target_kind != kind:
            raise UsageError(f"record {r.id!r} has {r.graph.target_kind} targets, "
                             f"checkpoint task {meta['task']!r} needs {kind}")
    batch = args.batch_size or meta["batch_size"]
    value = evaluate(model, records, meta["metric_kind"], batch)
    print(f"{METRICS[meta['metric_kind']]}\t{value!r}")
    return EXIT_OK


def cmd_benchmark(args):
    records = _load(args.data)
    splits, _, split, in_dim, out_dim = _prepare(args, records)
    kinds = [k.strip() for k in args.models.split(",") if k.strip()]
    file_values = _file_values(args)
    configs, tcfg = {}, None
    for kind in kinds:
        mcfg, tcfg = resolve_configs(args.task, in_dim, out_dim, kind, file_values, _overrides(args))
        configs[kind] = mcfg
    out = _out_dir(args)
    _write_json(os.path.join(out, "split.json"), _split_info(split, records, args.seed))
    _manifest(args, out, {
        "task": args.task,
        "dataset": _dataset_entry(args.data),
        "config": {"models": {k: c.to_dict() for k, c in configs.items()}, "train": tcfg.to_dict()},
        "seeds": [args.seed + i for i in range(args.seeds)],
    })
    rows, results = run_benchmark(configs, args.task, splits, tcfg, n_seeds=args.seeds, jobs=args.jobs)
    table = format_table(rows)
    with open(os.path.join(out, "benchmark.tsv"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    _write_json(os.path.join(out, "results.json"),
                {k: [r.to_dict() for r in v] for k, v in results.items()})
    print(table)
    return EXIT_OK


def cmd_hpsearch(args):
    records = _load(args.data)
    splits, _, split, in_dim, out_dim = _prepare(args, records)
    _, base = resolve_configs(args.task, in_dim, out_dim, args.model, _file_values(args), _overrides(args))
    out = _out_dir(args)
    _write_json(os.path.join(out, "split.json"), _split_info(split, records, args.seed))
    _manifest(args, out, {
        "task": args.task,
        "dataset": _dataset_entry(args.data),
        "config": {"model_kind": args.model, "trials": args.trials, "train": base.to_dict(),
                   "space": SearchSpace().__dict__},
    })
    try:
        res = run_search(SearchSpace(), args.task, splits[:2], n_trials=args.trials, seed=args.seed,
                         model_kind=args.model, in_dim=in_dim, out_dim=out_dim, base_train=base,
                         jobs=args.jobs)
    except SearchFailedError as exc:
        write_trial_table(os.path.join(out, "trials.tsv"), exc.trials)
        print(f"search failed: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    write_trial_table(os.path.join(out, "trials.tsv"), res.trials)
    best_path = os.path.join(out, "best_config.json")
    write_config_file(best_path, res.best.model_config, res.best.train_config)
    print(f"best trial {res.best.index}: val {METRICS[res.metric_kind]} {res.best.val_metric!r}; "
          f"config written to {best_path}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _common(parser, default_out, seed_default=0):
    parser.add_argument("--seed", type=int, default=seed_default, help="master seed (default %(default)s)")
    parser.add_argument("--out-dir", default=default_out, help="artifact directory")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes")
    parser.add_argument("--max-epochs", type=int, help="epoch cap (default 500)")
    parser.add_argument("--patience", type=int, help="early-stopping patience (default 20)")
    parser.add_argument("--batch-size", type=int, help="graphs per mini-batch (default 32)")


def _model_flags(parser):
    parser.add_argument("--config", help="JSON run-config file with 'model'/'train' sections")
    parser.add_argument("--lr", type=float, help="learning rate")
    parser.add_argument("--num-layers", type=int)
    parser.add_argument("--hidden-dim", type=int)
    parser.add_argument("--dropout", type=float)
    parser.add_argument("--grid-size", type=int)
    parser.add_argument("--spline-order", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="kagnn", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"kagnn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset file")
    p.add_argument("--task", required=True, choices=SYNTH_TASKS)
    p.add_argument("--n", type=int, required=True, help="number of graphs")
    p.add_argument("--out", required=True, help="output .jsonl path")
    p.add_argument("--min-nodes", type=int, default=8)
    p.add_argument("--max-nodes", type=int, default=30)
    _common(p, ".")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model and write run artifacts")
    p.add_argument("--data")
    p.add_argument("--task", choices=sorted(TASKS))
    p.add_argument("--model", choices=LAYER_KINDS)
    p.add_argument("--manifest", help="rerun from a previous train manifest")
    p.add_argument("--no-restore-best", action="store_true",
                   help="evaluate the last epoch instead of the best validation epoch")
    _model_flags(p)
    _common(p, "run", seed_default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLIT_NAMES + ("all",), default="test")
    _common(p, ".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("benchmark", help="mean ± std over seeds for several model kinds")
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True, choices=sorted(TASKS))
    p.add_argument("--models", required=True, help="comma-separated layer kinds")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds (default %(default)s)")
    _model_flags(p)
    _common(p, "benchmark")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("hpsearch", help="random hyperparameter search on train/val")
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True, choices=sorted(TASKS))
    p.add_argument("--model", required=True, choices=LAYER_KINDS)
    p.add_argument("--trials", type=int, default=DEFAULT_TRIALS, help="default %(default)s")
    p.add_argument("--config", help="JSON run-config file; only its 'train' section is used")
    _common(p, "hpsearch")
    p.set_defaults(func=cmd_hpsearch)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and args.manifest is None and args.seed is None:
        args.seed = 0
    try:
        if args.command == "benchmark":
            unknown = [k for k in args.models.split(",") if k.strip() and k.strip() not in LAYER_KINDS]
            if unknown:
                raise UsageError(f"unknown model kinds {unknown}; expected {list(LAYER_KINDS)}")
        code = args.func(args)
    except SearchFailedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    except (KagnnError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return code


__all__ = ["main", "build_parser", "file_sha256"]
