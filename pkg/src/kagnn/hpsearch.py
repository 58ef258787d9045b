"""Seeded random search over model and optimizer hyperparameters."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import get_task
from .errors import ConfigError, SearchFailedError
from .models import KAN_KINDS, build_model, check_head_target
from .train import TrainConfig, default_model_config, improved, rng_streams, task_dims, train

DEFAULT_TRIALS = 40


@dataclass(frozen=True)
class SearchSpace:
    lr: tuple = (1e-4, 1e-2)
    layers: tuple = (1, 3)
    hidden: tuple = (16, 64)
    dropout: tuple = (0.0, 0.5)
    grid: tuple = (3, 5)
    spline: tuple = (3, 5)

    def validate(self):
        for name in ("lr", "layers", "hidden", "dropout", "grid", "spline"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"search range {name} is empty: [{lo}, {hi}]")
        if self.lr[0] <= 0:
            raise ConfigError("learning-rate range must be positive")
        if not (0 <= self.dropout[0] and self.dropout[1] < 1):
            raise ConfigError("dropout range must lie in [0, 1)")
        if self.layers[0] < 1 or self.hidden[0] < 1 or self.grid[0] < 1 or self.spline[0] < 1:
            raise ConfigError("integer ranges must start at 1 or above")
        return self


def sample_config(space, rng, model_kind="KAGCN", task="node-class", in_dim=1, out_dim=1,
                  base_train=None):
    """Draw one ``(ModelConfig, TrainConfig)``.

    Every call consumes the same six draws in a fixed order (lr, layers,
    hidden, dropout, grid, spline) so the sequence does not depend on the
    model kind; grid and spline are dropped for MLP kinds.
    """
    space.validate()
    lo, hi = space.lr
    lr = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    layers = int(rng.integers(space.layers[0], space.layers[1] + 1))
    hidden = int(rng.integers(space.hidden[0], space.hidden[1] + 1))
    dropout = float(rng.uniform(*space.dropout))
    grid = int(rng.integers(space.grid[0], space.grid[1] + 1))
    spline = int(rng.integers(space.spline[0], space.spline[1] + 1))
    kan = model_kind in KAN_KINDS
    model = default_model_config(model_kind, task, in_dim, out_dim, num_layers=layers,
                                 hidden_dim=hidden, dropout=dropout,
                                 grid_size=grid if kan else None,
                                 spline_order=spline if kan else None)
    base = base_train.to_dict() if base_train is not None else TrainConfig.for_task(task).to_dict()
    base["learning_rate"] = lr
    return model, TrainConfig(**base)


@dataclass
class Trial:
    index: int
    model_config: object
    train_config: object
    val_metric: float = float("nan")
    stop_epoch: int = 0
    status: str = "ok"
    ingested: list = field(default_factory=list, repr=False)


def default_trainer(model_config, train_config, train_records, val_records, ingest_log):
    """Build and train on train/val only; the test split is never passed in."""
    model = build_model(model_config, rng_streams(train_config.seed)["init"])
    return train(model, train_records, val_records, [], train_config, ingest_log=ingest_log)


def _run_trial(args):
    index, mcfg, tcfg, train_records, val_records, trainer = args
    log = []
    trial = Trial(index, mcfg, tcfg)
    try:
        result = trainer(mcfg, tcfg, train_records, val_records, log)
        trial.val_metric = float(result.best_val_metric)
        trial.stop_epoch = int(result.stop_epoch)
        trial.status = result.status
    except FloatingPointError:
        trial.status = "unstable"
    if trial.status == "ok" and not math.isfinite(trial.val_metric):
        trial.status = "unstable"
    trial.ingested = log
    return trial


@dataclass
class SearchResult:
    best: Trial
    trials: list
    metric_kind: str


def run_search(space, task, splits, n_trials=DEFAULT_TRIALS, seed=0, model_kind="KAGCN",
               in_dim=None, out_dim=None, base_train=None, trainer=None, ingest_log=None, jobs=1):
    """Train ``n_trials`` sampled configs and keep the best by validation metric.

    ``splits`` is ``(train, val)`` or ``(train, val, test)``; a test part is
    ignored. Every trial trains with ``base_train.seed`` so that trials
    differ only in their hyperparameters. ``trainer`` replaces the default
    build-and-train step and must return an object with ``best_val_metric``,
    ``stop_epoch`` and ``status``.
    """
    if n_trials < 1:
        raise ConfigError(f"n_trials must be positive, got {n_trials}")
    train_records, val_records = splits[0], splits[1]
    if not train_records or not val_records:
        raise ConfigError("search needs non-empty train and validation splits")
    spec = get_task(task)
    check_head_target(spec.head, train_records[0].graph.target_kind)
    if in_dim is None or out_dim is None:
        in_dim, out_dim = task_dims(list(train_records) + list(val_records), task)
    base_train = base_train or TrainConfig.for_task(task, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    jobs_list = []
    for index in range(n_trials):
        mcfg, tcfg = sample_config(space, rng, model_kind, task, in_dim, out_dim, base_train)
        jobs_list.append((index, mcfg, tcfg, train_records, val_records, trainer or default_trainer))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trials = list(pool.map(_run_trial, jobs_list))
    else:
        trials = [_run_trial(a) for a in jobs_list]
    trials.sort(key=lambda t: t.index)
    if ingest_log is not None:
        for t in trials:
            ingest_log.extend(t.ingested)
    best = None
    for t in trials:
        if t.status == "ok" and (best is None or improved(spec.metric, t.val_metric, best.val_metric)):
            best = t
    if best is None:
        raise SearchFailedError(f"all {n_trials} trials were unstable", trials=trials)
    return SearchResult(best, trials, spec.metric)


TABLE_COLUMNS = ("trial", "learning_rate", "num_layers", "hidden_dim", "dropout", "grid_size",
                 "spline_order", "val_metric", "stop_epoch", "status")


def format_trial_table(trials):
    lines = ["\t".join(TABLE_COLUMNS)]
    for t in trials:
        m = t.model_config
        cells = [t.index, repr(t.train_config.learning_rate), m.num_layers, m.hidden_dim,
                 repr(m.dropout), "-" if m.grid_size is None else m.grid_size,
                 "-" if m.spline_order is None else m.spline_order, repr(t.val_metric),
                 t.stop_epoch, t.status]
        lines.append("\t".join(str(c) for c in cells))
    return "\n".join(lines) + "\n"


def write_trial_table(path, trials):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_trial_table(trials))


__all__ = ["SearchSpace", "sample_config", "run_search", "SearchResult", "Trial",
           "format_trial_table", "write_trial_table", "DEFAULT_TRIALS"]
