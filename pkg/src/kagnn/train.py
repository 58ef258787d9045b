"""Adam, the early-stopping training loop, metrics and seed benchmarking."""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import backward, cross_entropy, mse_loss, no_grad
from .data import FeatureScaler, get_task, split_dataset
from .errors import ConfigError, DimensionError
from .graph import batch_graphs
from .models import ModelConfig, build_model, check_head_target

# order of the independent streams spawned from one seed
RNG_STREAMS = ("init", "shuffle", "dropout")


def rng_streams(seed):
    """Split one integer seed into named, independent generators.

    ``SeedSequence(seed).spawn(3)`` yields the init, shuffle and dropout
    streams in that order.
    """
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(RNG_STREAMS, children)}


# -- metrics ---------------------------------------------------------------

def weighted_f1(y_true, y_pred, n_classes=None):
    """Per-class F1 averaged with weights equal to true-class support."""
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.size == 0:
        raise ValueError("weighted_f1 of an empty label vector")
    if y_true.shape != y_pred.shape:
        raise DimensionError(f"{y_true.size} true labels vs {y_pred.size} predictions")
    if n_classes is None:
        n_classes = int(max(y_true.max(), y_pred.max())) + 1
    if y_true.min() < 0 or y_pred.min() < 0 or max(y_true.max(), y_pred.max()) >= n_classes:
        raise ValueError(f"class ids must lie in [0, {n_classes})")
    cm = np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes)
    cm = cm.reshape(n_classes, n_classes).astype(np.float64)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    denom = support + predicted
    # F1 = 2 tp / (2 tp + fp + fn) = 2 tp / (support + predicted)
    f1 = np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float((f1 * support).sum() / support.sum())


def _pair(y_true, y_pred):
    a = np.asarray(y_true, dtype=np.float64).reshape(-1)
    b = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError("metric of an empty vector")
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def mse(y_true, y_pred):
    a, b = _pair(y_true, y_pred)
    return float(np.mean((a - b) ** 2))


def mae(y_true, y_pred):
    a, b = _pair(y_true, y_pred)
    return float(np.mean(np.abs(a - b)))


METRICS = {"weighted_f1": "F1", "mse": "MSE", "mae": "MAE"}
HIGHER_IS_BETTER = {"weighted_f1": True, "mse": False, "mae": False}
IMPROVEMENT_TOL = 1e-12
# losses beyond this on [-1, 1]-scaled inputs only occur once a run has blown up
DIVERGENCE_LOSS = 1e12


def improved(metric_kind, new, best):
    if best is None:
        return math.isfinite(new)
    if HIGHER_IS_BETTER[metric_kind]:
        return new > best + IMPROVEMENT_TOL
    return new < best - IMPROVEMENT_TOL


# -- optimizer ---------------------------------------------------------------

def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update of the arrays in ``params`` (in place).

    ``state`` is ``{"t": 0, "m": [...], "v": [...]}``; empty moment lists are
    filled with zeros on the first call.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    b1, b2 = betas
    if not state.get("m"):
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state.setdefault("t", 0)
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise DimensionError(f"parameter {i} has shape {p.shape} but gradient {g.shape}")
        m = state["m"][i] = b1 * state["m"][i] + (1.0 - b1) * g
        v = state["v"][i] = b2 * state["v"][i] + (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    def __init__(self, tensors, lr, betas=(0.9, 0.999), eps=1e-8, clip_norm=10.0):
        self.tensors = list(tensors)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = {"t": 0, "m": [], "v": []}

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None

    def step(self):
        """Apply one update; returns the pre-clipping global gradient norm."""
        grads = [np.zeros_like(t.data) if t.grad is None else t.grad for t in self.tensors]
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if not math.isfinite(norm):
            return norm
        if self.clip_norm is not None and norm > self.clip_norm:
            grads = [g * (self.clip_norm / norm) for g in grads]
        adam_step([t.data for t in self.tensors], grads, self.state, self.lr, self.betas, self.eps)
        return norm


# -- configs and results -----------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 500
    patience: int = 20
    batch_size: int = 32
    seed: int = 0
    loss_kind: str = "cross_entropy"
    metric_kind: str = "weighted_f1"
    restore_best: bool = True

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("max_epochs, batch_size and patience must be positive")
        if self.patience > self.max_epochs:
            raise ConfigError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if self.loss_kind not in ("cross_entropy", "mse"):
            raise ConfigError(f"unknown loss {self.loss_kind!r}")
        if self.metric_kind not in METRICS:
            raise ConfigError(f"unknown metric {self.metric_kind!r}")
        return self

    @classmethod
    def for_task(cls, task, **overrides):
        spec = get_task(task)
        return cls(loss_kind=spec.loss, metric_kind=spec.metric, **overrides)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunResult:
    seed: int
    status: str = "ok"
    train_loss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    best_val_metric: float = float("nan")
    test_metric: float = float("nan")
    metric_kind: str = "weighted_f1"
    restored_best: bool = True
    wall_time: float = 0.0

    def to_dict(self):
        return asdict(self)


# -- data plumbing -----------------------------------------------------------

def task_dims(records, task, n_classes=None):
    """``(in_dim, out_dim)`` for a model on ``task`` over ``records``."""
    spec = get_task(task)
    if not records:
        raise ConfigError("empty dataset")
    in_dim = records[0].graph.x.shape[1]
    for rec in records:
        if rec.graph.target_kind != spec.target_kind:
            raise ConfigError(f"record {rec.id!r} has {rec.graph.target_kind!r} targets; "
                              f"task {task!r} needs {spec.target_kind!r}")
    if spec.is_classification:
        if n_classes is None:
            n_classes = 1 + max(int(np.max(r.graph.target)) for r in records)
        return in_dim, n_classes
    if spec.target_kind == "edge_scalars":
        return in_dim, 1
    target = np.asarray(records[0].graph.target)
    return in_dim, int(target.shape[-1])


def scale_splits(records, split):
    """Fit the feature scaler on the training part and apply it to all three."""
    train_idx, val_idx, test_idx = split
    scaler = FeatureScaler.fit([records[i] for i in train_idx])
    parts = tuple([scaler.transform(records[i]) for i in idx] for idx in split)
    return parts, scaler


def iterate_batches(records, batch_size, rng=None):
    order = np.arange(len(records)) if rng is None else rng.permutation(len(records))
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        yield chunk, batch_graphs([r.graph for r in chunk])


def compute_loss(pred, g, loss_kind):
    if loss_kind == "cross_entropy":
        return cross_entropy(pred, g.target)
    return mse_loss(pred, g.target)


def predict(model, records, batch_size=32, ingest_log=None, phase="eval"):
    """Concatenated eval-mode predictions and targets over ``records``."""
    preds, targets = [], []
    with no_grad():
        for chunk, g in iterate_batches(records, batch_size):
            if ingest_log is not None:
                ingest_log.extend((phase, r.id) for r in chunk)
            preds.append(model(g, training=False).data)
            targets.append(np.asarray(g.target))
    return np.concatenate(preds), np.concatenate(targets)


def evaluate(model, records, metric_kind, batch_size=32, ingest_log=None, phase="eval"):
    pred, target = predict(model, records, batch_size, ingest_log, phase)
    if not np.all(np.isfinite(pred)):
        return float("nan")
    if metric_kind == "weighted_f1":
        n_classes = pred.shape[1]
        return weighted_f1(target, pred.argmax(axis=1), max(n_classes, int(target.max()) + 1))
    if metric_kind == "mse":
        return mse(target, pred)
    return mae(target, pred)


# -- training loop -----------------------------------------------------------

def train(model, train_records, val_records, test_records, cfg, ingest_log=None, epoch_log=None):
    """Mini-batch Adam with early stopping on the validation metric.

    Training stops once the validation metric has not improved for
    ``cfg.patience`` consecutive epochs, or at ``cfg.max_epochs``. The
    parameters from the best validation epoch are restored before the test
    split is evaluated, exactly once. A non-finite loss, gradient or
    validation metric, or a loss above ``DIVERGENCE_LOSS``, ends the run
    with status ``"unstable"``.

    ``ingest_log`` (a list) receives ``(phase, record_id)`` for every record
    fed to the model; ``epoch_log`` (a path) receives one tab-separated line
    per epoch.
    """
    cfg.validate()
    if not train_records or not val_records:
        raise ConfigError("training needs non-empty train and validation splits")
    streams = rng_streams(cfg.seed)
    shuffle_rng, dropout_rng = streams["shuffle"], streams["dropout"]
    opt = Adam(model.parameters(), cfg.learning_rate)
    result = RunResult(seed=cfg.seed, metric_kind=cfg.metric_kind, restored_best=cfg.restore_best)
    started = time.perf_counter()
    best_state, best, bad_epochs = None, None, 0
    log_fh = open(epoch_log, "w", encoding="utf-8") if epoch_log else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            total, count = 0.0, 0
            for chunk, g in iterate_batches(train_records, cfg.batch_size, shuffle_rng):
                if ingest_log is not None:
                    ingest_log.extend(("train", r.id) for r in chunk)
                opt.zero_grad()
                loss = compute_loss(model(g, training=True, rng=dropout_rng), g, cfg.loss_kind)
                value = loss.item()
                if not math.isfinite(value) or abs(value) > DIVERGENCE_LOSS:
                    result.status = "unstable"
                    break
                backward(loss)
                if not math.isfinite(opt.step()):
                    result.status = "unstable"
                    break
                total += value * len(chunk)
                count += len(chunk)
            if result.status == "unstable":
                result.stop_epoch = epoch
                break
            val = evaluate(model, val_records, cfg.metric_kind, cfg.batch_size, ingest_log, "val")
            result.train_loss.append(total / count)
            result.val_metric.append(val)
            result.stop_epoch = epoch
            if log_fh is not None:
                log_fh.write(f"{epoch}\t{total / count!r}\t{val!r}\n")
            if not math.isfinite(val):
                result.status = "unstable"
                break
            if improved(cfg.metric_kind, val, best):
                best, bad_epochs = val, 0
                result.best_epoch = epoch
                best_state = model.state_dict()
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    break
    finally:
        if log_fh is not None:
            log_fh.close()
    if result.status == "ok":
        result.best_val_metric = best
        if cfg.restore_best and best_state is not None:
            model.load_state_dict(best_state)
        if test_records:
            result.test_metric = evaluate(model, test_records, cfg.metric_kind, cfg.batch_size,
                                          ingest_log, "test")
    result.wall_time = time.perf_counter() - started
    return result


# -- experiments ---------------------------------------------------------------

def run_experiment(model_config, train_cfg, splits, ingest_log=None, epoch_log=None):
    """Build a model from ``train_cfg.seed`` and train it on ``(train, val, test)``."""
    check_head_target(model_config.head, splits[0][0].graph.target_kind)
    model = build_model(model_config, rng_streams(train_cfg.seed)["init"])
    result = train(model, *splits, train_cfg, ingest_log=ingest_log, epoch_log=epoch_log)
    return model, result


def _seed_run(args):
    model_config, train_cfg, splits = args
    return run_experiment(model_config, train_cfg, splits)[1]


@dataclass
class BenchmarkRow:
    task: str
    model: str
    metric: str
    mean: float
    std: float
    values: list
    seeds: list
    status: str

    def format(self):
        if self.status == "unstable":
            cell = "Unstable"
        else:
            cell = f"{self.mean:.3f}±{self.std:.3f}"
        return f"{self.task}\t{self.model}\t{cell}\t{METRICS[self.metric]}"


def summarize(task, model_kind, results):
    """Mean and sample std of the test metric; "unstable" when any seed
    diverged or the spread exceeds the mean."""
    metric = results[0].metric_kind
    values = [r.test_metric for r in results]
    unstable = any(r.status != "ok" for r in results) or not all(map(math.isfinite, values))
    mean = float(np.mean(values)) if values else float("nan")
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    if not unstable and std > abs(mean):
        unstable = True
    return BenchmarkRow(task, model_kind, metric, mean, std, values,
                        [r.seed for r in results], "unstable" if unstable else "ok")


def run_benchmark(model_configs, task, splits, train_cfg, n_seeds=3, seeds=None, jobs=1):
    """Train every model config once per seed and aggregate the test metric.

    ``model_configs`` maps a display name to a ModelConfig. Seeds default to
    ``train_cfg.seed + 0, 1, ..., n_seeds - 1``. Returns ``(rows, results)``.
    """
    if seeds is None:
        seeds = [train_cfg.seed + i for i in range(n_seeds)]
    jobs_list = []
    for name, mcfg in model_configs.items():
        for s in seeds:
            cfg = TrainConfig(**{**train_cfg.to_dict(), "seed": s})
            jobs_list.append((name, (mcfg, cfg, splits)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_seed_run, [a for _, a in jobs_list]))
    else:
        outcomes = [_seed_run(a) for _, a in jobs_list]
    rows, results = [], {}
    for name in model_configs:
        res = [r for (n, _), r in zip(jobs_list, outcomes) if n == name]
        results[name] = res
        rows.append(summarize(task, name, res))
    return rows, results


def format_table(rows):
    header = "task\tmodel\tmean±std\tmetric"
    return "\n".join([header] + [r.format() for r in rows])


def write_result(path, result, extra=None):
    payload = result.to_dict()
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def default_model_config(kind, task, in_dim, out_dim, **overrides):
    spec = get_task(task)
    kan = kind.startswith("KA")
    params = dict(layer_kind=kind, in_dim=in_dim, out_dim=out_dim, head=spec.head,
                  num_layers=2, hidden_dim=32, dropout=0.0,
                  grid_size=4 if kan else None, spline_order=3 if kan else None)
    params.update(overrides)
    if not kan:
        params["grid_size"] = params["spline_order"] = None
    return ModelConfig(**params)


def make_splits(records, task, split_seed=0, stratify=None):
    """Scaled (train, val, test) record lists plus the fitted scaler.

    Classification tasks with graph labels are stratified on the label by
    default.
    """
    from .data import SplitSpec
    spec = get_task(task)
    if stratify is None and spec.target_kind == "graph_label":
        stratify = "target"
    split = split_dataset(records, SplitSpec(seed=split_seed, stratify_key=stratify))
    parts, scaler = scale_splits(records, split)
    return parts, scaler, split
