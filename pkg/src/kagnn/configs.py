"""Run-config files and the bundled tuned hyperparameters.

A run-config file is JSON with two optional sections::

    {"model": {"layer_kind": "KAGCN", "num_layers": 2, "hidden_dim": 39, ...},
     "train": {"learning_rate": 0.0069, "patience": 20, ...}}

``in_dim``/``out_dim`` may be left out; they are filled in from the dataset.
"""
from __future__ import annotations

import json
from importlib import resources

from .errors import ConfigError
from .models import ModelConfig
from .train import TrainConfig, default_model_config

TUNED_FILE = "tuned_configs.json"


def read_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    if not isinstance(payload, dict) or set(payload) - {"model", "train"}:
        raise ConfigError(f"config file {path} must be an object with 'model' and/or 'train' sections")
    return {"model": dict(payload.get("model") or {}), "train": dict(payload.get("train") or {})}


def write_config_file(path, model_config, train_config):
    model = model_config.to_dict() if isinstance(model_config, ModelConfig) else dict(model_config)
    train = train_config.to_dict() if isinstance(train_config, TrainConfig) else dict(train_config)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"model": model, "train": train}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def resolve_configs(task, in_dim, out_dim, model_kind=None, file_values=None, overrides=None):
    """Merge defaults < config file < explicit overrides into validated configs.

    ``overrides`` has the same two sections as a config file; ``None`` values
    are treated as "not given".
    """
    file_values = file_values or {"model": {}, "train": {}}
    overrides = overrides or {}
    model_vals = {**file_values.get("model", {}),
                  **{k: v for k, v in overrides.get("model", {}).items() if v is not None}}
    kind = model_vals.pop("layer_kind", None) or model_kind
    if model_kind is not None and kind != model_kind:
        kind = model_kind
    if kind is None:
        raise ConfigError("no model kind given (flag or config file)")
    for key in ("in_dim", "out_dim"):
        value = model_vals.pop(key, None)
        expected = in_dim if key == "in_dim" else out_dim
        if value is not None and int(value) != expected:
            raise ConfigError(f"config {key}={value} but the dataset needs {expected}")
    model_vals.pop("head", None)
    model = default_model_config(kind, task, in_dim, out_dim, **model_vals).validate()
    train_vals = {**file_values.get("train", {}),
                  **{k: v for k, v in overrides.get("train", {}).items() if v is not None}}
    for key in ("loss_kind", "metric_kind"):
        train_vals.pop(key, None)
    # a short epoch cap without an explicit patience shortens the patience too
    cap = train_vals.get("max_epochs")
    if cap is not None and "patience" not in train_vals:
        train_vals["patience"] = min(TrainConfig.patience, int(cap))
    train = TrainConfig.for_task(task, **train_vals).validate()
    return model, train


def tuned_table():
    """Bundled tuned hyperparameters: list of dicts with layer_kind, task,
    learning_rate, num_layers, hidden_dim, dropout, grid_size, spline_order."""
    text = resources.files("kagnn").joinpath("data_files", TUNED_FILE).read_text(encoding="utf-8")
    return json.loads(text)


def tuned_config(layer_kind, task, in_dim, out_dim):
    """``(ModelConfig, TrainConfig)`` for a bundled tuned entry."""
    for row in tuned_table():
        if row["layer_kind"] == layer_kind and row["task"] == task:
            values = {k: v for k, v in row.items() if k not in ("layer_kind", "task", "learning_rate")}
            model = default_model_config(layer_kind, task, in_dim, out_dim, **values)
            return model.validate(strict_ranges=True), TrainConfig.for_task(
                task, learning_rate=row["learning_rate"])
    raise ConfigError(f"no tuned config for {layer_kind} on {task!r}")
