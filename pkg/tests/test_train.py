import numpy as np
import pytest

import kagnn.train as tr
from oracles import brute_mae, brute_mse, brute_weighted_f1
from kagnn.data import SYNTH_TASKS, synth_generate
from kagnn.errors import ConfigError, DimensionError
from kagnn.models import LAYER_KINDS
from kagnn.train import (Adam, RunResult, TrainConfig, adam_step, default_model_config, mae,
                         make_splits, mse, run_benchmark, run_experiment, summarize, task_dims,
                         train, weighted_f1)


def tiny(task="node-class", n=20, seed=0, size=(6, 10)):
    recs = synth_generate(task, n, size, seed=seed)
    splits, _, _ = make_splits(recs, task)
    in_dim, out_dim = task_dims(recs, task)
    return splits, in_dim, out_dim


# --- metrics ---------------------------------------------------------------

def test_weighted_f1_examples():
    assert weighted_f1([0, 1, 2, 1], [0, 1, 2, 1]) == 1.0
    assert weighted_f1([0, 0, 1, 1], [0, 0, 0, 0]) == 1 / 3


def test_weighted_f1_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, c = int(rng.integers(1, 40)), int(rng.integers(1, 6))
        t, p = rng.integers(0, c, n), rng.integers(0, c, n)
        assert abs(weighted_f1(t, p, c) - brute_weighted_f1(t.tolist(), p.tolist())) <= 1e-12


def test_weighted_f1_relabel_invariance():
    rng = np.random.default_rng(1)
    t, p = rng.integers(0, 5, 50), rng.integers(0, 5, 50)
    perm = rng.permutation(5)
    assert weighted_f1(perm[t], perm[p], 5) == pytest.approx(weighted_f1(t, p, 5), abs=1e-15)


def test_weighted_f1_errors():
    with pytest.raises(ValueError):
        weighted_f1([], [])
    with pytest.raises(ValueError):
        weighted_f1([0, 3], [0, 1], n_classes=2)
    with pytest.raises(DimensionError):
        weighted_f1([0, 1], [0])


def test_regression_metric_examples():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse(np.zeros(4), np.ones(4)) == 1.0
    assert mae(np.zeros(4), [2.0, -2.0, 2.0, -2.0]) == 2.0
    with pytest.raises(ValueError):
        mse([], [])
    with pytest.raises(ValueError):
        mae([], [])


def test_regression_metric_oracles():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = rng.normal(size=(2, int(rng.integers(1, 30))))
        assert abs(mse(a, b) - brute_mse(a, b)) <= 1e-12
        assert abs(mae(a, b) - brute_mae(a, b)) <= 1e-12


def test_improvement_rule():
    assert tr.improved("weighted_f1", 0.5, None)
    assert not tr.improved("weighted_f1", 0.5 + 1e-13, 0.5)
    assert tr.improved("weighted_f1", 0.6, 0.5)
    assert tr.improved("mse", 0.4, 0.5) and not tr.improved("mse", 0.6, 0.5)


# --- optimizer -------------------------------------------------------------

def test_adam_zero_gradient():
    p = [np.array([1.0, -2.0])]
    adam_step(p, [np.zeros(2)], {"t": 0, "m": [], "v": []}, lr=0.1)
    assert np.array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_is_lr():
    # the eps term shifts the step by lr * eps / |g|, below 1e-6 lr once |g| >= 1e-2
    p = [np.zeros(3)]
    adam_step(p, [np.array([1e-2, -5.0, 40.0])], {"t": 0, "m": [], "v": []}, lr=0.01)
    assert np.allclose(np.abs(p[0]), 0.01, rtol=0, atol=1e-6 * 0.01)


def scalar_adam(x, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return x


def test_adam_scalar_oracle():
    grads = [0.3, -1.2, 0.7]
    p = [np.array([0.5])]
    state = {"t": 0, "m": [], "v": []}
    for g in grads:
        adam_step(p, [np.array([g])], state, lr=0.05)
    assert abs(p[0][0] - scalar_adam(0.5, grads, 0.05)) <= 1e-12


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step([np.zeros(2)], [np.zeros(3)], {"t": 0, "m": [], "v": []}, lr=0.1)


def test_gradient_clipping():
    from kagnn.autodiff import Tensor
    t = Tensor(np.zeros(2), requires_grad=True)
    t.grad = np.array([300.0, 400.0])
    opt = Adam([t], lr=0.1, clip_norm=10.0)
    opt.step()
    assert np.allclose(opt.state["m"][0], 0.1 * np.array([6.0, 8.0]))


# --- configs ---------------------------------------------------------------

def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.max_epochs, cfg.patience) == (32, 500, 20)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(patience=30, max_epochs=10).validate()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_seed_streams_independent():
    s = tr.rng_streams(3)
    assert set(s) == {"init", "shuffle", "dropout"}
    draws = [g.random(4) for g in s.values()]
    assert not np.array_equal(draws[0], draws[1])
    assert np.array_equal(tr.rng_streams(3)["shuffle"].random(4), draws[1])


# --- training loop ---------------------------------------------------------

def scripted_val(monkeypatch, values):
    """Replace the validation metric with a fixed sequence; count test calls."""
    it = iter(values)
    calls = {"test": 0}
    real = tr.evaluate

    def fake(model, records, metric_kind, batch_size=32, ingest_log=None, phase="eval"):
        if phase == "test":
            calls["test"] += 1
            return real(model, records, metric_kind, batch_size, ingest_log, phase)
        return next(it)

    monkeypatch.setattr(tr, "evaluate", fake)
    return calls


def test_stops_at_21_when_val_worsens(monkeypatch):
    splits, d_in, d_out = tiny()
    calls = scripted_val(monkeypatch, [1.0 - 0.01 * e for e in range(100)])
    model = tr.build_model(default_model_config("GCN", "node-class", d_in, d_out), np.random.default_rng(0))
    res = train(model, *splits, TrainConfig.for_task("node-class"))
    assert res.stop_epoch == 21 and res.best_epoch == 1 and calls["test"] == 1


def test_runs_to_cap_when_always_improving(monkeypatch):
    splits, d_in, d_out = tiny(n=10, size=(3, 4))
    scripted_val(monkeypatch, [e / 1000 for e in range(1, 600)])
    model = tr.build_model(default_model_config("GCN", "node-class", d_in, d_out), np.random.default_rng(0))
    res = train(model, *splits, TrainConfig.for_task("node-class"))
    assert res.stop_epoch == 500 and res.best_epoch == 500 and len(res.train_loss) == 500


def test_restores_best_checkpoint(monkeypatch):
    splits, d_in, d_out = tiny()
    scripted_val(monkeypatch, [0.1, 0.9, 0.2, 0.3])
    cfg = default_model_config("KAGCN", "node-class", d_in, d_out)
    snapshots = []
    real_state = tr.build_model(cfg, np.random.default_rng(0)).__class__.state_dict

    model = tr.build_model(cfg, np.random.default_rng(0))

    def spy(self):
        s = real_state(self)
        snapshots.append(s)
        return s

    monkeypatch.setattr(model.__class__, "state_dict", spy)
    res = train(model, *splits, TrainConfig.for_task("node-class", max_epochs=4, patience=4))
    assert res.best_epoch == 2 and res.best_val_metric == 0.9
    monkeypatch.undo()
    now = model.state_dict()
    assert all(np.array_equal(now[k], snapshots[1][k]) for k in now)


def test_empty_split_rejected():
    splits, d_in, d_out = tiny()
    model = tr.build_model(default_model_config("GCN", "node-class", d_in, d_out), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        train(model, splits[0], [], splits[2], TrainConfig.for_task("node-class"))


def test_divergence_is_unstable():
    splits, d_in, d_out = tiny("edge-reg")
    mcfg = default_model_config("GCN", "edge-reg", d_in, d_out)
    tcfg = TrainConfig.for_task("edge-reg", learning_rate=1e6, max_epochs=30, patience=30)
    _, res = run_experiment(mcfg, tcfg, splits)
    assert res.status == "unstable"


def test_training_is_deterministic(tmp_path):
    splits, d_in, d_out = tiny()
    mcfg = default_model_config("KAGIN", "node-class", d_in, d_out, dropout=0.3)
    tcfg = TrainConfig.for_task("node-class", max_epochs=4, patience=4, seed=7)
    run_experiment(mcfg, tcfg, splits, epoch_log=tmp_path / "a.tsv")
    run_experiment(mcfg, tcfg, splits, epoch_log=tmp_path / "b.tsv")
    a, b = (tmp_path / "a.tsv").read_bytes(), (tmp_path / "b.tsv").read_bytes()
    assert a == b and len(a.splitlines()) == 4


def test_test_split_only_seen_after_training():
    splits, d_in, d_out = tiny()
    log = []
    mcfg = default_model_config("GCN", "node-class", d_in, d_out)
    run_experiment(mcfg, TrainConfig.for_task("node-class", max_epochs=3, patience=3), splits, ingest_log=log)
    test_ids = {r.id for r in splits[2]}
    phases = [p for p, rid in log if rid in test_ids]
    assert phases == ["test"] * len(test_ids)
    assert log[-len(test_ids):] == [("test", r.id) for r in splits[2]]


@pytest.mark.parametrize("task", SYNTH_TASKS)
@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_loss_decreases_early(task, kind):
    recs = synth_generate(task, 40, (6, 10), seed=1)
    splits, _, _ = make_splits(recs, task)
    d_in, d_out = task_dims(recs, task)
    wins = 0
    for seed in range(3):
        mcfg = default_model_config(kind, task, d_in, d_out)
        _, res = run_experiment(mcfg, TrainConfig.for_task(task, max_epochs=5, patience=5, seed=seed), splits)
        wins += res.train_loss[-1] < res.train_loss[0]
    assert wins >= 2


# --- benchmarking ----------------------------------------------------------

def test_benchmark_seed_schedule_and_mean():
    splits, d_in, d_out = tiny()
    mcfg = default_model_config("KAGCN", "node-class", d_in, d_out)
    tcfg = TrainConfig.for_task("node-class", max_epochs=3, patience=3, seed=10)
    rows, results = run_benchmark({"KAGCN": mcfg}, "node-class", splits, tcfg)
    assert [r.seed for r in results["KAGCN"]] == [10, 11, 12]
    values = [r.test_metric for r in results["KAGCN"]]
    assert rows[0].mean == pytest.approx(sum(values) / 3, abs=1e-15)
    assert rows[0].format().endswith("\tF1")


def test_benchmark_identical_seeds_zero_std():
    splits, d_in, d_out = tiny()
    mcfg = default_model_config("GCN", "node-class", d_in, d_out)
    rows, _ = run_benchmark({"GCN": mcfg}, "node-class", splits,
                            TrainConfig.for_task("node-class", max_epochs=3, patience=3), seeds=[4, 4, 4])
    assert rows[0].std == 0.0


def test_benchmark_parallel_matches_serial():
    splits, d_in, d_out = tiny()
    mcfg = default_model_config("GCN", "node-class", d_in, d_out)
    tcfg = TrainConfig.for_task("node-class", max_epochs=3, patience=3)
    serial, _ = run_benchmark({"GCN": mcfg}, "node-class", splits, tcfg)
    parallel, _ = run_benchmark({"GCN": mcfg}, "node-class", splits, tcfg, jobs=2)
    assert [r.format() for r in serial] == [r.format() for r in parallel]


def test_unstable_rule():
    ok = [RunResult(seed=i, test_metric=v, metric_kind="mse") for i, v in enumerate([1.0, 1.1, 0.9])]
    assert summarize("t", "m", ok).status == "ok"
    spread = [RunResult(seed=i, test_metric=v, metric_kind="mse") for i, v in enumerate([0.01, 0.02, 5.0])]
    assert summarize("t", "m", spread).status == "unstable"
    failed = ok[:2] + [RunResult(seed=2, status="unstable", metric_kind="mse")]
    row = summarize("t", "m", failed)
    assert row.status == "unstable" and "Unstable" in row.format()
