"""
Random hyperparameter search
============================

Search learning rate, depth, width, dropout and spline settings on the
train/validation splits. The test split is never touched.
"""
from kagnn.data import synth_generate
from kagnn.hpsearch import SearchSpace, format_trial_table, run_search
from kagnn.train import TrainConfig, make_splits

task = "graph-class"
records = synth_generate(task, 150, (8, 20), seed=3)
splits, _, _ = make_splits(records, task)

seen = []
base = TrainConfig.for_task(task, max_epochs=30, patience=10)
result = run_search(SearchSpace(), task, splits, n_trials=6, seed=0, model_kind="KAGIN",
                    base_train=base, ingest_log=seen)
print(format_trial_table(result.trials))
best = result.best
print("best trial", best.index, "val", round(best.val_metric, 4))
print("phases seen:", sorted({phase for phase, _ in seen}))
