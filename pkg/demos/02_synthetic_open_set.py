#!/usr/bin/env python3
# Train on six synthetic classes, hold three out as unknowns, and look at the detection metrics.
import json

from jnosr import runner

cfg = runner.parse_config(json.dumps({"seeds": [0], "iterations": 1000}))
print(cfg.to_json())

# %% one seed, no files written
rep = runner.run_experiment(cfg, write=False)
s = rep.per_seed[0]
print(f"closed-set ACC {s['acc']:.4f}  AUROC {s['auc']:.4f}  macro-F1 {s['macro_f1']:.4f}")
print(f"JND at init {s['jnd_init']:.3f} -> after training {s['jnd']:.3f}")
print(f"mean Jacobian norm known {s['mean_jn_known']:.3f}, unknown {s['mean_jn_unknown']:.3f}")

# %% the training log keeps the JND/AUC trajectory
res = rep.results[0]
for row in res.log.rows[::2]:
    print(f"step {row['step']:5d}  loss {row['train_loss']:.4f}  jnd {row['jnd']:.3f}  auc {row['auc']:.4f}")

# %% the same run without the angular margin
plain = runner.run_experiment(runner.with_overrides(cfg, margin=0.0), write=False).per_seed[0]
print(f"m=0: AUROC {plain['auc']:.4f}  JND {plain['jnd']:.3f}")
