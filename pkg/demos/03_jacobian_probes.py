#!/usr/bin/env python3
# Probes of a trained embedding: Jacobian norm along class-to-class paths and the high-JN volume.
import json

import numpy as np

from jnosr import runner
from jnosr.osr_eval import interpolation_probe, jacobian_norm, path_length, support_volume_estimate

cfg = runner.parse_config(json.dumps({"seeds": [0], "iterations": 1000}))
res = runner.run_seed(cfg, 0)
ds, model = res.dataset, res.model

# %% between two classes the Jacobian norm peaks away from both endpoints
pairs = runner.interp_pairs(ds, 5, np.random.default_rng(0))
for a, b in pairs:
    probe = interpolation_probe(model, a, b, 21)
    t_peak = probe[np.argmax(probe[:, 1]), 0]
    print(f"peak at t={t_peak:.2f}  max JN {probe[:, 1].max():7.2f}  endpoints "
          f"{probe[0, 1]:.2f}/{probe[-1, 1]:.2f}  path length {path_length(model, a, b):.3f}")

# %% unknowns sit where the embedding changes fastest, so their JN is higher
jk = jacobian_norm(model, ds.test.x[:200])
ju = jacobian_norm(model, ds.unknown.x[:200])
print(f"median JN known {np.median(jk):.3f}, unknown {np.median(ju):.3f}")

# %% fraction of the input cube above the known-sample 95th percentile
print("support volume", support_volume_estimate(model, 2000, seed=1, known_x=ds.train.x[:300]))
