#!/usr/bin/env python3
# A tour of the building blocks: the tape, the margin similarity, and the two metric losses.
import numpy as np

from jnosr import tensor_core as tc
from jnosr.embedding import EmbeddingNet, MlpConfig, margin_similarity, unit_normalize
from jnosr.losses import movr_loss, sce_loss
from jnosr.tensor_core import Parameter, Tape

# %% reverse mode against central differences on a small tanh network
rng = np.random.default_rng(0)
net = EmbeddingNet(MlpConfig(5, (16, 16), 4), rng)
x = rng.uniform(-1, 1, 5)
j = tc.jacobian(net, x)
fd = tc.fd_jacobian(lambda v: net(v).data, x)
print("jacobian shape", j.shape, "max |J - J_fd|", np.abs(j - fd).max())

# %% the angular margin pushes every cosine towards -1, saturating at angle pi
cos = np.array([1.0, 0.5, 0.0, -0.9, -1.0])
for m in (0.0, 0.25, 0.5):
    print(f"m={m:<4}", np.round(margin_similarity(cos, m), 4))

# %% the one-vs-rest gradient for class k only depends on s_k
s = np.array([0.4, 0.1, -0.2, 0.0])
for name, fn in (("m-OvR", movr_loss), ("SCE", sce_loss)):
    grads = []
    for bump in (0.0, 0.2):
        v = s.copy()
        v[2] += bump
        with Tape():
            t = Parameter(v)
            loss = fn(t, 0, 1.0)
        grads.append(tc.grad(loss, [t])[t])
    print(f"{name:6} grad change on untouched classes:", np.round(np.delete(grads[1] - grads[0], 2), 6))

# %% gradient of a cosine through the normalization is tangent to the sphere
raw = rng.normal(size=4) * 3
w = unit_normalize(rng.normal(size=4))
with Tape():
    fh = Parameter(raw)
    score = (unit_normalize(fh) * w).sum()
g = tc.grad(score, [fh])[fh]
print("g . f_hat =", float(g @ raw), "(zero up to round-off)")
