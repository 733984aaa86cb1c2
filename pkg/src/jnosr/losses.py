"""Training objectives: (marginal) one-vs-rest, softmax cross-entropy, rotation SSL."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor

LOSS_KINDS = ("movr", "ovr", "sce")


@dataclass
class LossConfig:
    kind: str = "movr"
    scale: float = 32.0
    margin: float = 0.5
    lambda_self: float = 0.1

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("scale T must be positive")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError("margin must lie in [0, pi/2)")
        if self.lambda_self < 0:
            raise ValueError("lambda_self must be nonnegative")

    @property
    def effective_margin(self) -> float:
        # plain OvR is m-OvR with the margin switched off
        return 0.0 if self.kind == "ovr" else self.margin


def _labels(sims: Tensor, y) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y))
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    k = sims.shape[-1]
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    return y.astype(np.int64)


def _as_batch(sims):
    sims = tc.as_tensor(sims)
    single = sims.ndim == 1
    return (tc.reshape(sims, (1, sims.shape[0])) if single else sims), single


def movr_loss(sims, y, scale: float = 32.0) -> Tensor:
    """One-vs-rest sigmoid loss over scaled similarities.

    ``-log sig(T s_y) - sum_{k != y} log(1 - sig(T s_k))``, written with
    softplus so it stays finite for large ``|T s|``.  Returns one loss per
    sample (a 0-d tensor for a single sample).
    """
    s, single = _as_batch(sims)
    y = _labels(s, y)
    onehot = np.zeros(s.shape)
    onehot[np.arange(len(y)), y] = 1.0
    z = s * scale
    per_class = onehot * tc.softplus(-z) + (1.0 - onehot) * tc.softplus(z)
    out = per_class.sum(axis=-1)
    return tc.reshape(out, ()) if single else out


def sce_loss(sims, y, scale: float = 32.0) -> Tensor:
    """Softmax cross-entropy over logits ``T s_k``."""
    s, single = _as_batch(sims)
    y = _labels(s, y)
    z = s * scale
    out = tc.logsumexp(z, axis=-1) - tc.take_rows(z, y)
    return tc.reshape(out, ()) if single else out


def rotation_ssl_loss(rot_logits, rot_label) -> Tensor:
    """4-way cross-entropy for predicting 0/90/180/270 degree rotations."""
    s, single = _as_batch(rot_logits)
    if s.shape[-1] != 4:
        raise ValueError("rotation logits must have 4 entries")
    y = _labels(s, rot_label)
    out = tc.logsumexp(s, axis=-1) - tc.take_rows(s, y)
    return tc.reshape(out, ()) if single else out


def metric_loss(sims, y, cfg: LossConfig) -> Tensor:
    if cfg.kind == "sce":
        return sce_loss(sims, y, cfg.scale)
    return movr_loss(sims, y, cfg.scale)


def sample_losses(model, x, y, cfg: LossConfig) -> Tensor:
    """Per-sample metric loss of ``model`` on ``(x, y)`` (margin as configured)."""
    sims = model.similarities(x, cfg.effective_margin, apply_margin=True)
    return metric_loss(sims, y, cfg)


def combined_loss(x, y, model, cfg: LossConfig, rot_x=None, rot_y=None) -> Tensor:
    """Mean metric loss plus ``lambda_self`` times the mean rotation loss.

    ``rot_x``/``rot_y`` are the rotated copies of the batch and their
    quarter-turn labels; the SSL term is skipped when they are absent.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    total = sample_losses(model, x, y, cfg).mean()
    if rot_x is not None and cfg.lambda_self > 0:
        raw = model.embed(rot_x, normalized=False)
        ssl = rotation_ssl_loss(model.rotation_logits(raw), rot_y).mean()
        total = total + cfg.lambda_self * ssl
    return total
