"""SGD with momentum and coupled weight decay, cosine schedule, augmentation, train loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from . import tensor_core as tc
from .data import OsrDataset, KnownSplit, rotate_batch
from .embedding import OsrModel, unit_normalize
from .losses import LossConfig, combined_loss

log = logging.getLogger(__name__)

AUGMENT_KINDS = ("none", "jitter", "image")


@dataclass
class AugmentPolicy:
    kind: str = "jitter"
    sigma: float = 0.05
    shift: int = 2
    rotation: float = 10.0  # degrees

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise ValueError(f"augment kind must be one of {AUGMENT_KINDS}")
        if self.sigma < 0 or self.shift < 0 or self.rotation < 0:
            raise ValueError("augmentation magnitudes must be nonnegative")


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 64
    lr0: float = 0.1
    lr_min: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-3
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    eval_interval: int = 200

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr0 >= self.lr_min >= 0:
            raise ValueError("need lr0 >= lr_min >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.eval_interval < 0:
            raise ValueError("eval_interval must be >= 0")


def cosine_lr(t: int, t_total: int, lr0: float = 0.1, lr_min: float = 1e-5) -> float:
    if t_total <= 0 or t >= t_total:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / t_total))


def sgd_step(params, grads, velocities: dict, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0) -> None:
    """In-place momentum SGD step.

    Decay-eligible parameters use ``g + weight_decay * w``.  Parameters flagged
    ``unit_rows`` are re-projected onto the unit sphere afterwards.
    """
    for p in params:
        g = np.asarray(grads[p], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} ({p.name})")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name or p!r}")
        if p.decay and weight_decay:
            g = g + weight_decay * p.data
        v = velocities.get(p)
        v = g if v is None else momentum * v + g
        velocities[p] = v
        p.data = p.data - lr * v
        if p.unit_rows:
            p.data = unit_normalize(p.data)


def augment(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator,
            image_shape: tuple | None = None) -> np.ndarray:
    """Augment a batch ``(n, d)`` (or a single sample); output stays in [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    if policy.kind == "none":
        out = xb.copy()
    elif policy.kind == "jitter":
        out = xb if policy.sigma == 0 else np.clip(xb + rng.normal(0.0, policy.sigma, xb.shape), -1, 1)
        out = out.copy()
    else:
        if image_shape is None:
            raise ValueError("image augmentation needs an image shape")
        out = _augment_images(xb, policy, rng, image_shape)
    return out[0] if single else out


def _augment_images(x, policy, rng, image_shape):
    """Random shift and rotation per image, bilinear, background -1 (pixel value 0)."""
    n = len(x)
    h, w = image_shape
    shifts = rng.integers(-policy.shift, policy.shift + 1, size=(n, 2))
    angles = np.radians(rng.uniform(-policy.rotation, policy.rotation, size=n))
    # output pixel o samples the input at R (o - c - s) + c
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dr = rr[None] - c[0] - shifts[:, 0, None, None]
    dc = cc[None] - c[1] - shifts[:, 1, None, None]
    cos, sin = np.cos(angles)[:, None, None], np.sin(angles)[:, None, None]
    src_r = cos * dr - sin * dc + c[0]
    src_c = sin * dr + cos * dc + c[1]
    # stack images with a -1 border and clamp coordinates into it, so one 2-d
    # bilinear lookup equals per-image interpolation with a -1 surround
    pad = np.pad(x.reshape(n, h, w), ((0, 0), (1, 1), (1, 1)), constant_values=-1.0)
    src_r = np.clip(src_r, -1.0, h) + 1 + (h + 2) * np.arange(n)[:, None, None]
    src_c = np.clip(src_c, -1.0, w) + 1
    out = ndimage.map_coordinates(pad.reshape(n * (h + 2), w + 2), [src_r, src_c], order=1,
                                  mode="nearest")
    return np.clip(out.reshape(n, -1), -1.0, 1.0)


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)
    losses: list = field(default_factory=list)  # every training step

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.rows)


def train(model: OsrModel, dataset: OsrDataset | KnownSplit, cfg: TrainConfig,
          rng: np.random.Generator, on_eval: Callable | None = None,
          image_shape: tuple | None = None) -> MetricsLog:
    """Train ``model`` in place on the known training split.

    Only ``dataset.train`` is read.  ``on_eval(step, model)`` is called every
    ``eval_interval`` steps (and at the start and end) on the current weights;
    the dict it returns is merged into that step's log row.
    """
    if isinstance(dataset, OsrDataset):
        split, image_shape = dataset.train, dataset.image_shape
    else:
        split = dataset
    if not isinstance(split, KnownSplit):
        raise TypeError("training data must be a KnownSplit")
    if len(split) == 0:
        raise ValueError("known training split is empty")
    k = model.num_classes
    if split.y.min() < 0 or split.y.max() >= k:
        raise AssertionError("training labels outside the known-class range")

    log_ = MetricsLog()
    if cfg.iterations == 0:
        return log_
    params = model.parameters()
    velocities: dict = {}
    use_ssl = image_shape is not None and model.rot_head is not None and cfg.loss.lambda_self > 0
    recent = []

    def record(step, lr):
        row = {"step": step, "lr": lr,
               "train_loss": float(np.mean(recent)) if recent else float("nan")}
        if on_eval is not None:
            row.update(on_eval(step, model))
        log_.append(row)

    interval = cfg.eval_interval
    if interval:
        record(0, cosine_lr(0, cfg.iterations, cfg.lr0, cfg.lr_min))
    for t in range(cfg.iterations):
        lr = cosine_lr(t, cfg.iterations, cfg.lr0, cfg.lr_min)
        idx = rng.integers(0, len(split), size=cfg.batch_size)
        xb = augment(split.x[idx], cfg.augment, rng, image_shape)
        yb = split.y[idx]
        rot_x = rot_y = None
        if use_ssl:
            rot_y = rng.integers(0, 4, size=len(xb))
            rot_x = rotate_batch(xb, image_shape, rot_y)
        with tc.Tape():
            loss = combined_loss(xb, yb, model, cfg.loss, rot_x, rot_y)
        grads = tc.grad(loss, params)
        sgd_step(params, grads, velocities, lr, cfg.momentum, cfg.weight_decay)
        recent.append(loss.item())
        log_.losses.append(recent[-1])
        del recent[:-100]
        step = t + 1
        if interval and (step % interval == 0 or step == cfg.iterations):
            record(step, lr)
    log.debug("finished %d iterations, last loss %.4g", cfg.iterations, recent[-1])
    return log_
