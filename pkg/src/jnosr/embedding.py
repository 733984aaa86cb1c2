"""Representation network, prototype bank and cosine / margin similarities."""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor_core as tc
from .tensor_core import Parameter, Tensor

UNIT_TOL = 1e-6
CHECKPOINT_VERSION = 1


@dataclass
class MlpConfig:
    input_dim: int
    hidden_dims: tuple = (64, 64)
    embed_dim: int = 16
    activation: str = "tanh"
    init_scale: float = 1.0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be >= 1")
        if self.activation != "tanh":
            raise ValueError("only the tanh activation is supported")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be positive")


class EmbeddingNet:
    """tanh MLP producing the raw embedding; the last layer is affine."""

    def __init__(self, config: MlpConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [config.input_dim, *config.hidden_dims, config.embed_dim]
        self.weights, self.biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            std = config.init_scale / math.sqrt(fan_in)
            self.weights.append(Parameter(rng.normal(0.0, std, (fan_in, fan_out)), name=f"W{i}"))
            self.biases.append(Parameter(np.zeros(fan_out), name=f"b{i}"))

    def parameters(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x) -> Tensor:
        """Raw embedding for a vector ``(d,)`` or batch ``(n, d)``."""
        h = tc.as_tensor(x)
        if h.shape[-1] != self.config.input_dim:
            raise ValueError(f"expected input dim {self.config.input_dim}, got shape {h.shape}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = tc.tanh(h)
        return h

    __call__ = forward


def unit_normalize(v, eps: float = 1e-12):
    """``v / max(||v||, eps)`` along the last axis.

    Accepts arrays (returns an array) or tensors (returns a tensor).
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if isinstance(v, Tensor):
        return v / tc.maximum(tc.l2_norm(v, axis=-1, keepdims=True), eps)
    v = np.asarray(v, dtype=np.float64)
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), eps)


def embed(net: EmbeddingNet, x, normalized: bool = True):
    """Embedding of ``x``; unit-normalized unless ``normalized`` is off."""
    raw = net(x)
    return unit_normalize(raw) if normalized else raw


class PrototypeBank:
    """K unit prototypes, one per known class, excluded from weight decay."""

    def __init__(self, num_classes: int, dim: int, rng: np.random.Generator | None = None):
        if num_classes < 1:
            raise ValueError("need at least one prototype")
        rng = rng if rng is not None else np.random.default_rng(0)
        w = unit_normalize(rng.normal(size=(num_classes, dim)))
        self.weight = Parameter(w, decay=False, unit_rows=True, name="prototypes")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def project(self) -> None:
        self.weight.data = unit_normalize(self.weight.data)


def cosine_sim(f, w) -> float:
    """Cosine of two unit vectors, clamped to [-1, 1]."""
    f = np.asarray(f, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    for name, v in (("f", f), ("w", w)):
        if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
            raise ValueError(f"{name} is not unit-norm (||{name}|| = {np.linalg.norm(v):.3g})")
    return float(np.clip(f @ w, -1.0, 1.0))


def _check_margin(m: float) -> None:
    if not 0.0 <= m < math.pi / 2:
        raise ValueError(f"margin must lie in [0, pi/2), got {m}")


def margin_similarity(cos_val, m: float):
    """``cos(min(arccos(c) + m, pi))``; works on floats, arrays, or tensors."""
    _check_margin(m)
    if isinstance(cos_val, Tensor):
        if m == 0.0:
            return cos_val
        return tc.cos(tc.minimum(tc.arccos(cos_val) + m, math.pi))
    c = np.clip(np.asarray(cos_val, dtype=np.float64), -1.0, 1.0)
    if m == 0.0:
        out = c
    else:
        out = np.cos(np.minimum(np.arccos(c) + m, math.pi))
    return float(out) if out.ndim == 0 else out


@dataclass
class OsrModel:
    """Embedding network, prototype bank and optional rotation head."""

    net: EmbeddingNet
    bank: PrototypeBank
    rot_head: list | None = None
    normalize: bool = True

    @classmethod
    def build(cls, config: MlpConfig, num_classes: int, rng: np.random.Generator,
              rotation_head: bool = False, normalize: bool = True) -> "OsrModel":
        net = EmbeddingNet(config, rng)
        bank = PrototypeBank(num_classes, config.embed_dim, rng)
        head = None
        if rotation_head:
            std = 1.0 / math.sqrt(config.embed_dim)
            head = [Parameter(rng.normal(0.0, std, (config.embed_dim, 4)), name="rot_W"),
                    Parameter(np.zeros(4), name="rot_b")]
        return cls(net, bank, head, normalize)

    @property
    def num_classes(self) -> int:
        return self.bank.num_classes

    def parameters(self) -> list:
        params = self.net.parameters() + [self.bank.weight]
        if self.rot_head:
            params += self.rot_head
        return params

    def embed(self, x, normalized: bool = True):
        return embed(self.net, x, normalized)

    def rotation_logits(self, raw) -> Tensor:
        if not self.rot_head:
            raise ValueError("model has no rotation head")
        w, b = self.rot_head
        return raw @ w + b

    def similarities(self, x, m: float = 0.0, apply_margin: bool = True) -> Tensor:
        return class_similarities(self, x, m, apply_margin)

    # -------- checkpoints

    def state(self) -> dict:
        arrays = {p.name: p.data for p in self.net.parameters()}
        arrays["prototypes"] = self.bank.weight.data
        if self.rot_head:
            arrays["rot_W"], arrays["rot_b"] = (p.data for p in self.rot_head)
        return arrays

    def save(self, path) -> None:
        header = {"version": CHECKPOINT_VERSION, "config": asdict(self.net.config),
                  "num_classes": self.num_classes, "normalize": self.normalize,
                  "rotation_head": bool(self.rot_head)}
        header["config"]["hidden_dims"] = list(self.net.config.hidden_dims)
        buf = io.BytesIO()
        np.savez(buf, __header__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), np.uint8),
                 **self.state())
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "OsrModel":
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(z["__header__"].tobytes().decode())
            if header.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {header.get('version')}")
            cfg = MlpConfig(**header["config"])
            model = cls.build(cfg, header["num_classes"], np.random.default_rng(0),
                              header["rotation_head"], header["normalize"])
            for p in model.net.parameters():
                p.data = z[p.name].copy()
            model.bank.weight.data = z["prototypes"].copy()
            if model.rot_head:
                model.rot_head[0].data = z["rot_W"].copy()
                model.rot_head[1].data = z["rot_b"].copy()
        return model


def class_similarities(model: OsrModel, x, m: float = 0.0, apply_margin: bool = True) -> Tensor:
    """Similarity of each sample to every prototype, shape ``(K,)`` or ``(n, K)``.

    With a normalized model these are cosines (optionally with the additive
    angular margin); without normalization they are raw dot products.
    """
    _check_margin(m)
    w = model.bank.weight
    if not model.normalize:
        if apply_margin and m > 0:
            raise ValueError("an angular margin requires normalized embeddings")
        return model.embed(x, normalized=False) @ w.T
    cos = tc.clip(model.embed(x) @ w.T, -1.0, 1.0)
    if apply_margin:
        return margin_similarity(cos, m)
    return cos
