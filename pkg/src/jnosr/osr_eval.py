"""Unknown-class scoring and the Jacobian-norm diagnostics.

Score convention: higher detection score means more likely unknown.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import pearsonr, rankdata, spearmanr

from . import tensor_core as tc
from .data import OsrDataset
from .embedding import OsrModel
from .losses import LossConfig, sample_losses

HIGHER_IS_UNKNOWN = True


def _batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 1 else x


def pseudo_label(model: OsrModel, x) -> np.ndarray:
    """Closest prototype by plain cosine; ties go to the lowest index."""
    sims = model.similarities(_batch(x), 0.0, apply_margin=False).data
    return np.argmax(sims, axis=1)


def detection_score(model: OsrModel, x, loss_cfg: LossConfig) -> np.ndarray:
    """Training loss evaluated at the pseudo label (one score per row)."""
    xb = _batch(x)
    return sample_losses(model, xb, pseudo_label(model, xb), loss_cfg).data


def accuracy(model: OsrModel, x, y) -> float:
    return float(np.mean(pseudo_label(model, x) == np.asarray(y)))


def auc(known_scores, unknown_scores) -> float:
    """P(unknown score > known score) with ties counted one half."""
    k = np.asarray(known_scores, dtype=np.float64).ravel()
    u = np.asarray(unknown_scores, dtype=np.float64).ravel()
    if k.size == 0 or u.size == 0:
        raise ValueError("auc needs nonempty known and unknown score lists")
    ranks = rankdata(np.concatenate([k, u]))  # average ranks -> exact halves
    wins = ranks[k.size:].sum() - u.size * (u.size + 1) / 2.0
    return float(wins / (k.size * u.size))


def macro_f1(predictions, truths, num_classes: int | None = None) -> float:
    """Unweighted mean F1 over all classes (known classes plus the unknown index)."""
    p = np.asarray(predictions)
    t = np.asarray(truths)
    if p.shape != t.shape:
        raise ValueError("predictions and truths differ in length")
    n = num_classes if num_classes is not None else int(max(p.max(), t.max())) + 1
    scores, absent = [], []
    for c in range(n):
        tp = np.sum((p == c) & (t == c))
        fp = np.sum((p == c) & (t != c))
        fn = np.sum((p != c) & (t == c))
        if tp + fp + fn == 0:
            absent.append(c)
            scores.append(0.0)
        else:
            scores.append(2.0 * tp / (2.0 * tp + fp + fn))
    if absent:
        warnings.warn(f"classes {absent} absent from predictions and truths; F1 set to 0",
                      stacklevel=2)
    return float(np.mean(scores))


def threshold_at_rejection(val_scores, q: float = 0.10) -> float:
    """(1 - q) quantile of known validation scores; strictly above means unknown."""
    s = np.asarray(val_scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no validation scores")
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    return float(np.quantile(s, 1.0 - q))


def open_set_predict(model: OsrModel, x, loss_cfg: LossConfig, threshold: float) -> np.ndarray:
    """Known-class prediction, or ``K`` where the score exceeds ``threshold``."""
    pred = pseudo_label(model, x)
    pred[detection_score(model, x, loss_cfg) > threshold] = model.num_classes
    return pred


def dbi(embeddings, labels) -> float:
    """Davies-Bouldin index with Euclidean distances."""
    z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("dbi needs at least two classes")
    cents = np.stack([z[y == c].mean(axis=0) for c in classes])
    spread = np.array([np.linalg.norm(z[y == c] - cents[i], axis=1).mean()
                       for i, c in enumerate(classes)])
    dist = np.linalg.norm(cents[:, None] - cents[None], axis=-1)
    off = ~np.eye(len(classes), dtype=bool)
    if np.any(dist[off] == 0):
        raise ValueError("coincident class centroids")
    with np.errstate(divide="ignore"):
        ratio = (spread[:, None] + spread[None]) / dist
    ratio[~off] = -np.inf
    return float(np.mean(ratio.max(axis=1)))


def jacobians(model: OsrModel, x, normalized: bool = True) -> np.ndarray:
    f = lambda t: model.embed(t, normalized=normalized)
    return tc.batch_jacobian(f, _batch(x))


def jacobian_norm(model: OsrModel, x, normalized: bool = True, chunk: int = 512) -> np.ndarray:
    """Frobenius norm of the input Jacobian of the embedding, per row of ``x``."""
    xb = _batch(x)
    out = [np.sqrt(np.sum(jacobians(model, xb[i:i + chunk], normalized) ** 2, axis=(1, 2)))
           for i in range(0, len(xb), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def jnd(model: OsrModel, known_samples, unknown_samples, normalized: bool = True) -> float:
    """Mean Jacobian norm on unknown samples minus mean on known samples."""
    if len(known_samples) == 0 or len(unknown_samples) == 0:
        raise ValueError("jnd needs nonempty known and unknown sets")
    ju = jacobian_norm(model, unknown_samples, normalized).mean()
    jk = jacobian_norm(model, known_samples, normalized).mean()
    return float(ju - jk)


def _path(x0, x1, n):
    if n < 2:
        raise ValueError("need at least two points on the path")
    t = np.linspace(0.0, 1.0, n)
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    return t, (1.0 - t)[:, None] * x0 + t[:, None] * x1


def interpolation_probe(model: OsrModel, x0, x1, n: int = 21,
                        normalized: bool = True) -> np.ndarray:
    """Jacobian norms along the segment from ``x0`` to ``x1``; rows are (t, norm)."""
    t, xs = _path(x0, x1, n)
    return np.column_stack([t, jacobian_norm(model, xs, normalized)])


def path_length(model: OsrModel, x0, x1, n: int = 101, normalized: bool = True) -> float:
    """Chord-length estimate of the embedded segment's length."""
    _, xs = _path(x0, x1, n)
    z = model.embed(xs, normalized=normalized).data
    return float(np.linalg.norm(np.diff(z, axis=0), axis=1).sum())


def support_volume_estimate(model: OsrModel, n_mc: int, tau: float | None = None, seed=0,
                            known_x=None, normalized: bool = True) -> float:
    """Monte-Carlo fraction of [-1, 1]^d whose Jacobian norm exceeds ``tau``.

    ``tau`` defaults to the 95th percentile of the norms on ``known_x``.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if tau is None:
        if known_x is None:
            raise ValueError("tau or known_x is required")
        tau = float(np.percentile(jacobian_norm(model, known_x, normalized), 95))
    if tau < 0:
        raise ValueError("tau must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n_mc, model.net.config.input_dim))
    return float(np.mean(jacobian_norm(model, x, normalized) > tau))


def mean_inter_prototype_distance(model: OsrModel) -> float:
    w = model.bank.weight.data
    d = np.linalg.norm(w[:, None] - w[None], axis=-1)
    k = len(w)
    return float(d[~np.eye(k, dtype=bool)].mean()) if k > 1 else 0.0


def correlation(a, b, kind: str = "pearson") -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    fn = pearsonr if kind == "pearson" else spearmanr
    return float(fn(a, b)[0])


@dataclass
class DiagnosticsReport:
    step: int
    acc: float
    auc: float
    dbi: float
    jnd: float
    mean_inter_proto_dist: float
    mean_jn_known: float
    mean_jn_unknown: float
    mean_score_known: float
    mean_score_unknown: float
    mean_raw_norm: float
    samples: list = field(default_factory=list, repr=False)  # (is_unknown, score, jn)

    def metrics(self) -> dict:
        keys = ("acc", "dbi", "auc", "jnd", "mean_inter_proto_dist",
                "mean_jn_known", "mean_jn_unknown")
        return {k: getattr(self, k) for k in keys}


def _subsample(x, n, rng):
    if n is None or len(x) <= n:
        return x
    return x[np.sort(rng.choice(len(x), n, replace=False))]


def diagnose(model: OsrModel, dataset: OsrDataset, loss_cfg: LossConfig, step: int = 0,
             jacobian_samples: int | None = None, seed: int = 0) -> DiagnosticsReport:
    """Closed-set accuracy, detection AUC, DBI and Jacobian statistics.

    Scores and accuracy use every known-test and unknown sample; Jacobian norms
    use at most ``jacobian_samples`` of each (a fixed subset for a fixed seed).
    """
    xk, yk = dataset.test.x, dataset.test.y
    xu = dataset.unknown.x
    sk = detection_score(model, xk, loss_cfg)
    su = detection_score(model, xu, loss_cfg)
    zk = model.embed(xk).data
    rng = np.random.default_rng(seed)
    jk_idx = _subsample(np.arange(len(xk)), jacobian_samples, rng)
    ju_idx = _subsample(np.arange(len(xu)), jacobian_samples, rng)
    jk = jacobian_norm(model, xk[jk_idx])
    ju = jacobian_norm(model, xu[ju_idx])
    samples = [(0, float(sk[i]), float(j)) for i, j in zip(jk_idx, jk)]
    samples += [(1, float(su[i]), float(j)) for i, j in zip(ju_idx, ju)]
    return DiagnosticsReport(
        step=step,
        acc=accuracy(model, xk, yk),
        auc=auc(sk, su),
        dbi=dbi(zk, yk),
        jnd=float(ju.mean() - jk.mean()),
        mean_inter_proto_dist=mean_inter_prototype_distance(model),
        mean_jn_known=float(jk.mean()),
        mean_jn_unknown=float(ju.mean()),
        mean_score_known=float(sk.mean()),
        mean_score_unknown=float(su.mean()),
        mean_raw_norm=float(np.linalg.norm(model.embed(xk, normalized=False).data, axis=1).mean()),
        samples=samples,
    )
