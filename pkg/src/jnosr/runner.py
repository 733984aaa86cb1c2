"""Experiment configuration, orchestration and file emission.

Randomness: every run derives its streams from ``numpy.random.SeedSequence(seed)``
spawned into four children (data, split, init, train), each driving a
``Philox`` (counter-based, 4x64-10) bit generator.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import OsrDataset, gen_blobs, load_idx, split_known_unknown, LabeledSet
from .embedding import MlpConfig, OsrModel
from .losses import LossConfig
from .osr_eval import (auc, correlation, detection_score, diagnose, interpolation_probe,
                       jacobian_norm, macro_f1, open_set_predict, path_length,
                       support_volume_estimate, threshold_at_rejection)
from .training import AugmentPolicy, TrainConfig, train

log = logging.getLogger(__name__)

RNG_NAME = "Philox4x64-10 streams spawned from numpy SeedSequence(seed): data, split, init, train"
METRIC_COLUMNS = ("step", "lr", "train_loss", "acc", "dbi", "auc", "jnd",
                  "mean_inter_proto_dist", "mean_jn_known", "mean_jn_unknown")


class ConfigError(ValueError):
    pass


def fmt(x) -> str:
    """Numbers with 9 significant digits."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.9g}"


def _round(obj):
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return float(f"{v:.9g}") if np.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_round(obj), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- config

@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    total_classes: int = 9
    dim: int = 8
    n_per_class: int = 200
    separation: float = 0.5
    radius: float = 0.08
    layout: str = "simplex"
    images: str | None = None
    labels: str | None = None
    num_known: int = 6
    known_ids: list | None = None
    train_fraction: float = 0.7
    max_samples: int | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx"):
            raise ValueError("kind must be 'synthetic' or 'idx'")
        if self.kind == "idx" and not (self.images and self.labels):
            raise ValueError("idx datasets need 'images' and 'labels' paths")
        if self.num_known < 1:
            raise ValueError("num_known must be >= 1")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must lie in (0, 1]")


@dataclass
class ModelConfig:
    hidden_dims: list = field(default_factory=lambda: [64, 64])
    embed_dim: int = 16
    init_scale: float = 1.0
    normalize: bool = True


@dataclass
class ProbeConfig:
    interp_pairs: int = 100
    interp_points: int = 21
    mc_samples: int = 1000
    jacobian_samples: int = 300
    path_points: int = 101


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    model: ModelConfig
    train: TrainConfig
    probe: ProbeConfig
    seeds: list
    out_dir: str = "runs/default"

    def mlp(self, input_dim: int) -> MlpConfig:
        return MlpConfig(input_dim, tuple(self.model.hidden_dims), self.model.embed_dim,
                         "tanh", self.model.init_scale)

    def to_dict(self) -> dict:
        t = self.train
        return {
            "dataset": asdict(self.dataset),
            "model": asdict(self.model),
            "probe": asdict(self.probe),
            "loss": t.loss.kind, "scale": t.loss.scale, "margin": t.loss.margin,
            "lambda_self": t.loss.lambda_self,
            "iterations": t.iterations, "batch_size": t.batch_size, "lr0": t.lr0,
            "lr_min": t.lr_min, "momentum": t.momentum, "weight_decay": t.weight_decay,
            "eval_interval": t.eval_interval, "augment": asdict(t.augment),
            "seeds": list(self.seeds), "out_dir": self.out_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# per dataset kind: values used when the document leaves a field out
PRESETS = {
    "synthetic": {"iterations": 2000, "batch_size": 64, "lr0": 0.01,
                  "model": {"hidden_dims": [64, 64], "embed_dim": 16},
                  "augment": {"kind": "jitter", "sigma": 0.05},
                  "probe": {"mc_samples": 1000, "jacobian_samples": 300}},
    "idx": {"iterations": 4000, "batch_size": 128, "lr0": 0.01,
            "model": {"hidden_dims": [256, 128], "embed_dim": 64},
            "augment": {"kind": "image", "shift": 2, "rotation": 10.0},
            "probe": {"mc_samples": 200, "jacobian_samples": 300}},
}
TOP_KEYS = {"dataset", "model", "probe", "loss", "scale", "margin", "lambda_self",
            "iterations", "batch_size", "lr0", "lr_min", "momentum", "weight_decay",
            "eval_interval", "augment", "seeds", "out_dir"}
LOSS_KEYS = {"loss": "kind", "scale": "scale", "margin": "margin", "lambda_self": "lambda_self"}
TRAIN_KEYS = ("iterations", "batch_size", "lr0", "lr_min", "momentum", "weight_decay",
              "eval_interval")


def _section(cls, doc, path, base=None):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"'{path}' must be an object")
    names = {f.name for f in fields(cls)}
    for key in doc:
        if key not in names:
            raise ConfigError(f"unknown key '{path}.{key}'")
    merged = dict(base or {})
    merged.update(doc)
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in '{path}': {exc}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse a JSON experiment document; missing fields take documented defaults."""
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"syntax error at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key in doc:
        if key not in TOP_KEYS:
            raise ConfigError(f"unknown key '{key}'")
    dataset = _section(DatasetConfig, doc.get("dataset"), "dataset")
    preset = PRESETS[dataset.kind]
    model = _section(ModelConfig, doc.get("model"), "model", preset["model"])
    probe = _section(ProbeConfig, doc.get("probe"), "probe", preset["probe"])
    augment = _section(AugmentPolicy, doc.get("augment"), "augment", preset["augment"])

    try:
        loss = LossConfig(**{attr: doc[key] for key, attr in LOSS_KEYS.items() if key in doc})
    except (TypeError, ValueError) as exc:
        bad = [k for k in LOSS_KEYS if k in doc]
        raise ConfigError(f"invalid value for {bad}: {exc}") from None
    if not model.normalize and loss.effective_margin > 0:
        raise ConfigError("invalid value for 'margin': a margin requires model.normalize = true")
    tkw = {k: doc.get(k, preset.get(k)) for k in TRAIN_KEYS if k in doc or k in preset}
    try:
        train_cfg = TrainConfig(loss=loss, augment=augment, **tkw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training setting: {exc}") from None

    seeds = doc.get("seeds", [0, 1, 2, 3, 4])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("invalid value for 'seeds': need a nonempty list of integers")
    out_dir = doc.get("out_dir", "runs/default")
    if not isinstance(out_dir, str):
        raise ConfigError("invalid value for 'out_dir': must be a string")
    return ExperimentConfig(dataset, model, train_cfg, probe, seeds, out_dir)


def load_config(path) -> ExperimentConfig:
    cfg = parse_config(Path(path).read_text())
    for attr in ("images", "labels"):
        p = getattr(cfg.dataset, attr)
        if p and not Path(p).exists():
            raise ConfigError(f"dataset.{attr}: file not found: {p}")
    return cfg


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy of ``cfg`` with top-level document keys replaced (re-validated)."""
    doc = cfg.to_dict()
    for key, val in changes.items():
        if "." in key:
            sec, sub = key.split(".", 1)
            doc[sec] = dict(doc[sec], **{sub: val})
        else:
            doc[key] = val
    return parse_config(json.dumps(doc))


# ---------------------------------------------------------------- runs

def streams(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(4)
    return {name: np.random.Generator(np.random.Philox(c))
            for name, c in zip(("data", "split", "init", "train"), children)}


_raw_cache: dict = {}


def _raw_data(cfg: DatasetConfig, rng) -> LabeledSet:
    if cfg.kind == "synthetic":
        return gen_blobs(cfg.total_classes, cfg.dim, cfg.n_per_class, cfg.separation,
                         cfg.radius, rng, layout=cfg.layout)
    key = (cfg.images, cfg.labels)
    if key not in _raw_cache:
        _raw_cache[key] = load_idx(cfg.images, cfg.labels)
    raw = _raw_cache[key]
    if cfg.max_samples and cfg.max_samples < len(raw.y):
        idx = np.sort(rng.choice(len(raw.y), cfg.max_samples, replace=False))
        raw = LabeledSet(raw.x[idx], raw.y[idx], raw.image_shape)
    return raw


def class_order(raw: LabeledSet, rng) -> list:
    """Seeded permutation of class ids; the first K are the known classes."""
    ids = np.unique(raw.y)
    return [int(c) for c in ids[rng.permutation(len(ids))]]


def build_dataset(cfg: ExperimentConfig, seed: int, rngs: dict | None = None) -> OsrDataset:
    rngs = rngs or streams(seed)
    raw = _raw_data(cfg.dataset, rngs["data"])
    order = class_order(raw, rngs["split"])
    known = cfg.dataset.known_ids or order[: cfg.dataset.num_known]
    if not cfg.dataset.known_ids and cfg.dataset.num_known >= len(order):
        raise ConfigError(f"num_known={cfg.dataset.num_known} must be < {len(order)} classes")
    ds = split_known_unknown(raw, known, cfg.dataset.train_fraction, rngs["split"])
    ds.meta["class_order"] = order
    return ds


def build_model(cfg: ExperimentConfig, ds: OsrDataset, rng) -> OsrModel:
    ssl = ds.image_shape is not None and cfg.train.loss.lambda_self > 0
    return OsrModel.build(cfg.mlp(ds.dim), ds.num_classes, rng, rotation_head=ssl,
                          normalize=cfg.model.normalize)


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in r])
    path.write_text(buf.getvalue())


def interp_pairs(ds: OsrDataset, n_pairs: int, rng) -> list:
    pairs = []
    k = ds.num_classes
    if k < 2 or len(ds.test) == 0:
        return pairs
    for _ in range(n_pairs):
        a, b = rng.choice(k, 2, replace=False)
        ia = rng.choice(np.flatnonzero(ds.test.y == a))
        ib = rng.choice(np.flatnonzero(ds.test.y == b))
        pairs.append((ds.test.x[ia], ds.test.x[ib]))
    return pairs


def mid_path_fraction(probes) -> float:
    """Share of probes whose max norm on t in (0.25, 0.75) beats both endpoints."""
    hits = 0
    for pr in probes:
        mid = pr[(pr[:, 0] > 0.25) & (pr[:, 0] < 0.75), 1]
        hits += bool(mid.size and mid.max() > max(pr[0, 1], pr[-1, 1]))
    return hits / len(probes) if probes else float("nan")


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class SeedResult:
    seed: int
    summary: dict
    log: object
    model: OsrModel
    dataset: OsrDataset
    files: list


def run_seed(cfg: ExperimentConfig, seed: int, out: Path | None = None) -> SeedResult:
    t0 = time.perf_counter()
    rngs = streams(seed)
    ds = build_dataset(cfg, seed, rngs)
    model = build_model(cfg, ds, rngs["init"])
    lc = cfg.train.loss
    jn_n = cfg.probe.jacobian_samples

    def on_eval(step, m):
        return diagnose(m, ds, lc, step, jn_n, seed=seed).metrics()

    mlog = train(model, ds, cfg.train, rngs["train"], on_eval)
    t_train = time.perf_counter() - t0

    final = diagnose(model, ds, lc, cfg.train.iterations, jn_n, seed=seed)
    probe_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    pairs = interp_pairs(ds, cfg.probe.interp_pairs, probe_rng)
    probes = [interpolation_probe(model, a, b, cfg.probe.interp_points) for a, b in pairs]
    lengths = [path_length(model, a, b, cfg.probe.path_points) for a, b in pairs[:20]]
    vol = support_volume_estimate(model, cfg.probe.mc_samples, seed=probe_rng,
                                  known_x=ds.train.x[: max(jn_n, 1)])
    thr = threshold_at_rejection(detection_score(model, ds.test.x, lc), 0.10)
    x_all = np.concatenate([ds.test.x, ds.unknown.x])
    truth = np.concatenate([ds.test.y, np.full(len(ds.unknown), ds.num_classes)])
    f1 = macro_f1(open_set_predict(model, x_all, lc, thr), truth, ds.num_classes + 1)
    sc = np.array([s[1] for s in final.samples])
    jn = np.array([s[2] for s in final.samples])
    jnd_col = mlog.column("jnd") if len(mlog) else np.array([])
    auc_col = mlog.column("auc") if len(mlog) else np.array([])
    summary = {
        "seed": seed,
        "acc": final.acc, "auc": final.auc, "dbi": final.dbi, "jnd": final.jnd,
        "jnd_init": float(jnd_col[0]) if len(jnd_col) else float("nan"),
        "macro_f1": f1, "threshold": thr,
        "mean_jn_known": final.mean_jn_known, "mean_jn_unknown": final.mean_jn_unknown,
        "mean_score_known": final.mean_score_known, "mean_score_unknown": final.mean_score_unknown,
        "mean_raw_norm": final.mean_raw_norm,
        "mean_inter_proto_dist": final.mean_inter_proto_dist,
        "pearson_jnd_auc": correlation(jnd_col, auc_col) if len(jnd_col) > 2 else float("nan"),
        "spearman_score_jn": correlation(sc, jn, "spearman"),
        "interp_mid_fraction": mid_path_fraction(probes),
        "mean_path_length": float(np.mean(lengths)) if lengths else float("nan"),
        "support_volume": vol,
        "known_ids": ds.meta["known_ids"],
        "train_seconds": t_train,
        "total_seconds": time.perf_counter() - t0,
    }
    files = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "metrics.csv", METRIC_COLUMNS,
                  [[r.get(c, float("nan")) for c in METRIC_COLUMNS] for r in mlog.rows])
        write_csv(out / "scatter_score_jn.csv", ("sample_id", "is_unknown", "score", "jacobian_norm"),
                  [(i, u, s, j) for i, (u, s, j) in enumerate(final.samples)])
        write_csv(out / "interp_probe.csv", ("pair_id", "t", "jacobian_norm"),
                  [(p, t, j) for p, pr in enumerate(probes) for t, j in pr])
        model.save(out / "model.npz")
        files = [out / n for n in ("metrics.csv", "scatter_score_jn.csv", "interp_probe.csv", "model.npz")]
    return SeedResult(seed, summary, mlog, model, ds, files)


SUMMARY_KEYS = ("acc", "auc", "dbi", "jnd", "jnd_init", "macro_f1", "mean_raw_norm",
                "mean_inter_proto_dist", "pearson_jnd_auc", "spearman_score_jn",
                "interp_mid_fraction", "support_volume", "mean_jn_known", "mean_jn_unknown")


def aggregate(per_seed: list) -> dict:
    out = {}
    for k in SUMMARY_KEYS:
        v = np.array([s[k] for s in per_seed], dtype=float)
        out[k] = {"mean": float(np.mean(v)), "std": float(np.std(v))}
    return out


@dataclass
class RunReport:
    config: dict
    per_seed: list
    summary: dict
    files: list
    timings: dict
    status: str = "complete"
    results: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {"status": self.status, "rng": RNG_NAME, "config": self.config,
                "per_seed": self.per_seed, "summary": self.summary,
                "files": self.files, "timings": self.timings}


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   write: bool = True) -> RunReport:
    """Train and evaluate every seed, writing per-seed files and ``report.json``."""
    out = Path(out_dir or cfg.out_dir)
    report = RunReport(cfg.to_dict(), [], {}, [], {}, status="incomplete")
    if write:
        out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        for seed in cfg.seeds:
            res = run_seed(cfg, seed, out / f"seed_{seed}" if write else None)
            report.per_seed.append(res.summary)
            report.results.append(res)
            for f in res.files:
                report.files.append({"path": str(f.relative_to(out)), "sha256": sha256(f),
                                     "bytes": f.stat().st_size})
            log.info("seed %d: acc %.4f auc %.4f jnd %.4f", seed, res.summary["acc"],
                     res.summary["auc"], res.summary["jnd"])
        report.summary = aggregate(report.per_seed)
        report.status = "complete"
    finally:
        report.timings = {"total_seconds": time.perf_counter() - t0,
                          "per_seed_seconds": [s["total_seconds"] for s in report.per_seed]}
        if write:
            (out / "report.json").write_text(dumps(report.to_json()))
    return report


def sweep_k(cfg: ExperimentConfig, k_values, out_dir=None, write: bool = True) -> list:
    """One experiment per K with nested known sets; rows of (K, JND, AUC) stats."""
    out = Path(out_dir or cfg.out_dir)
    total = cfg.dataset.total_classes if cfg.dataset.kind == "synthetic" else 10
    rows = []
    for k in k_values:
        if not 1 <= k < total:
            raise ConfigError(f"K={k} out of range for {total} classes")
        sub = with_overrides(cfg, **{"dataset.num_known": int(k), "dataset.known_ids": None})
        rep = run_experiment(sub, out / f"K_{k}", write=write)
        s = rep.summary
        rows.append({"K": int(k), "jnd_mean": s["jnd"]["mean"], "jnd_std": s["jnd"]["std"],
                     "auc_mean": s["auc"]["mean"], "auc_std": s["auc"]["std"],
                     "known_ids": [p["known_ids"] for p in rep.per_seed]})
    if write:
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "sweep_k.csv", ("K", "jnd_mean", "jnd_std", "auc_mean", "auc_std"),
                  [[r[c] for c in ("K", "jnd_mean", "jnd_std", "auc_mean", "auc_std")] for r in rows])
    return rows


TOGGLES = {
    "loss": "loss",
    "normalize": "model.normalize",
    "margin": "margin",
    "weight_decay": "weight_decay",
    "augment": "augment.kind",
    "ssl": "lambda_self",
}


def ablate(cfg: ExperimentConfig, toggles: dict, out_dir=None, write: bool = True) -> list:
    """Run every combination of the requested toggle values; one row per combination."""
    if not toggles:
        raise ConfigError("no ablation toggles given")
    for name in toggles:
        if name not in TOGGLES:
            raise ConfigError(f"unknown toggle '{name}' (choose from {sorted(TOGGLES)})")
    out = Path(out_dir or cfg.out_dir)
    names = list(toggles)
    rows = []
    for combo in itertools.product(*(toggles[n] for n in names)):
        changes = {TOGGLES[n]: v for n, v in zip(names, combo)}
        if changes.get("model.normalize") is False:
            changes.setdefault("margin", 0.0)
        sub = with_overrides(cfg, **changes)
        tag = "__".join(f"{n}={v}" for n, v in zip(names, combo))
        rep = run_experiment(sub, out / "ablation" / tag, write=write)
        s = rep.summary
        row = dict(zip(names, combo))
        for m in ("auc", "acc", "jnd"):
            row[f"{m}_mean"] = s[m]["mean"]
            row[f"{m}_std"] = s[m]["std"]
        rows.append(row)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        cols = names + [f"{m}_{s}" for m in ("auc", "acc", "jnd") for s in ("mean", "std")]
        write_csv(out / "ablation.csv", cols,
                  [[str(r[c]).lower() if isinstance(r[c], (bool, str)) else r[c] for c in cols]
                   for r in rows])
    return rows
