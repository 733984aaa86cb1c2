"""Command line entry point: ``jnosr train|eval|probe|sweep-k|ablate``.

Exit codes: 0 success, 1 configuration error, 2 runtime or invariant failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import runner
from .embedding import OsrModel
from .osr_eval import diagnose, interpolation_probe, support_volume_estimate
from .runner import ConfigError

log = logging.getLogger("jnosr")


class InvariantError(RuntimeError):
    pass


def _config(args) -> runner.ExperimentConfig:
    cfg = runner.load_config(args.config) if args.config else runner.parse_config("{}")
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.out is not None:
        changes["out_dir"] = str(args.out)
    return runner.with_overrides(cfg, **changes) if changes else cfg


def _check_manifest(out: Path) -> None:
    report = json.loads((out / "report.json").read_text())
    for entry in report["files"]:
        p = out / entry["path"]
        if not p.exists() or p.stat().st_size == 0:
            raise InvariantError(f"manifest lists missing or empty file {p}")
        if runner.sha256(p) != entry["sha256"]:
            raise InvariantError(f"hash mismatch for {p}")


def _load_seed(cfg, seed: int, checkpoint):
    out = Path(cfg.out_dir)
    path = Path(checkpoint) if checkpoint else out / f"seed_{seed}" / "model.npz"
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path} (run 'train' first)")
    ds = runner.build_dataset(cfg, seed)
    return OsrModel.load(path), ds, path.parent


def cmd_train(args) -> None:
    cfg = _config(args)
    rep = runner.run_experiment(cfg)
    _check_manifest(Path(cfg.out_dir))
    for s in rep.per_seed:
        print(f"seed {s['seed']}: acc={s['acc']:.4f} auc={s['auc']:.4f} jnd={s['jnd']:.4g}")
    print(f"report: {Path(cfg.out_dir) / 'report.json'}")


def cmd_eval(args) -> None:
    cfg = _config(args)
    for seed in cfg.seeds:
        model, ds, where = _load_seed(cfg, seed, args.checkpoint)
        rep = diagnose(model, ds, cfg.train.loss, jacobian_samples=cfg.probe.jacobian_samples, seed=seed)
        doc = {"seed": seed, **{k: v for k, v in vars(rep).items() if k != "samples"}}
        (where / "eval.json").write_text(runner.dumps(doc))
        print(f"seed {seed}: acc={rep.acc:.4f} auc={rep.auc:.4f} jnd={rep.jnd:.4g}")


def cmd_probe(args) -> None:
    cfg = _config(args)
    for seed in cfg.seeds:
        model, ds, where = _load_seed(cfg, seed, args.checkpoint)
        if args.kind == "interp":
            rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
            pairs = runner.interp_pairs(ds, cfg.probe.interp_pairs, rng)
            probes = [interpolation_probe(model, a, b, cfg.probe.interp_points) for a, b in pairs]
            runner.write_csv(where / "interp_probe.csv", ("pair_id", "t", "jacobian_norm"),
                             [(p, t, j) for p, pr in enumerate(probes) for t, j in pr])
            print(f"seed {seed}: mid-path peak in {runner.mid_path_fraction(probes):.0%} of pairs")
        elif args.kind == "jacobian":
            rep = diagnose(model, ds, cfg.train.loss, jacobian_samples=cfg.probe.jacobian_samples, seed=seed)
            runner.write_csv(where / "scatter_score_jn.csv",
                             ("sample_id", "is_unknown", "score", "jacobian_norm"),
                             [(i, u, s, j) for i, (u, s, j) in enumerate(rep.samples)])
            print(f"seed {seed}: jn known={rep.mean_jn_known:.4g} unknown={rep.mean_jn_unknown:.4g}")
        else:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
            frac = support_volume_estimate(model, cfg.probe.mc_samples, seed=rng,
                                           known_x=ds.train.x[: cfg.probe.jacobian_samples])
            (where / "volume.json").write_text(runner.dumps(
                {"seed": seed, "fraction": frac, "mc_samples": cfg.probe.mc_samples}))
            print(f"seed {seed}: support volume fraction {frac:.4f}")


def cmd_sweep(args) -> None:
    cfg = _config(args)
    ks = [int(k) for k in args.k.split(",") if k.strip()]
    if not ks:
        raise ConfigError("--k needs at least one value")
    for r in runner.sweep_k(cfg, ks):
        print(f"K={r['K']}: jnd={r['jnd_mean']:.4g} auc={r['auc_mean']:.4f}")


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_toggles(items) -> dict:
    toggles = {}
    for item in items or []:
        name, sep, vals = item.partition("=")
        if not sep or not vals:
            raise ConfigError(f"toggle '{item}' must look like name=v1,v2")
        toggles[name.strip()] = [_value(v.strip()) for v in vals.split(",")]
    return toggles


def cmd_ablate(args) -> None:
    cfg = _config(args)
    for r in runner.ablate(cfg, parse_toggles(args.toggle)):
        print(json.dumps(runner._round(r), sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="jnosr", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common]).set_defaults(fn=cmd_train)
    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--checkpoint", type=Path)
    p.set_defaults(fn=cmd_eval)
    p = sub.add_parser("probe", parents=[common])
    p.add_argument("kind", choices=("interp", "jacobian", "volume"))
    p.add_argument("--checkpoint", type=Path)
    p.set_defaults(fn=cmd_probe)
    p = sub.add_parser("sweep-k", parents=[common])
    p.add_argument("--k", default="2,4,6,8", help="comma separated K values")
    p.set_defaults(fn=cmd_sweep)
    p = sub.add_parser("ablate", parents=[common])
    p.add_argument("--toggle", action="append", metavar="NAME=V1,V2",
                   help=f"repeatable; names: {', '.join(sorted(runner.TOGGLES))}")
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
