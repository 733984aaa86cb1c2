"""Shared seeded runs (trained once per session) and the acceptance summary printer."""
import json
import time
from pathlib import Path

import pytest

from jnosr import runner

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist"
SEEDS = [0, 1, 2, 3, 4]

ACCEPTANCE: dict = {}


def record(key: str, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[key] = (title, bool(passed), detail)
    print(f"[{'PASS' if passed else 'FAIL'}] {key} {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        title, ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key:<4} {title}: {detail}")


def timed_run(cfg, out=None):
    t0 = time.perf_counter()
    rep = runner.run_experiment(cfg, out, write=out is not None)
    return rep, time.perf_counter() - t0


@pytest.fixture(scope="session")
def synthetic_cfg():
    return runner.parse_config(json.dumps({"seeds": SEEDS}))


@pytest.fixture(scope="session")
def synthetic_run(synthetic_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    rep, _ = timed_run(synthetic_cfg, out)
    return rep, out


@pytest.fixture(scope="session")
def synthetic_sce(synthetic_cfg):
    return timed_run(runner.with_overrides(synthetic_cfg, loss="sce"))[0]


@pytest.fixture(scope="session")
def synthetic_no_margin(synthetic_cfg):
    return timed_run(runner.with_overrides(synthetic_cfg, margin=0.0))[0]


@pytest.fixture(scope="session")
def synthetic_no_decay(synthetic_cfg):
    return timed_run(runner.with_overrides(synthetic_cfg, weight_decay=0.0))[0]


@pytest.fixture(scope="session")
def k_sweep(synthetic_cfg):
    return runner.sweep_k(synthetic_cfg, [2, 8], write=False)


@pytest.fixture(scope="session")
def mnist_cfg():
    images, labels = MNIST_DIR / "images-idx3-ubyte.gz", MNIST_DIR / "labels-idx1-ubyte.gz"
    if not images.exists():
        pytest.skip("MNIST IDX files missing; see tools/build_mnist_subset.py")
    doc = {"dataset": {"kind": "idx", "images": str(images), "labels": str(labels), "num_known": 6},
           "seeds": SEEDS}
    return runner.parse_config(json.dumps(doc))


@pytest.fixture(scope="session")
def mnist_runs(mnist_cfg):
    on = [timed_run(runner.with_overrides(mnist_cfg, seeds=[s])) for s in SEEDS]
    off_cfg = runner.with_overrides(mnist_cfg, weight_decay=0.0)
    off = [timed_run(runner.with_overrides(off_cfg, seeds=[s])) for s in SEEDS]
    return on, off
