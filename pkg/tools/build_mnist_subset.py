"""Build gzipped IDX files from the digits bundled in the npm ``mnist`` package.

The npm package (https://www.npmjs.com/package/mnist, v1.1.0) ships about
10k real MNIST digits as JSON arrays of ``pixel / 255`` rounded to three
decimals, so ``round(v * 255)`` recovers the original bytes.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python tools/build_mnist_subset.py package/src/digits data/mnist
"""
import argparse
import gzip
import json
from pathlib import Path

import numpy as np

from jnosr.data import encode_idx


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = [], []
    for digit in range(10):
        raw = np.asarray(json.loads((args.digits_dir / f"{digit}.json").read_text())["data"])
        px = np.rint(raw * 255).astype(np.uint8).reshape(-1, 28, 28)
        images.append(px)
        labels.append(np.full(len(px), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, arr in (("images-idx3-ubyte.gz", images), ("labels-idx1-ubyte.gz", labels)):
        with gzip.GzipFile(args.out_dir / name, "wb", mtime=0) as fh:
            fh.write(encode_idx(arr))
    print(f"wrote {len(labels)} digits to {args.out_dir}")


if __name__ == "__main__":
    main()
