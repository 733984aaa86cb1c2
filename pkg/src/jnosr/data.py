"""Known/unknown datasets: synthetic blobs, MNIST IDX files, class splits."""
from __future__ import annotations

import gzip
import hashlib
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    code = "idx_error"


class IdxMagicError(IdxError):
    code = "bad_magic"


class IdxTruncatedError(IdxError):
    code = "truncated"


class IdxCountMismatchError(IdxError):
    code = "count_mismatch"


@dataclass(frozen=True)
class LabeledSet:
    x: np.ndarray  # (n, d), values in [-1, 1]
    y: np.ndarray  # (n,) original class ids
    image_shape: tuple | None = None


@dataclass(frozen=True)
class KnownSplit:
    """Labeled known-class samples; labels are contiguous 0..K-1."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


class UnknownPool:
    """Unlabeled samples of every non-known class, treated as one class."""

    def __init__(self, x: np.ndarray):
        self._x = x

    @property
    def x(self) -> np.ndarray:
        return self._x

    def __len__(self) -> int:
        return len(self._x)


@dataclass
class OsrDataset:
    train: KnownSplit
    test: KnownSplit
    unknown: UnknownPool
    num_classes: int
    dim: int
    image_shape: tuple | None = None
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------- synthetic

def _ball(rng, n, d, radius):
    v = rng.normal(size=(n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / d)
    return v * r[:, None]


def simplex_centers(n: int, d: int, edge: float, rng: np.random.Generator) -> np.ndarray:
    """``n <= d + 1`` vertices of a randomly rotated regular simplex with side ``edge``."""
    if n > d + 1:
        raise ValueError(f"a simplex in {d} dimensions has at most {d + 1} vertices")
    # standard basis vectors of R^n form a simplex with side sqrt(2)
    v = np.eye(n) - 1.0 / n
    basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
    # project onto the (n-1)-dim hyperplane they span, then rotate into R^d
    u, _, _ = np.linalg.svd(v.T, full_matrices=False)
    coords = v @ u[:, : n - 1]
    return edge / np.sqrt(2.0) * coords @ basis[: n - 1]


def gen_blobs(total_classes: int, d: int, n_per_class: int, separation: float = 0.5,
              radius: float = 0.08, seed=0, layout: str = "simplex",
              max_tries: int = 10000) -> LabeledSet:
    """Uniform balls inside [-1, 1]^d whose centers are pairwise >= separation apart.

    ``layout="simplex"`` (needs ``total_classes <= d + 1``) places the centers on
    a randomly rotated and shifted regular simplex with side ``separation``, so
    every pair of classes is equally far apart.  ``layout="random"`` samples
    centers uniformly in the cube by rejection.
    """
    if total_classes < 2 or d < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    if not separation > 2 * radius:
        raise ValueError("separation must exceed twice the radius")
    if not 0 < radius < 1:
        raise ValueError("radius must lie in (0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if layout == "simplex":
        centers = simplex_centers(total_classes, d, separation, rng)
        lo = -1 + radius - centers.min(axis=0)
        hi = 1 - radius - centers.max(axis=0)
        if np.any(lo > hi):
            raise ValueError("simplex with this separation does not fit in [-1, 1]^d")
        centers = centers + rng.uniform(lo, hi)
    elif layout == "random":
        centers = []
        tries = 0
        while len(centers) < total_classes:
            tries += 1
            if tries > max_tries:
                raise ValueError(f"could not place {total_classes} centers with separation {separation}")
            c = rng.uniform(-1 + radius, 1 - radius, size=d)
            if all(np.linalg.norm(c - o) >= separation for o in centers):
                centers.append(c)
        centers = np.array(centers)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    xs = [c + _ball(rng, n_per_class, d, radius) for c in centers]
    x = np.clip(np.concatenate(xs), -1.0, 1.0)
    y = np.repeat(np.arange(total_classes), n_per_class)
    return LabeledSet(x, y)


def blob_centers(raw: LabeledSet) -> np.ndarray:
    return np.stack([raw.x[raw.y == c].mean(axis=0) for c in np.unique(raw.y)])


# ---------------------------------------------------------------- splits

def split_known_unknown(raw: LabeledSet, known_ids, train_fraction: float = 0.7,
                        seed=0) -> OsrDataset:
    """Known classes are split train/test; all other classes pool as unknown."""
    ids = np.unique(raw.y)
    known_ids = [int(k) for k in known_ids]
    if not known_ids:
        raise ValueError("known_ids is empty")
    if len(set(known_ids)) != len(known_ids):
        raise ValueError("known_ids has duplicates")
    missing = set(known_ids) - set(ids.tolist())
    if missing:
        raise ValueError(f"known ids {sorted(missing)} not present in data")
    if len(known_ids) >= len(ids):
        raise ValueError("known_ids must be a proper subset of the class ids")
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must lie in (0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    remap = {c: i for i, c in enumerate(known_ids)}
    tr_idx, te_idx = [], []
    for c in known_ids:
        idx = np.flatnonzero(raw.y == c)
        idx = idx[rng.permutation(len(idx))]
        n_tr = int(round(train_fraction * len(idx)))
        tr_idx.append(idx[:n_tr])
        te_idx.append(idx[n_tr:])
    tr_idx = np.sort(np.concatenate(tr_idx))
    te_idx = np.sort(np.concatenate(te_idx))
    if len(te_idx) == 0:
        warnings.warn("train_fraction=1.0 leaves the known test split empty", stacklevel=2)
    lab = np.array([remap.get(int(c), -1) for c in raw.y])
    unk_mask = lab < 0
    unknown_ids = sorted(set(ids.tolist()) - set(known_ids))
    return OsrDataset(
        train=KnownSplit(raw.x[tr_idx], lab[tr_idx]),
        test=KnownSplit(raw.x[te_idx], lab[te_idx]),
        unknown=UnknownPool(raw.x[unk_mask]),
        num_classes=len(known_ids),
        dim=raw.x.shape[1],
        image_shape=raw.image_shape,
        meta={"known_ids": known_ids, "unknown_ids": unknown_ids},
    )


def row_hashes(x: np.ndarray) -> set:
    return {hashlib.sha1(np.ascontiguousarray(r).tobytes()).hexdigest() for r in x}


# ---------------------------------------------------------------- IDX files

def _read_bytes(path) -> bytes:
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def parse_idx(data: bytes, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX buffer into an array of its declared shape."""
    if len(data) < 4:
        raise IdxTruncatedError("file shorter than the IDX magic")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(data) < head:
        raise IdxTruncatedError("header truncated")
    dims = struct.unpack(f">{ndim}I", data[4:head])
    size = int(np.prod(dims))
    if len(data) != head + size:
        raise IdxTruncatedError(f"payload has {len(data) - head} bytes, header declares {size}")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=head).reshape(dims)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def load_idx_raw(images_path, labels_path) -> tuple:
    images = parse_idx(_read_bytes(images_path), IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    return images, labels


def load_idx(images_path, labels_path) -> LabeledSet:
    """Load an IDX image/label pair with pixels rescaled from [0, 255] to [-1, 1]."""
    images, labels = load_idx_raw(images_path, labels_path)
    shape = tuple(images.shape[1:])
    x = images.reshape(len(images), -1).astype(np.float64) / 127.5 - 1.0
    return LabeledSet(x, labels.astype(np.int64), shape)


# ---------------------------------------------------------------- images

def rotate90(image: np.ndarray, k: int) -> np.ndarray:
    """``k`` counter-clockwise quarter turns; (r, c) -> (W-1-c, r) for k=1."""
    if k not in (0, 1, 2, 3):
        raise ValueError(f"k must be in 0..3, got {k}")
    image = np.asarray(image)
    if k % 2 and image.shape[0] != image.shape[1]:
        raise ValueError("odd quarter turns need a square image")
    return np.rot90(image, k)


def rotate_batch(x: np.ndarray, image_shape: tuple, ks: np.ndarray) -> np.ndarray:
    imgs = x.reshape(len(x), *image_shape)
    out = np.empty_like(imgs)
    for k in range(4):
        sel = ks == k
        if sel.any():
            out[sel] = np.rot90(imgs[sel], k, axes=(1, 2))
    return out.reshape(len(x), -1)
