"""Dataset ingestion: CSV tables, IDX image files and seeded synthetic sources.

Descriptors are dicts with a ``kind`` key:

- ``csv_classification``: ``path``, optional ``label_column`` (default -1),
  ``header`` (default False), ``shape`` (per-sample shape to reshape features
  to) and ``normalize`` (preset name).
- ``idx_images``: ``path``, optional ``labels_path``, ``scale`` (divide
  unsigned bytes by 255, default True) and ``normalize``.
- ``synthetic_gaussian``: ``k`` classes, ``dim``, ``n``, ``seed``, optional
  ``separation`` (scale of the class means, default 1.0) and ``noise``.
- ``synthetic_tokens``: ``vocab``, ``length``, ``seed``, optional
  ``branching`` (successors per token, default 4).

Samples come back in a deterministic order; shuffling happens in the trainer.
"""
import csv
import struct
from dataclasses import dataclass

import numpy as np

from prefact.errors import ArgumentError, DatasetParseError

# per-channel (mean, std) in [0, 1] pixel units
PRESETS = {
    "cifar10": ((0.491, 0.482, 0.447), (0.247, 0.244, 0.262)),
    "imagenet": ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
}

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


@dataclass
class ClassificationData:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.y)


@dataclass
class TokenData:
    tokens: np.ndarray
    vocab: int

    def __len__(self):
        return len(self.tokens)


def normalize(x, preset):
    """``(x - mean[c]) / std[c]`` along channel axis 1."""
    try:
        mean, std = PRESETS[preset]
    except KeyError:
        raise ArgumentError(f"unknown normalization preset {preset!r}") from None
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[1] != len(mean):
        raise ArgumentError(f"preset {preset!r} needs {len(mean)} channels on axis 1, got {x.shape}")
    shape = (1, -1) + (1,) * (x.ndim - 2)
    return (x - np.reshape(mean, shape)) / np.reshape(std, shape)


def _finish(x, y, desc, num_classes=None):
    if "shape" in desc:
        try:
            x = x.reshape((len(x),) + tuple(desc["shape"]))
        except ValueError:
            raise ArgumentError(f"cannot reshape features {x.shape} to {desc['shape']}") from None
    if desc.get("normalize"):
        x = normalize(x, desc["normalize"])
    k = int(num_classes if num_classes is not None else (y.max() + 1 if len(y) else 0))
    return ClassificationData(x, y.astype(np.int64), k)


def load_csv(desc):
    path = desc["path"]
    label_col = int(desc.get("label_column", -1))
    with open(path, "rb") as fh:
        raw = fh.read()
    rows, labels = [], []
    offset = 0
    width = None
    for lineno, line in enumerate(raw.split(b"\n"), 1):
        start = offset
        offset += len(line) + 1
        text = line.decode("utf-8", errors="replace").strip()
        if not text or (lineno == 1 and desc.get("header", False)):
            continue
        fields = next(csv.reader([text]))
        if width is None:
            width = len(fields)
        if len(fields) != width:
            raise DatasetParseError(f"{path}: expected {width} fields, got {len(fields)}",
                                    line=lineno, byte=start)
        try:
            vals = [float(f) for f in fields]
        except ValueError as exc:
            raise DatasetParseError(f"{path}: {exc}", line=lineno, byte=start) from None
        lab = vals.pop(label_col)
        if lab != int(lab) or lab < 0:
            raise DatasetParseError(f"{path}: label {lab} is not a non-negative integer",
                                    line=lineno, byte=start)
        rows.append(vals)
        labels.append(int(lab))
    if not rows:
        raise DatasetParseError(f"{path}: no data rows", line=1, byte=0)
    return _finish(np.array(rows, dtype=np.float64), np.array(labels), desc, desc.get("num_classes"))


def read_idx(path):
    """Parse an IDX file into an ndarray."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DatasetParseError(f"{path}: bad IDX magic", byte=0)
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise DatasetParseError(f"{path}: unknown IDX element type 0x{code:02x}", byte=2)
    if len(raw) < 4 + 4 * ndim:
        raise DatasetParseError(f"{path}: truncated IDX header", byte=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dtype = np.dtype(_IDX_TYPES[code])
    need = int(np.prod(dims)) * dtype.itemsize
    body = raw[4 + 4 * ndim:]
    if len(body) < need:
        raise DatasetParseError(f"{path}: truncated IDX payload ({len(body)} of {need} bytes)",
                                byte=len(raw))
    if len(body) > need:
        raise DatasetParseError(f"{path}: {len(body) - need} trailing bytes after IDX payload",
                                byte=4 + 4 * ndim + need)
    return np.frombuffer(body, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def load_idx(desc):
    arr = read_idx(desc["path"])
    x = arr.astype(np.float64)
    if arr.dtype == np.uint8 and desc.get("scale", True):
        x /= 255.0
    if x.ndim == 3:
        x = x[:, None]
    if desc.get("labels_path"):
        y = read_idx(desc["labels_path"]).astype(np.int64).ravel()
        if len(y) != len(x):
            raise DatasetParseError(f"{desc['labels_path']}: {len(y)} labels for {len(x)} images")
    else:
        y = np.zeros(len(x), dtype=np.int64)
    return _finish(x, y, desc, desc.get("num_classes"))


def synthetic_gaussian(k, dim, n, seed, separation=1.0, noise=1.0):
    """Balanced ``k``-class Gaussian blobs; sample ``i`` has label ``i % k``."""
    if k < 1 or dim < 1 or n < 1:
        raise ArgumentError("synthetic_gaussian needs k, dim, n >= 1")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((k, dim)) * separation
    y = np.arange(n) % k
    x = means[y] + noise * rng.standard_normal((n, dim))
    return x, y


def synthetic_tokens(vocab, length, seed, branching=4):
    """Token stream from a seeded sparse Markov chain."""
    if vocab < 2 or length < 2:
        raise ArgumentError("synthetic_tokens needs vocab >= 2 and length >= 2")
    rng = np.random.default_rng(seed)
    b = min(branching, vocab)
    succ = np.stack([rng.choice(vocab, size=b, replace=False) for _ in range(vocab)])
    probs = rng.dirichlet(np.ones(b), size=vocab)
    cum = np.cumsum(probs, axis=1)
    u = rng.random(length)
    out = np.empty(length, dtype=np.int64)
    out[0] = rng.integers(vocab)
    for t in range(1, length):
        row = out[t - 1]
        j = min(int(np.searchsorted(cum[row], u[t])), b - 1)
        out[t] = succ[row, j]
    return out


def load_dataset(desc):
    """Load a descriptor into :class:`ClassificationData` or :class:`TokenData`."""
    kind = desc.get("kind")
    if kind == "csv_classification":
        return load_csv(desc)
    if kind == "idx_images":
        return load_idx(desc)
    if kind == "synthetic_gaussian":
        x, y = synthetic_gaussian(int(desc["k"]), int(desc["dim"]), int(desc["n"]), int(desc["seed"]),
                                  float(desc.get("separation", 1.0)), float(desc.get("noise", 1.0)))
        return _finish(x, y, desc, int(desc["k"]))
    if kind == "synthetic_tokens":
        toks = synthetic_tokens(int(desc["vocab"]), int(desc["length"]), int(desc["seed"]),
                                int(desc.get("branching", 4)))
        return TokenData(toks, int(desc["vocab"]))
    raise ArgumentError(f"unknown dataset kind {kind!r}")
