"""Dataset ingestion: IDX files and synthetic sparse regression."""
import gzip
import struct
from math import prod
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ..core import DTYPE, make_rng
from ..errors import ArgumentError, FormatError, NotFoundError

# IDX type code -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {dt.newbyteorder("="): code for code, dt in IDX_TYPES.items()}


class Dataset(NamedTuple):
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.x)


def _read_bytes(path):
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no such file: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw):
    """Decode an IDX byte string into an array with the declared extents."""
    if len(raw) < 4:
        raise FormatError(f"header needs 4 bytes, file has {len(raw)}", offset=len(raw))
    if raw[0] != 0 or raw[1] != 0:
        bad = 0 if raw[0] != 0 else 1
        raise FormatError(f"bad magic byte 0x{raw[bad]:02x}, expected 0x00", offset=bad)
    code, ndim = raw[2], raw[3]
    if code not in IDX_TYPES:
        raise FormatError(f"unknown type code 0x{code:02x}", offset=2)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"header declares {ndim} extents but file ends early", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = IDX_TYPES[code]
    expected = prod(dims) * dtype.itemsize
    actual = len(raw) - header
    if actual != expected:
        what = "truncated payload" if actual < expected else "trailing bytes after payload"
        raise FormatError(f"{what}: expected {expected} payload bytes, found {actual}",
                          offset=header + min(actual, expected))
    arr = np.frombuffer(raw, dtype=dtype, offset=header, count=prod(dims)).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def load_idx(path):
    """Read an IDX file (optionally gzipped).

    Rank-1 files are returned as integer label vectors; higher-rank unsigned
    byte files as float64 images scaled to [0, 1]; other types unscaled.
    """
    arr = parse_idx(_read_bytes(path))
    if arr.ndim == 1:
        if not np.issubdtype(arr.dtype, np.integer):
            raise FormatError("label file must hold integers", offset=2)
        return arr.astype(np.int64)
    if arr.dtype == np.uint8:
        return arr.astype(DTYPE) / 255.0
    return arr.astype(DTYPE)


def load_idx_dataset(images, labels):
    x, y = load_idx(images), load_idx(labels)
    if y.ndim != 1 or len(x) != len(y):
        raise FormatError(f"{len(x)} images but {len(y)} labels in {labels}")
    return Dataset(x, y)


def encode_idx(arr):
    arr = np.asarray(arr)
    code = IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ArgumentError(f"dtype {arr.dtype} has no IDX type code")
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(IDX_TYPES[code]).tobytes()


def write_idx(path, arr):
    raw = encode_idx(arr)
    if str(path).endswith(".gz"):
        raw = gzip.compress(raw, mtime=0)
    Path(path).write_bytes(raw)


def gen_synthetic(n, d, s, noise_sigma, seed):
    """Sparse linear model y = X w* + sigma * e with X, e standard normal.

    The s nonzero coordinates of w* are chosen at random, with magnitudes
    uniform in [1, 2] and random signs. Returns ``(X, y, w_star)``.
    """
    if not (n >= 1 and d >= 1 and 0 < s <= d):
        raise ArgumentError(f"need n, d >= 1 and 0 < s <= d, got n={n}, d={d}, s={s}")
    if noise_sigma < 0:
        raise ArgumentError("noise_sigma must be non-negative")
    rng = make_rng(seed)
    X = rng.standard_normal((n, d))
    w = np.zeros(d)
    support = np.sort(rng.choice(d, size=s, replace=False))
    w[support] = rng.uniform(1.0, 2.0, size=s) * rng.choice([-1.0, 1.0], size=s)
    y = X @ w + noise_sigma * rng.standard_normal(n)
    return X, y, w


def shape_for(x, input_shape):
    """Reshape a batch of samples to the network's input shape when sizes agree."""
    if x.shape[1:] == tuple(input_shape):
        return x
    if prod(x.shape[1:]) != prod(input_shape):
        raise ArgumentError(f"samples of shape {x.shape[1:]} cannot feed input {input_shape}")
    return x.reshape((len(x),) + tuple(input_shape))


def stratified_subset(y, per_class, rng):
    """Indices taking ``per_class`` samples of each label, in shuffled order."""
    idx = []
    for c in np.unique(y):
        pool = np.flatnonzero(y == c)
        if len(pool) < per_class:
            raise ArgumentError(f"class {c} has only {len(pool)} samples")
        idx.append(rng.choice(pool, size=per_class, replace=False))
    idx = np.concatenate(idx)
    return idx[rng.permutation(len(idx))]
