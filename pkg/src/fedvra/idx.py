"""Reader and writer for the big-endian IDX format used by the MNIST files.

A file starts with a 4-byte magic ``00 00 <type> <ndim>`` followed by
``ndim`` big-endian uint32 sizes and the row-major payload.  Only unsigned
bytes (type ``0x08``) are supported, which covers images (magic 2051) and
labels (magic 2049).  Paths ending in ``.gz`` are transparently
(de)compressed.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .objectives import Shard

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049
UBYTE = 0x08

# conventional MNIST pixel statistics after scaling to [0, 1]
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081

PathLike = Union[str, Path]


class IdxFormatError(ValueError):
    pass


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(raw: bytes, expected_magic: int | None = None) -> np.ndarray:
    if len(raw) < 4:
        raise IdxFormatError("truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"magic {magic} does not match expected {expected_magic}")
    if magic >> 16 != 0:
        raise IdxFormatError(f"bad magic {magic:#010x}")
    dtype_code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if dtype_code != UBYTE:
        raise IdxFormatError(f"unsupported element type {dtype_code:#04x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError("truncated dimension block")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(raw) - header < count:
        raise IdxFormatError(f"truncated payload: expected {count} bytes, found {len(raw) - header}")
    if len(raw) - header > count:
        raise IdxFormatError("trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_idx(path: PathLike, expected_magic: int | None = None) -> np.ndarray:
    return parse_idx(_read_bytes(path), expected_magic)


def encode_idx(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("only uint8 arrays can be written")
    magic = (UBYTE << 8) | arr.ndim
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + np.ascontiguousarray(arr).tobytes()


def write_idx(path: PathLike, array: np.ndarray) -> None:
    path = Path(path)
    data = encode_idx(array)
    if path.suffix == ".gz":
        # fixed mtime keeps the compressed bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(data)
    else:
        path.write_bytes(data)


def load_idx(images_path: PathLike, labels_path: PathLike, normalize: bool = True,
             mean: float = MNIST_MEAN, std: float = MNIST_STD) -> Shard:
    """Load an image/label IDX pair as a shard of flattened row-major images.

    Pixels are scaled to ``[0, 1]`` and, with ``normalize``, standardized as
    ``(v - mean) / std``.
    """
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.ndim != 3:
        raise IdxFormatError("image file must hold a 3-d array")
    if labels.ndim != 1:
        raise IdxFormatError("label file must hold a 1-d array")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    if normalize:
        X = (X - mean) / std
    return Shard(X, labels.astype(np.int64))
