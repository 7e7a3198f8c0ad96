"""MNIST IDX reading, batching and checkpoint files.

Checkpoint layout (all integers little-endian)::

    b"NLABCKPT"                      magic, 8 bytes
    u32 version                      currently 1
    u32 n, n bytes                   UTF-8 JSON: {"spec": ..., "provenance": ...}
    u32 tensor count
    per tensor:
        u32 n, n bytes               UTF-8 name
        u32 rank, rank * u32 dims
        prod(dims) * f64             row-major values
"""

from __future__ import annotations

import gzip
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .models import ModelSpec, Params

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
CHECKPOINT_MAGIC = b"NLABCKPT"
CHECKPOINT_VERSION = 1

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(Exception):
    """Base class for dataset and checkpoint failures."""


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class CheckpointVersionError(DataError):
    pass


class CorruptCheckpointError(DataError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, 28, 28) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, start: int = 0, stop: int | None = None) -> "Dataset":
        return Dataset(self.images[start:stop], self.labels[start:stop], self.split)


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: Params
    provenance: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedFileError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _parse_idx(raw: bytes, magic: int, ndims: int, path) -> np.ndarray:
    head = 4 + 4 * ndims
    if len(raw) < head:
        raise TruncatedFileError(f"{path}: header needs {head} bytes, file has {len(raw)}")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndims}I", raw[4:head])
    need = int(np.prod(dims))
    if len(raw) - head < need:
        raise TruncatedFileError(f"{path}: {len(raw) - head} data bytes, header promises {need}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=head).reshape(dims)


def load_idx(images_path, labels_path, split: str = "") -> Dataset:
    """Read an IDX image/label pair (plain or gzip). Pixels are scaled by 1/255."""
    images = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, 1, labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{images_path} holds {len(images)} images, {labels_path} holds {len(labels)} labels")
    n, h, w = images.shape
    return Dataset(images.reshape(n, 1, h, w).astype(np.float64) / 255.0, labels.astype(np.int64), split)


def default_data_dir() -> Path:
    return Path(os.environ.get("NORMLAB_DATA_DIR", "data/mnist"))


def load_mnist(split: str = "train", root=None) -> Dataset:
    """Load the standard MNIST files for ``split`` from ``root`` (or $NORMLAB_DATA_DIR)."""
    if split not in MNIST_FILES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(root) if root is not None else default_data_dir()
    paths = []
    for name in MNIST_FILES[split]:
        for candidate in (root / name, root / (name + ".gz")):
            if candidate.exists():
                paths.append(candidate)
                break
        else:
            raise DataError(f"MNIST file {name}[.gz] not found under {root}")
    return load_idx(*paths, split=split)


def batches(ds: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(images, labels, indices)``; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(len(ds)) if shuffle else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx], idx


# -- checkpoints ----------------------------------------------------------------------


def _encode(cp: Checkpoint) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps({"spec": cp.spec.to_dict(), "provenance": cp.provenance}, sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", cp.version, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(cp.params)))
    for name, arr in cp.params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        key = name.encode()
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(path, cp: Checkpoint) -> None:
    """Write ``cp`` atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_encode(cp))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError(f"{self.path}: unexpected end of file at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a normlab checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    try:
        meta = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable metadata ({exc})") from exc
    params: Params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        dims = tuple(r.u32(rank)) if rank > 1 else ((r.u32(),) if rank == 1 else ())
        count = int(np.prod(dims)) if dims else 1
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(raw):
        raise CorruptCheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return Checkpoint(ModelSpec.from_dict(meta["spec"]), params, meta.get("provenance", {}), version)
