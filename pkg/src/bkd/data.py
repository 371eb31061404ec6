"""Dataset ingestion and generation."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .nn import PolynomialModel
from .tensor import Tensor

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
KINDS = ("classification", "regression", "token")


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    kind: str
    n_classes: int = 0
    note: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if len(self.inputs) == 0:
            raise ValueError("dataset is empty")
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.kind != "regression" and self.n_classes:
            if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
                raise ValueError(f"labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def take(self, index) -> "Dataset":
        idx = np.asarray(index, dtype=np.int64)
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx])

    def targets(self) -> np.ndarray:
        """Regression targets as a column ``[n x 1]``."""
        return np.asarray(self.labels, dtype=np.float64).reshape(len(self), -1)


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: Optional[int] = None) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise DataFormatError(f"{path}: magic {magic}, expected {expected_magic}")
    if magic >> 8 != 0x08:
        raise DataFormatError(f"{path}: magic {magic} is not an unsigned-byte IDX file")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataFormatError(f"{path}: payload has {len(raw) - header} bytes, expected {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x0800 | arr.ndim
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    data = header + arr.tobytes()
    if str(path).endswith(".gz"):
        data = gzip.compress(data, mtime=0)
    Path(path).write_bytes(data)


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.ndim != 3 or labels.ndim != 1:
        raise DataFormatError("expected a 3-d image array and a 1-d label array")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), "classification", n_classes=10,
                   note=f"idx:{Path(images_path).name}")


# ---------------------------------------------------------------------------
# generators


def _check_interval(interval) -> tuple[float, float]:
    lo, hi = (float(v) for v in interval)
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ValueError(f"degenerate interval {interval}")
    return lo, hi


def gen_synthetic(teacher: PolynomialModel, n: int, interval=(-1.0, 1.0), seed: int = 0,
                  spacing: str = "random") -> Dataset:
    """``n`` points on the teacher curve; x uniform-random (seeded) or equally spaced."""
    if n < 2:
        raise ValueError("need at least two synthetic points")
    lo, hi = _check_interval(interval)
    if spacing == "random":
        x = np.sort(np.random.default_rng(seed).uniform(lo, hi, size=n))
    elif spacing == "equal":
        x = np.linspace(lo, hi, n)
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    x = x.reshape(n, 1)
    y = teacher.forward(Tensor(x)).data.ravel()
    return Dataset(x, y, "regression", note=f"synthetic deg={teacher.degree} n={n}")


def token_parity(tokens: np.ndarray) -> np.ndarray:
    return (np.asarray(tokens).sum(axis=1) % 2).astype(np.int64)


def gen_token_task(vocab: int, seq_len: int, n: int, seed: int = 0) -> Dataset:
    """Random token sequences labelled by the parity of their id sum."""
    if vocab < 2:
        raise ValueError("vocab must be at least 2")
    if seq_len < 1 or n < 1:
        raise ValueError("seq_len and n must be positive")
    tokens = np.random.default_rng(seed).integers(0, vocab, size=(n, seq_len))
    return Dataset(tokens, token_parity(tokens), "token", n_classes=2,
                   note=f"parity vocab={vocab} seq={seq_len}")


def subsample(ds: Dataset, fraction: float, seed: int = 0, stratified: bool = True) -> Dataset:
    """Seeded subset; stratified selection keeps each class within one sample of exact share."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return ds
    n = len(ds)
    total = int(round(n * fraction))
    if total == 0:
        raise ValueError(f"fraction {fraction} of {n} samples selects nothing")
    rng = np.random.default_rng(seed)
    if not stratified or ds.kind == "regression":
        return ds.take(np.sort(rng.choice(n, size=total, replace=False)))
    classes, counts = np.unique(ds.labels, return_counts=True)
    exact = counts * fraction
    quota = np.floor(exact).astype(int)
    # largest remainders take the leftover slots
    leftover = total - quota.sum()
    order = np.argsort(-(exact - quota), kind="stable")
    quota[order[:leftover]] += 1
    chosen = []
    for c, q in zip(classes, quota):
        members = np.flatnonzero(ds.labels == c)
        chosen.append(rng.choice(members, size=q, replace=False))
    return ds.take(np.sort(np.concatenate(chosen)))


def stratified_split(ds: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint (train, test) split with per-class proportions preserved."""
    marker = replace(ds, inputs=np.arange(len(ds)).reshape(-1, 1))
    test_idx = subsample(marker, test_fraction, seed, stratified=True).inputs.ravel()
    mask = np.ones(len(ds), dtype=bool)
    mask[test_idx] = False
    return ds.take(np.flatnonzero(mask)), ds.take(test_idx)


# ---------------------------------------------------------------------------
# binary dump, sibling of the model checkpoint container
#
# "BKDD" | u8 version | u8 kind | u8 input dtype (0=f64, 1=i64) | u32 n | u32 d | u32 n_classes
# payload: inputs (little-endian), then labels (f64 for regression, i64 otherwise)

DATA_MAGIC = b"BKDD"
DATA_VERSION = 1


def dataset_to_bytes(ds: Dataset) -> bytes:
    is_int = np.issubdtype(ds.inputs.dtype, np.integer)
    head = DATA_MAGIC + struct.pack("<BBBIII", DATA_VERSION, KINDS.index(ds.kind), int(is_int),
                                    len(ds), ds.inputs.shape[1], ds.n_classes)
    inputs = ds.inputs.astype("<i8" if is_int else "<f8")
    labels = ds.labels.astype("<f8" if ds.kind == "regression" else "<i8")
    return head + inputs.tobytes() + labels.tobytes()


def dataset_from_bytes(buf: bytes) -> Dataset:
    if buf[:4] != DATA_MAGIC:
        raise DataFormatError(f"bad dataset magic {buf[:4]!r}")
    fmt = "<BBBIII"
    size = struct.calcsize(fmt)
    if len(buf) < 4 + size:
        raise DataFormatError("dataset header truncated")
    version, kind, is_int, n, d, n_classes = struct.unpack_from(fmt, buf, 4)
    if version != DATA_VERSION:
        raise DataFormatError(f"unsupported dataset version {version}")
    off = 4 + size
    if len(buf) != off + 8 * n * d + 8 * n:
        raise DataFormatError("dataset payload size mismatch")
    inputs = np.frombuffer(buf, dtype="<i8" if is_int else "<f8", count=n * d, offset=off)
    off += 8 * n * d
    kind_name = KINDS[kind]
    labels = np.frombuffer(buf, dtype="<f8" if kind_name == "regression" else "<i8",
                           count=n, offset=off)
    inputs = inputs.astype(np.int64 if is_int else np.float64).reshape(n, d)
    labels = labels.astype(np.float64 if kind_name == "regression" else np.int64)
    return Dataset(inputs, labels, kind_name, n_classes=n_classes)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
