"""Synthetic datasets and the little-endian ``PRDK`` binary format.

File layout::

    b"PRDK"  u32 version  u32 n  u32 m  u32 p
    n records of (m*p float64 sample values, row-major) + 1 float64 target
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PRDK"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
PARALLEL_THRESHOLD = 1e-3


class DataFormatError(ValueError):
    """Bad magic number or unsupported version."""


class TruncatedDataError(DataFormatError):
    def __init__(self, offset: int, message: str):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DimensionMismatchError(DataFormatError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, m, p)
    targets: np.ndarray  # (n,)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if self.inputs.ndim != 3 or len(self.inputs) != len(self.targets):
            raise DimensionMismatchError(
                f"inputs {self.inputs.shape} and targets {self.targets.shape} do not line up"
            )

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def shape(self) -> tuple[int, int]:
        return self.inputs.shape[1], self.inputs.shape[2]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], dict(self.metadata))


def max_abs_cosine(inputs: np.ndarray) -> float:
    """Largest |cos| between distinct flattened samples (0 for n < 2)."""
    flat = inputs.reshape(len(inputs), -1)
    if len(flat) < 2:
        return 0.0
    unit = flat / np.linalg.norm(flat, axis=1, keepdims=True)
    c = np.abs(unit @ unit.T)
    np.fill_diagonal(c, 0.0)
    return float(c.max())


def generate_synthetic(
    n: int,
    m: int,
    p: int,
    seed: int = 0,
    targets=None,
    label_noise: float = 0.0,
    threshold: float = PARALLEL_THRESHOLD,
) -> Dataset:
    """Unit-Frobenius-norm Gaussian samples with no near-parallel pair.

    Labels come from a fixed random linear teacher ``y = <T, X>`` unless
    ``targets`` is given.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    samples: list[np.ndarray] = []
    draws = 0
    while len(samples) < n:
        draws += 1
        if draws > 1000 * n:
            raise RuntimeError(f"rejection sampling exceeded {1000 * n} draws")
        x = rng.standard_normal((m, p))
        x /= np.linalg.norm(x)
        if any(abs(float(np.vdot(x, s))) >= 1.0 - threshold for s in samples):
            continue
        samples.append(x)
    inputs = np.stack(samples)
    if targets is None:
        teacher = rng.standard_normal((m, p))
        y = np.einsum("nij,ij->n", inputs, teacher)
        if label_noise:
            y = y + label_noise * rng.standard_normal(n)
    else:
        y = np.asarray(targets, dtype=np.float64).reshape(-1)
        if len(y) != n:
            raise DimensionMismatchError(f"expected {n} targets, got {len(y)}")
    return Dataset(inputs, y, {"seed": seed, "normalized": True})


def dumps_binary(ds: Dataset) -> bytes:
    n = len(ds)
    m, p = ds.shape
    body = np.concatenate([ds.inputs.reshape(n, m * p), ds.targets[:, None]], axis=1)
    return _HEADER.pack(MAGIC, VERSION, n, m, p) + body.astype("<f8").tobytes()


def save_binary(ds: Dataset, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_binary(ds))
    os.replace(tmp, path)


def loads_binary(raw: bytes, normalize: bool = False, expect_shape=None) -> Dataset:
    if len(raw) < _HEADER.size:
        if raw[:4] and raw[:4] != MAGIC[: len(raw[:4])]:
            raise DataFormatError("bad magic number")
        raise TruncatedDataError(len(raw), "file ends inside the header")
    magic, version, n, m, p = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic number {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DataFormatError(f"unsupported version {version}")
    if expect_shape is not None and (m, p) != tuple(expect_shape):
        raise DimensionMismatchError(f"file holds samples of shape {(m, p)}, expected {tuple(expect_shape)}")
    record = (m * p + 1) * 8
    need = _HEADER.size + n * record
    if len(raw) < need:
        done = (len(raw) - _HEADER.size) // record
        raise TruncatedDataError(len(raw), f"record {done} of {n} is incomplete")
    if len(raw) > need:
        raise DimensionMismatchError(
            f"{len(raw) - need} trailing bytes after {n} records of shape {(m, p)}"
        )
    body = np.frombuffer(raw, dtype="<f8", count=n * (m * p + 1), offset=_HEADER.size)
    body = body.reshape(n, m * p + 1).astype(np.float64)
    inputs = body[:, :-1].reshape(n, m, p)
    if normalize:
        inputs = inputs / np.linalg.norm(inputs.reshape(n, -1), axis=1)[:, None, None]
    return Dataset(inputs, body[:, -1].copy(), {"normalized": bool(normalize)})


def load_binary(path, normalize: bool = False, expect_shape=None) -> Dataset:
    return loads_binary(Path(path).read_bytes(), normalize, expect_shape)
