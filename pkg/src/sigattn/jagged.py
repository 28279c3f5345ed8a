"""Variable-length (jagged) padded batches.

Tensors are laid out row-major as ``[Z, L, H, D]`` (batch, padded length,
heads, head dim), so ``q[z, m, h, :]`` addresses one query vector.  Positions
at or beyond ``n_q[z]`` / ``n_k[z]`` are padding.  Padding is zero-filled by
convention, but nothing downstream reads it: masking happens on the scores.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

__all__ = [
    "DimensionError",
    "EmptyInputError",
    "JaggedBatch",
    "LengthDistributionSpec",
    "sample_lengths",
    "generate_batch",
    "coverage_at_thresholds",
    "length_histogram",
    "padding_fraction",
    "save_batch",
    "load_batch",
]


class DimensionError(ValueError):
    """Raised for non-positive sizes or mismatched tensor shapes."""


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class JaggedBatch:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    n_q: np.ndarray
    n_k: np.ndarray

    def __post_init__(self):
        q, k, v = self.q, self.k, self.v
        if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
            raise DimensionError("q, k, v must be 4-d [Z, L, H, D]")
        Z, _, H, D = q.shape
        if min(q.shape) < 1 or min(k.shape) < 1:
            raise DimensionError(f"all dimensions must be >= 1, got q{q.shape} k{k.shape}")
        if k.shape != v.shape:
            raise DimensionError(f"k{k.shape} and v{v.shape} differ")
        if k.shape[0] != Z or k.shape[2] != H or k.shape[3] != D:
            raise DimensionError(f"q{q.shape} incompatible with k{k.shape}")
        n_q = np.asarray(self.n_q, dtype=np.int64).reshape(-1)
        n_k = np.asarray(self.n_k, dtype=np.int64).reshape(-1)
        if n_q.shape != (Z,) or n_k.shape != (Z,):
            raise DimensionError("n_q and n_k must have one entry per sequence")
        if np.any(n_q < 1) or np.any(n_q > self.L_q):
            raise DimensionError(f"n_q out of range [1, {self.L_q}]: {n_q}")
        if np.any(n_k < 1) or np.any(n_k > self.L_k):
            raise DimensionError(f"n_k out of range [1, {self.L_k}]: {n_k}")
        object.__setattr__(self, "n_q", n_q)
        object.__setattr__(self, "n_k", n_k)

    @property
    def Z(self) -> int:
        return self.q.shape[0]

    @property
    def L_q(self) -> int:
        return self.q.shape[1]

    @property
    def L_k(self) -> int:
        return self.k.shape[1]

    @property
    def H(self) -> int:
        return self.q.shape[2]

    @property
    def D(self) -> int:
        return self.q.shape[3]

    @property
    def dtype(self) -> np.dtype:
        return self.q.dtype

    def query_mask(self) -> np.ndarray:
        """Boolean ``[Z, L_q]``, True at valid query positions."""
        return np.arange(self.L_q)[None, :] < self.n_q[:, None]

    def key_mask(self) -> np.ndarray:
        return np.arange(self.L_k)[None, :] < self.n_k[:, None]

    def astype(self, dtype) -> "JaggedBatch":
        return JaggedBatch(
            self.q.astype(dtype), self.k.astype(dtype), self.v.astype(dtype), self.n_q, self.n_k
        )

    def replace(self, **tensors) -> "JaggedBatch":
        fields = dict(q=self.q, k=self.k, v=self.v, n_q=self.n_q, n_k=self.n_k)
        fields.update(tensors)
        return JaggedBatch(**fields)

    def fill_padding(self, value: float) -> "JaggedBatch":
        """Copy of the batch with every pad-region entry set to ``value``."""
        qm = self.query_mask()[:, :, None, None]
        km = self.key_mask()[:, :, None, None]
        return self.replace(
            q=np.where(qm, self.q, value).astype(self.dtype),
            k=np.where(km, self.k, value).astype(self.dtype),
            v=np.where(km, self.v, value).astype(self.dtype),
        )


@dataclass(frozen=True)
class LengthDistributionSpec:
    """Sequence-length distribution for synthetic jagged data.

    ``loc``/``scale`` are the log-space mean and std for ``lognormal`` and the
    constant length (``loc``) for ``fixed``; ``uniform`` draws integers in
    ``[min_len, max_len]``.  Every draw is clamped to ``[min_len, max_len]``.
    """

    family: Literal["lognormal", "uniform", "fixed"] = "lognormal"
    loc: float = 7.3
    scale: float = 0.8
    min_len: int = 64
    max_len: int = 16384
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("lognormal", "uniform", "fixed"):
            raise ValueError(f"unknown length family {self.family!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        if self.family == "lognormal" and self.scale < 0:
            raise ValueError("lognormal scale must be >= 0")

    @classmethod
    def fixed(cls, length: int, seed: int = 0) -> "LengthDistributionSpec":
        return cls("fixed", float(length), 0.0, length, length, seed)


def sample_lengths(
    spec: LengthDistributionSpec, count: int, rng: np.random.Generator | None = None
) -> np.ndarray:
    if count < 1:
        raise DimensionError(f"count must be >= 1, got {count}")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    if spec.family == "fixed":
        raw = np.full(count, round(spec.loc), dtype=np.int64)
    elif spec.family == "uniform":
        raw = rng.integers(spec.min_len, spec.max_len, size=count, endpoint=True)
    else:
        raw = np.rint(rng.lognormal(spec.loc, spec.scale, size=count)).astype(np.int64)
    return np.clip(raw, spec.min_len, spec.max_len).astype(np.int64)


def generate_batch(
    spec: LengthDistributionSpec,
    Z: int,
    L: int,
    H: int,
    D: int,
    seed: int,
    *,
    L_k: int | None = None,
    asymmetric: bool = False,
    dtype=np.float64,
) -> JaggedBatch:
    """Random batch with lengths from ``spec`` (clamped to the padded length).

    Valid entries are i.i.d. standard normal, padding is zero.  Key lengths
    equal query lengths unless ``asymmetric`` is set.
    """
    L_k = L if L_k is None else L_k
    for name, val in (("Z", Z), ("L", L), ("L_k", L_k), ("H", H), ("D", D)):
        if val < 1:
            raise DimensionError(f"{name} must be >= 1, got {val}")
    rng = np.random.default_rng(seed)
    n_q = np.minimum(sample_lengths(spec, Z, rng), L)
    n_k = np.minimum(sample_lengths(spec, Z, rng), L_k) if asymmetric else np.minimum(n_q, L_k)

    q = rng.standard_normal((Z, L, H, D))
    k = rng.standard_normal((Z, L_k, H, D))
    v = rng.standard_normal((Z, L_k, H, D))
    qm = (np.arange(L)[None, :] < n_q[:, None])[:, :, None, None]
    km = (np.arange(L_k)[None, :] < n_k[:, None])[:, :, None, None]
    return JaggedBatch(
        (q * qm).astype(dtype), (k * km).astype(dtype), (v * km).astype(dtype), n_q, n_k
    )


def coverage_at_thresholds(lengths, thresholds) -> np.ndarray:
    """Fraction of sequences with length <= t, for each threshold t."""
    lengths = np.asarray(lengths).reshape(-1)
    if lengths.size == 0:
        raise EmptyInputError("no lengths given")
    thresholds = np.asarray(thresholds).reshape(-1)
    ordered = np.sort(lengths)
    return np.searchsorted(ordered, thresholds, side="right") / lengths.size


def length_histogram(lengths, bins: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Counts and bin edges over the observed length range."""
    lengths = np.asarray(lengths).reshape(-1)
    if lengths.size == 0:
        raise EmptyInputError("no lengths given")
    return np.histogram(lengths, bins=bins)


def padding_fraction(batch: JaggedBatch) -> float:
    return 1.0 - float(batch.n_q.sum()) / (batch.Z * batch.L_q)


# Container: little-endian int64 header (Z, L_q, L_k, H, D), int64 n_q, int64 n_k,
# then float32 q, k, v in C order.
_HEADER = struct.Struct("<5q")


def save_batch(batch: JaggedBatch, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(batch.Z, batch.L_q, batch.L_k, batch.H, batch.D))
        fh.write(batch.n_q.astype("<i8").tobytes())
        fh.write(batch.n_k.astype("<i8").tobytes())
        for t in (batch.q, batch.k, batch.v):
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_batch(path, dtype=np.float32) -> JaggedBatch:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DimensionError(f"{path}: truncated header")
    Z, L_q, L_k, H, D = _HEADER.unpack_from(data, 0)
    off = _HEADER.size
    n_q = np.frombuffer(data, "<i8", Z, off)
    off += 8 * Z
    n_k = np.frombuffer(data, "<i8", Z, off)
    off += 8 * Z
    expected = off + 4 * (Z * L_q * H * D + 2 * Z * L_k * H * D)
    if len(data) != expected:
        raise DimensionError(f"{path}: expected {expected} bytes, found {len(data)}")
    q = np.frombuffer(data, "<f4", Z * L_q * H * D, off).reshape(Z, L_q, H, D)
    off += 4 * q.size
    k = np.frombuffer(data, "<f4", Z * L_k * H * D, off).reshape(Z, L_k, H, D)
    off += 4 * k.size
    v = np.frombuffer(data, "<f4", Z * L_k * H * D, off).reshape(Z, L_k, H, D)
    return JaggedBatch(q.astype(dtype), k.astype(dtype), v.astype(dtype), n_q.copy(), n_k.copy())
