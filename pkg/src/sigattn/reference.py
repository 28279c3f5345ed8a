"""Dense, unblocked softmax and sigmoid attention in double precision.

This is the oracle the blocked kernels are checked against, so it favours
being easy to audit over being fast: the full ``[Z, H, L_q, L_k]`` score
tensor is materialised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import expit

from .jagged import DimensionError, JaggedBatch

__all__ = [
    "AttentionConfig",
    "NonFiniteInputError",
    "resolve_bias",
    "resolve_scale",
    "dense_scores",
    "dense_weights",
    "dense_forward",
    "dense_backward",
    "weight_jacobian_row",
]

Mechanism = Literal["softmax", "sigmoid"]


class NonFiniteInputError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    """Attention mechanism, score scale and bias.

    ``scale=None`` resolves to ``1/sqrt(D)``.  ``bias_mode`` is ``"none"``,
    ``"fixed"`` (a single scalar ``bias`` shared by every sequence) or
    ``"log_seq_len"`` (``b = -log(n_k[z])`` per sequence).  The bias is a
    no-op for softmax, which is shift invariant.
    """

    mechanism: Mechanism = "sigmoid"
    scale: float | None = None
    bias_mode: Literal["none", "fixed", "log_seq_len"] = "log_seq_len"
    bias: float = 0.0

    def __post_init__(self):
        if self.mechanism not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if self.bias_mode not in ("none", "fixed", "log_seq_len"):
            raise ValueError(f"unknown bias_mode {self.bias_mode!r}")
        if self.scale is not None and not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        if not math.isfinite(self.bias):
            raise ValueError("bias must be finite")
        if self.bias_mode == "none" and self.mechanism == "sigmoid":
            raise ValueError("sigmoid attention needs a bias (fixed or log_seq_len)")

    @classmethod
    def softmax(cls, scale: float | None = None) -> "AttentionConfig":
        return cls("softmax", scale, "none")


def resolve_scale(cfg: AttentionConfig, D: int) -> float:
    return 1.0 / math.sqrt(D) if cfg.scale is None else float(cfg.scale)


def resolve_bias(cfg: AttentionConfig, n_k: np.ndarray) -> np.ndarray:
    """Per-sequence bias vector of length Z (float64)."""
    n_k = np.asarray(n_k)
    if cfg.mechanism == "softmax" or cfg.bias_mode == "none":
        return np.zeros(n_k.shape, dtype=np.float64)
    if cfg.bias_mode == "fixed":
        return np.full(n_k.shape, cfg.bias, dtype=np.float64)
    return -np.log(n_k.astype(np.float64))


def _check_finite(batch: JaggedBatch) -> None:
    qm = batch.query_mask()
    km = batch.key_mask()
    for name, t, m in (("q", batch.q, qm), ("k", batch.k, km), ("v", batch.v, km)):
        bad = ~np.isfinite(t) & m[:, :, None, None]
        if bad.any():
            raise NonFiniteInputError(f"non-finite {name} at index {tuple(np.argwhere(bad)[0])}")


def _pair_mask(batch: JaggedBatch) -> np.ndarray:
    """``[Z, 1, L_q, L_k]`` validity of each (query, key) pair."""
    return (batch.query_mask()[:, :, None] & batch.key_mask()[:, None, :])[:, None]


def _valid_only(x, mask) -> np.ndarray:
    return np.where(mask[:, :, None, None], x.astype(np.float64), 0.0)


def dense_scores(batch: JaggedBatch, cfg: AttentionConfig) -> np.ndarray:
    """Scaled, biased scores ``[Z, H, L_q, L_k]`` with -inf at padded pairs."""
    q = batch.q.astype(np.float64)
    k = batch.k.astype(np.float64)
    alpha = resolve_scale(cfg, batch.D)
    b = resolve_bias(cfg, batch.n_k)
    s = np.einsum("zqhd,zkhd->zhqk", q, k) * alpha + b[:, None, None, None]
    return np.where(_pair_mask(batch), s, -np.inf)


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    # Fully masked rows (all -inf) come back as zeros rather than NaN.
    row_max = np.max(s, axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(s - row_max)
    total = e.sum(axis=-1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def dense_weights(batch: JaggedBatch, cfg: AttentionConfig) -> np.ndarray:
    s = dense_scores(batch, cfg)
    if cfg.mechanism == "softmax":
        return _softmax_rows(s)
    return expit(s)


def dense_forward(batch: JaggedBatch, cfg: AttentionConfig, *, check_finite: bool = False) -> np.ndarray:
    """Attention output ``[Z, L_q, H, D]`` in float64.

    Rows at padded query positions are exactly zero and padded keys carry
    weight exactly zero.  NaNs in the input propagate unless
    ``check_finite`` is set, in which case they raise.
    """
    if check_finite:
        _check_finite(batch)
    p = dense_weights(batch, cfg)
    return np.einsum("zhqk,zkhd->zqhd", p, _valid_only(batch.v, batch.key_mask()))


def dense_backward(
    batch: JaggedBatch, cfg: AttentionConfig, dO: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form ``(dQ, dK, dV)`` for the loss ``sum(dO * O)``."""
    if dO.shape != batch.q.shape:
        raise DimensionError(f"dO{dO.shape} does not match output shape {batch.q.shape}")
    # zero weight times a non-finite pad entry would still be NaN
    q = _valid_only(batch.q, batch.query_mask())
    k = _valid_only(batch.k, batch.key_mask())
    v = _valid_only(batch.v, batch.key_mask())
    alpha = resolve_scale(cfg, batch.D)
    p = dense_weights(batch, cfg)
    # Rows of dO at padded queries never reach a valid weight.
    dO = np.where(batch.query_mask()[:, :, None, None], dO.astype(np.float64), 0.0)

    dv = np.einsum("zhqk,zqhd->zkhd", p, dO)
    dp = np.einsum("zqhd,zkhd->zhqk", dO, v)
    if cfg.mechanism == "softmax":
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
    else:
        ds = p * (1.0 - p) * dp
    dq = alpha * np.einsum("zhqk,zkhd->zqhd", ds, k)
    dk = alpha * np.einsum("zhqk,zqhd->zkhd", ds, q)
    return dq, dk, dv


def weight_jacobian_row(scores_row, mechanism: Mechanism) -> np.ndarray:
    """Jacobian of one row of attention weights with respect to its scores.

    softmax: ``J[j, k] = p_j (delta_jk - p_k)``; sigmoid: diagonal with
    ``s(x)(1 - s(x))`` entries and exact zeros elsewhere.
    """
    s = np.asarray(scores_row, dtype=np.float64).reshape(-1)
    if mechanism == "sigmoid":
        p = expit(s)
        return np.diag(p * (1.0 - p))
    if mechanism == "softmax":
        p = _softmax_rows(s[None, :])[0]
        return np.diag(p) - np.outer(p, p)
    raise ValueError(f"unknown mechanism {mechanism!r}")
