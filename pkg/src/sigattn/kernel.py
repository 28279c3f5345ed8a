"""Padding-aware blocked sigmoid attention.

Three kernels share one tiling scheme:

* ``blocked_forward``       grid over (query block, z*h)
* ``blocked_backward_dq``   grid over (query block, z*h)
* ``blocked_backward_dkdv`` grid over (key block, z*h)

Every work item owns a disjoint slice of its output, so the items can run in
any order (or concurrently) without atomics.  Blocks whose first index is
past the sequence's valid length are written as zeros and skipped, and the
inner loop stops at the last valid block.  Scores and weights are recomputed
tile by tile in the backward kernels; nothing is cached from the forward.

Tile matmuls run in the dtype of the batch (the compute precision) and are
added into accumulators of ``TileConfig.accumulator_precision``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import Literal

import numpy as np
from scipy.special import expit

from .jagged import DimensionError, JaggedBatch
from .reference import AttentionConfig, resolve_bias, resolve_scale

__all__ = [
    "TileConfig",
    "KernelStats",
    "sigmoid_eval",
    "blocked_forward",
    "blocked_backward_dq",
    "blocked_backward_dkdv",
    "blocked_backward",
]

SigmoidMode = Literal["exact", "tanh_approx"]


@dataclass(frozen=True)
class TileConfig:
    """Tile sizes and numeric knobs for the blocked kernels.

    ``skip_padded_blocks=False`` gives the no-skip baseline: every block up to
    the padded length is visited and relies on masking alone.
    """

    block_m: int = 64
    block_n: int = 64
    sigmoid_mode: SigmoidMode = "exact"
    accumulator_precision: Literal["double", "single"] = "double"
    worker_count: int = 1
    skip_padded_blocks: bool = True

    def __post_init__(self):
        if self.block_m < 1 or self.block_n < 1:
            raise ValueError(f"block sizes must be >= 1, got {self.block_m}x{self.block_n}")
        if self.sigmoid_mode not in ("exact", "tanh_approx"):
            raise ValueError(f"unknown sigmoid_mode {self.sigmoid_mode!r}")
        if self.accumulator_precision not in ("double", "single"):
            raise ValueError(f"unknown accumulator_precision {self.accumulator_precision!r}")
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")

    @property
    def accumulator_dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self.accumulator_precision == "double" else np.float32)


@dataclass
class KernelStats:
    """Block counters.  Outer blocks are the grid dimension of the kernel
    (query blocks for forward/dQ, key blocks for dK/dV); inner visits are the
    tiles each surviving outer block could touch along the other axis."""

    total_query_blocks: int = 0
    skipped_query_blocks: int = 0
    total_key_block_visits: int = 0
    skipped_key_block_visits: int = 0
    total_key_blocks: int = 0
    skipped_key_blocks: int = 0
    total_query_block_visits: int = 0
    skipped_query_block_visits: int = 0

    def __iadd__(self, other: "KernelStats") -> "KernelStats":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self


def sigmoid_eval(x, mode: SigmoidMode = "exact"):
    """Logistic sigmoid; both modes return exactly 0 at -inf.

    ``tanh_approx`` evaluates ``0.5 * (tanh(x / 2) + 1)``, the identity GPU
    kernels use to reach fast tanh instructions.
    """
    if mode == "exact":
        return expit(x)
    if mode == "tanh_approx":
        x = np.asarray(x)
        half = x.dtype.type(0.5) if x.dtype.kind == "f" else 0.5
        return half * (np.tanh(half * x) + 1)
    raise ValueError(f"unknown sigmoid mode {mode!r}")


def _check_sigmoid(cfg: AttentionConfig) -> None:
    if cfg.mechanism != "sigmoid":
        raise ValueError("blocked kernels implement sigmoid attention only")


def _check_grad_shape(batch: JaggedBatch, dO: np.ndarray) -> None:
    if dO.shape != batch.q.shape:
        raise DimensionError(f"dO{dO.shape} does not match output shape {batch.q.shape}")


class _Plan:
    """Resolved per-call constants shared by the three kernels."""

    def __init__(self, batch: JaggedBatch, cfg: AttentionConfig, tiles: TileConfig):
        _check_sigmoid(cfg)
        self.batch = batch
        self.tiles = tiles
        self.dtype = batch.dtype
        if self.dtype.kind != "f":
            raise TypeError(f"floating batch required, got {self.dtype}")
        self.acc_dtype = tiles.accumulator_dtype
        self.alpha = self.dtype.type(resolve_scale(cfg, batch.D))
        self.bias = resolve_bias(cfg, batch.n_k).astype(self.dtype)
        self.neg_inf = self.dtype.type(-np.inf)
        self.one = self.dtype.type(1)

    def scores_to_weights(self, s, z, mask_rows, mask_cols):
        """Scale, bias, mask to -inf, then apply the sigmoid (one fused step)."""
        s = s * self.alpha + self.bias[z]
        s = np.where(mask_rows[:, None] & mask_cols[None, :], s, self.neg_inf)
        return sigmoid_eval(s, self.tiles.sigmoid_mode)

    def run(self, work, items):
        """Execute ``work`` over the grid and sum the per-item stats."""
        stats = KernelStats()
        if self.tiles.worker_count == 1:
            results = map(work, items)
        else:
            pool = ThreadPoolExecutor(max_workers=self.tiles.worker_count)
            with pool:
                results = list(pool.map(work, items))
        for item_stats in results:
            stats += item_stats
        return stats


def _load(x, z, span: slice, h, valid: int):
    """Tile ``x[z, span, h, :]`` with rows at or past ``valid`` read as zero.

    Pad contents are arbitrary (possibly non-finite), and a zero weight times
    a NaN is still NaN, so straddling tiles are sanitised on load.  Fully
    valid tiles are returned as views.
    """
    tile = x[z, span, h, :]
    if span.stop <= valid:
        return tile
    keep = (np.arange(span.start, span.stop) < valid)[:, None]
    return np.where(keep, tile, tile.dtype.type(0))


def _grid(n_blocks: int, Z: int, H: int):
    return [(blk, zh // H, zh % H) for zh in range(Z * H) for blk in range(n_blocks)]


def _out_buffer(out, shape, dtype):
    if out is None:
        return np.empty(shape, dtype=dtype)
    if out.shape != tuple(shape) or out.dtype != dtype:
        raise DimensionError(f"out buffer {out.shape}/{out.dtype} != {tuple(shape)}/{dtype}")
    return out


def blocked_forward(
    batch: JaggedBatch, cfg: AttentionConfig, tiles: TileConfig, *, out: np.ndarray | None = None
) -> tuple[np.ndarray, KernelStats]:
    """Tiled sigmoid attention forward pass with padded-block skipping."""
    plan = _Plan(batch, cfg, tiles)
    q, k, v = batch.q, batch.k, batch.v
    BM, BN = tiles.block_m, tiles.block_n
    L_q, L_k = batch.L_q, batch.L_k
    skip = tiles.skip_padded_blocks
    n_kblocks = math.ceil(L_k / BN)
    o = _out_buffer(out, q.shape, plan.dtype)

    def work(item):
        m, z, h = item
        st = KernelStats(total_query_blocks=1)
        start_m = m * BM
        rows = slice(start_m, min(start_m + BM, L_q))
        nq, nk = batch.n_q[z], batch.n_k[z]
        if skip and start_m >= nq:
            o[z, rows, h, :] = 0
            st.skipped_query_blocks = 1
            return st
        q_blk = _load(q, z, rows, h, nq)
        mask_m = np.arange(rows.start, rows.stop) < nq
        acc = np.zeros(q_blk.shape, dtype=plan.acc_dtype)
        stop_n = nk if skip else L_k
        visited = 0
        for start_n in range(0, stop_n, BN):
            cols = slice(start_n, min(start_n + BN, L_k))
            k_t = np.ascontiguousarray(_load(k, z, cols, h, nk).T)
            v_blk = _load(v, z, cols, h, nk)
            p = plan.scores_to_weights(q_blk @ k_t, z, mask_m, np.arange(cols.start, cols.stop) < nk)
            acc += p @ v_blk
            visited += 1
        o[z, rows, h, :] = acc
        st.total_key_block_visits = n_kblocks
        st.skipped_key_block_visits = n_kblocks - visited
        return st

    stats = plan.run(work, _grid(math.ceil(L_q / BM), batch.Z, batch.H))
    return o, stats


def blocked_backward_dq(
    batch: JaggedBatch,
    cfg: AttentionConfig,
    tiles: TileConfig,
    dO: np.ndarray,
    *,
    out: np.ndarray | None = None,
) -> tuple[np.ndarray, KernelStats]:
    """Query gradient, recomputing scores per tile."""
    _check_grad_shape(batch, dO)
    plan = _Plan(batch, cfg, tiles)
    q, k, v = batch.q, batch.k, batch.v
    dO = dO.astype(plan.dtype, copy=False)
    BM, BN = tiles.block_m, tiles.block_n
    L_q, L_k = batch.L_q, batch.L_k
    skip = tiles.skip_padded_blocks
    n_kblocks = math.ceil(L_k / BN)
    dq = _out_buffer(out, q.shape, plan.dtype)

    def work(item):
        m, z, h = item
        st = KernelStats(total_query_blocks=1)
        start_m = m * BM
        rows = slice(start_m, min(start_m + BM, L_q))
        nq, nk = batch.n_q[z], batch.n_k[z]
        if skip and start_m >= nq:
            dq[z, rows, h, :] = 0
            st.skipped_query_blocks = 1
            return st
        q_blk = _load(q, z, rows, h, nq)
        do_blk = _load(dO, z, rows, h, nq)
        mask_m = np.arange(rows.start, rows.stop) < nq
        acc = np.zeros(q_blk.shape, dtype=plan.acc_dtype)
        stop_n = nk if skip else L_k
        visited = 0
        for start_n in range(0, stop_n, BN):
            cols = slice(start_n, min(start_n + BN, L_k))
            k_t = np.ascontiguousarray(_load(k, z, cols, h, nk).T)
            v_blk = _load(v, z, cols, h, nk)
            p = plan.scores_to_weights(q_blk @ k_t, z, mask_m, np.arange(cols.start, cols.stop) < nk)
            ds = p * (plan.one - p) * (do_blk @ v_blk.T)
            acc += ds @ k_t.T
            visited += 1
        dq[z, rows, h, :] = acc * plan.acc_dtype.type(plan.alpha)
        st.total_key_block_visits = n_kblocks
        st.skipped_key_block_visits = n_kblocks - visited
        return st

    stats = plan.run(work, _grid(math.ceil(L_q / BM), batch.Z, batch.H))
    return dq, stats


def blocked_backward_dkdv(
    batch: JaggedBatch,
    cfg: AttentionConfig,
    tiles: TileConfig,
    dO: np.ndarray,
    *,
    out: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray, KernelStats]:
    """Key and value gradients; the grid runs over key blocks so each work
    item owns its rows of dK and dV outright."""
    _check_grad_shape(batch, dO)
    plan = _Plan(batch, cfg, tiles)
    q, k, v = batch.q, batch.k, batch.v
    dO = dO.astype(plan.dtype, copy=False)
    BM, BN = tiles.block_m, tiles.block_n
    L_q, L_k = batch.L_q, batch.L_k
    skip = tiles.skip_padded_blocks
    n_qblocks = math.ceil(L_q / BM)
    dk = _out_buffer(None if out is None else out[0], k.shape, plan.dtype)
    dv = _out_buffer(None if out is None else out[1], v.shape, plan.dtype)

    def work(item):
        n, z, h = item
        st = KernelStats(total_key_blocks=1)
        start_n = n * BN
        cols = slice(start_n, min(start_n + BN, L_k))
        nq, nk = batch.n_q[z], batch.n_k[z]
        if skip and start_n >= nk:
            dk[z, cols, h, :] = 0
            dv[z, cols, h, :] = 0
            st.skipped_key_blocks = 1
            return st
        k_blk = _load(k, z, cols, h, nk)
        v_blk = _load(v, z, cols, h, nk)
        mask_n = np.arange(cols.start, cols.stop) < nk
        dk_acc = np.zeros(k_blk.shape, dtype=plan.acc_dtype)
        dv_acc = np.zeros(v_blk.shape, dtype=plan.acc_dtype)
        stop_m = nq if skip else L_q
        visited = 0
        for start_m in range(0, stop_m, BM):
            rows = slice(start_m, min(start_m + BM, L_q))
            q_t = np.ascontiguousarray(_load(q, z, rows, h, nq).T)
            do_blk = _load(dO, z, rows, h, nq)
            # transposed perspective: [B_N, B_M]
            p_t = plan.scores_to_weights(k_blk @ q_t, z, mask_n, np.arange(rows.start, rows.stop) < nq)
            dv_acc += p_t @ do_blk
            ds_t = p_t * (plan.one - p_t) * (v_blk @ do_blk.T)
            dk_acc += ds_t @ q_t.T
            visited += 1
        dk[z, cols, h, :] = dk_acc * plan.acc_dtype.type(plan.alpha)
        dv[z, cols, h, :] = dv_acc
        st.total_query_block_visits = n_qblocks
        st.skipped_query_block_visits = n_qblocks - visited
        return st

    stats = plan.run(work, _grid(math.ceil(L_k / BN), batch.Z, batch.H))
    return dk, dv, stats


def blocked_backward(
    batch: JaggedBatch, cfg: AttentionConfig, tiles: TileConfig, dO: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(dQ, dK, dV)`` from the two backward kernels."""
    dq, _ = blocked_backward_dq(batch, cfg, tiles, dO)
    dk, dv, _ = blocked_backward_dkdv(batch, cfg, tiles, dO)
    return dq, dk, dv
