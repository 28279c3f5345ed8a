"""FLOP accounting, wall-clock measurement and TFLOPS reports.

Forward attention is two matmuls, ``4*b*h*n^2*d`` FLOPs; the backward pass is
credited 2.5x that (gradients plus recomputation).  For jagged batches the
per-sequence valid length is used in place of ``n``.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
import threading
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from .jagged import JaggedBatch
from .kernel import TileConfig, blocked_backward_dkdv, blocked_backward_dq, blocked_forward
from .reference import AttentionConfig, dense_backward, dense_forward

__all__ = [
    "BenchConfig",
    "BenchRecord",
    "PairingError",
    "attention_flops",
    "batch_flops",
    "make_bench_batch",
    "measure",
    "blocked_impl",
    "dense_impl",
    "padding_overhead",
    "project_gpu_hours",
    "throughput_for_gpu_hours",
    "emit_report",
    "read_report",
    "REPORT_COLUMNS",
]

Direction = Literal["forward", "backward"]

# z quantiles for two-sided normal confidence intervals
_Z = {0.90: 1.645, 0.95: 1.960, 0.99: 2.576}


class PairingError(ValueError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    seq_lengths: tuple[int, ...] = (512, 1024, 2048, 4096, 8192, 16384)
    token_budget: int = 16384
    head_dims: tuple[int, ...] = (64, 128)
    hidden_dim: int = 2048
    padding_fractions: tuple[float, ...] = (0.0, 0.25)
    iterations: int = 250
    warmup_ms: int = 100
    confidence: float = 0.99

    def __post_init__(self):
        if self.iterations < 2:
            raise ValueError("iterations must be >= 2 for a confidence interval")
        if self.confidence not in _Z:
            raise ValueError(f"confidence must be one of {sorted(_Z)}")
        if any(n < 1 for n in self.seq_lengths) or self.token_budget < 1:
            raise ValueError("sequence lengths and token budget must be positive")
        if any(not 0 <= p < 1 for p in self.padding_fractions):
            raise ValueError("padding fractions must lie in [0, 1)")
        if any(self.hidden_dim % d for d in self.head_dims):
            raise ValueError("hidden_dim must be divisible by every head dim")

    def batch_size(self, seq_len: int) -> int:
        return max(1, self.token_budget // seq_len)


@dataclass
class BenchRecord:
    impl: str
    direction: str
    b: int
    h: int
    n: int
    d: int
    padding: float
    mean_s: float
    ci_s: float
    flops: int
    tflops: float
    error: str | None = None


REPORT_COLUMNS = ("impl", "direction", "b", "h", "n", "d", "padding", "mean_s", "ci_s", "flops", "tflops")


def attention_flops(b: int, h: int, n_valid: int, d: int, direction: Direction = "forward") -> int:
    if min(b, h, n_valid, d) < 1:
        raise ValueError("b, h, n, d must all be >= 1")
    fwd = 4 * int(b) * int(h) * int(n_valid) ** 2 * int(d)
    if direction == "forward":
        return fwd
    if direction == "backward":
        return 5 * fwd // 2
    raise ValueError(f"unknown direction {direction!r}")


def batch_flops(batch: JaggedBatch, direction: Direction = "forward") -> int:
    """Sum of the per-sequence formula over the batch, using valid lengths."""
    return sum(attention_flops(1, batch.H, int(n), batch.D, direction) for n in batch.n_q)


def make_bench_batch(
    b: int, n: int, h: int, d: int, padding: float, seed: int = 0, dtype=np.float32
) -> tuple[JaggedBatch, np.ndarray]:
    """Batch with a trailing pad region of ``padding * n`` tokens per sequence,
    plus a matching upstream gradient."""
    rng = np.random.default_rng(seed)
    valid = max(1, int(round(n * (1.0 - padding))))
    lengths = np.full(b, valid, dtype=np.int64)
    mask = (np.arange(n) < valid)[None, :, None, None]
    q, k, v, do = (rng.standard_normal((b, n, h, d)).astype(dtype) * mask for _ in range(4))
    return JaggedBatch(q, k, v, lengths, lengths), do


Impl = Callable[[JaggedBatch, TileConfig], object]


def blocked_impl(direction: Direction, cfg: AttentionConfig | None = None, dO=None) -> Impl:
    cfg = cfg or AttentionConfig()
    if direction == "forward":
        buf = {}

        def fwd(batch, tiles):
            out = buf.get("o")
            if out is None or out.shape != batch.q.shape or out.dtype != batch.dtype:
                out = buf["o"] = np.empty_like(batch.q)
            return blocked_forward(batch, cfg, tiles, out=out)

        return fwd

    def bwd(batch, tiles):
        grad = dO if dO is not None else np.ones_like(batch.q)
        blocked_backward_dq(batch, cfg, tiles, grad)
        return blocked_backward_dkdv(batch, cfg, tiles, grad)

    return bwd


def dense_impl(direction: Direction, cfg: AttentionConfig | None = None, dO=None, max_bytes: float = 2e9) -> Impl:
    """Dense reference as a benchmark subject; refuses score tensors above
    ``max_bytes`` so oversized grid points become failed records."""
    cfg = cfg or AttentionConfig()

    def run(batch, tiles):
        need = 8.0 * batch.Z * batch.H * batch.L_q * batch.L_k * (4 if direction == "backward" else 2)
        if need > max_bytes:
            raise MemoryError(f"dense attention would need {need / 1e9:.1f} GB")
        if direction == "forward":
            return dense_forward(batch, cfg)
        return dense_backward(batch, cfg, dO if dO is not None else np.ones_like(batch.q))

    return run


_bench_lock = threading.Lock()


def measure(
    impl: Impl,
    batch: JaggedBatch,
    tiles: TileConfig,
    direction: Direction,
    cfg: BenchConfig,
    name: str = "blocked",
    padding: float | None = None,
    timer: Callable[[], float] = time.perf_counter,
) -> BenchRecord:
    """Time ``impl(batch, tiles)`` after a warmup period.

    Mean and normal-approximation CI half-width over ``cfg.iterations`` runs.
    Measurements are serialised through a process-wide lock.  An exception from
    the implementation produces a record with ``error`` set instead of
    propagating.  ``timer`` must be monotonic; it is swappable for tests.
    """
    flops = batch_flops(batch, direction)
    if padding is None:
        padding = 1.0 - float(batch.n_q.sum()) / (batch.Z * batch.L_q)
    base = dict(impl=name, direction=direction, b=batch.Z, h=batch.H, n=batch.L_q, d=batch.D, padding=padding)
    with _bench_lock:
        try:
            deadline = timer() + cfg.warmup_ms / 1000.0
            impl(batch, tiles)
            while timer() < deadline:
                impl(batch, tiles)
            samples = []
            for _ in range(cfg.iterations):
                t0 = timer()
                impl(batch, tiles)
                samples.append(timer() - t0)
        except Exception as exc:  # noqa: BLE001 - a failing config must not stop the sweep
            return BenchRecord(**base, mean_s=math.nan, ci_s=math.nan, flops=flops, tflops=math.nan,
                               error=f"{type(exc).__name__}: {exc}")
    mean = statistics.fmean(samples)
    ci = _Z[cfg.confidence] * statistics.stdev(samples) / math.sqrt(len(samples))
    return BenchRecord(**base, mean_s=mean, ci_s=ci, flops=flops, tflops=flops / (1e12 * mean))


def padding_overhead(records_0pct, records_25pct):
    """Relative throughput drop ``(tflops_0 - tflops_p) / tflops_0``.

    Accepts two floats, two records, or two matched sequences of records
    (paired on impl, direction, b, h, n, d).
    """
    if isinstance(records_0pct, (int, float)) and isinstance(records_25pct, (int, float)):
        return (records_0pct - records_25pct) / records_0pct
    if isinstance(records_0pct, BenchRecord) and isinstance(records_25pct, BenchRecord):
        return _paired_drop(records_0pct, records_25pct)
    base = {_key(r): r for r in records_0pct}
    drops = []
    for r in records_25pct:
        if _key(r) not in base:
            raise PairingError(f"no unpadded record matches {_key(r)}")
        drops.append(_paired_drop(base.pop(_key(r)), r))
    if base:
        raise PairingError(f"unpadded records without a padded match: {sorted(base)}")
    return drops


def _key(r: BenchRecord):
    return (r.impl, r.direction, r.b, r.h, r.n, r.d)


def _paired_drop(r0: BenchRecord, r1: BenchRecord) -> float:
    if _key(r0) != _key(r1):
        raise PairingError(f"mismatched configs {_key(r0)} vs {_key(r1)}")
    return (r0.tflops - r1.tflops) / r0.tflops


def project_gpu_hours(throughput: float, samples: float, batch_size: int, device_count: int) -> float:
    """GPU hours to push ``samples`` through at ``throughput`` steps/s."""
    if not throughput > 0:
        raise ValueError("throughput must be > 0")
    return samples / batch_size / throughput / 3600.0 * device_count


def throughput_for_gpu_hours(hours: float, samples: float, batch_size: int, device_count: int) -> float:
    return samples / batch_size / (hours * 3600.0 / device_count)


def emit_report(records: Sequence[BenchRecord], fmt: Literal["csv", "json"], path) -> Path:
    if not records:
        raise ValueError("no records to write")
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_COLUMNS)
            for r in records:
                writer.writerow([repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c)
                                 for c in REPORT_COLUMNS])
    elif fmt == "json":
        path.write_text(json.dumps([asdict(r) for r in records], indent=2))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def read_report(path) -> list[BenchRecord]:
    path = Path(path)
    if path.suffix == ".json":
        return [BenchRecord(**row) for row in json.loads(path.read_text())]
    types = {f.name: f.type for f in fields(BenchRecord)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for c in REPORT_COLUMNS:
                t = types[c]
                kw[c] = int(row[c]) if t == "int" else float(row[c]) if t == "float" else row[c]
            out.append(BenchRecord(**kw))
    return out
