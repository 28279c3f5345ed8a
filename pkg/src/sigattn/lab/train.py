"""Training loop with the stress-test instrumentation.

Each step logs the masked-LM loss, the global L2 gradient norm before
clipping, the norm actually applied, and the largest absolute attention
score in layer 0.  Non-finite values are logged as they are; divergence is
data, not an error.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .data import MarkovTokenStream
from .model import EncoderConfig, EncoderModel, MaskedBatch, global_grad_norm, model_backward, model_forward


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    steps: int = 200
    batch: int = 8
    clip_norm: float | None = 1.0
    mask_prob: float = 0.15
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_steps: int = 0

    def __post_init__(self):
        if not 0 < self.mask_prob < 1:
            raise ValueError("mask_prob must lie in (0, 1)")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0 when given")

    def lr_at(self, step: int) -> float:
        """Linear warmup, then constant."""
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        return self.lr


@dataclass
class StepRecord:
    step: int
    loss: float
    global_grad_norm: float
    layer0_max_abs_score: float
    post_clip_grad_norm: float
    layer0_max_weight_derivative: float
    lr: float
    batch_hash: str
    layer_max_abs_scores: list[float] = field(default_factory=list)


LOG_COLUMNS = (
    "step", "loss", "global_grad_norm", "layer0_max_abs_score",
    "post_clip_grad_norm", "layer0_max_weight_derivative", "lr", "batch_hash",
)


@dataclass
class TrainingLog:
    records: list[StepRecord] = field(default_factory=list)
    mechanism: str = ""

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        vals = [getattr(r, name) for r in self.records]
        return np.array(vals, dtype=object if name == "batch_hash" else np.float64)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, c) for c in LOG_COLUMNS)])
        return path

    @classmethod
    def from_csv(cls, path) -> "TrainingLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.records.append(StepRecord(
                    step=int(row["step"]),
                    batch_hash=row["batch_hash"],
                    **{c: float(row[c]) for c in LOG_COLUMNS if c not in ("step", "batch_hash")},
                ))
        return log


class AdamW:
    """Decoupled weight decay on matrices only (norm gains and biases are 1-d)."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, g in grads.items():
            p = params[k]
            if p.ndim >= 2 and c.weight_decay:
                p *= 1.0 - lr * c.weight_decay
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[float, float]:
    """Scale ``grads`` in place so their global norm is at most ``max_norm``.

    Returns ``(norm before, norm after)``.
    """
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= scale
    return norm, global_grad_norm(grads)


def train_step(model: EncoderModel, opt: AdamW, batch: MaskedBatch, cfg: TrainConfig, step: int) -> StepRecord:
    _, cache = model_forward(model, batch, instrument=True)
    grads = model_backward(model, cache)
    if cfg.clip_norm is not None:
        norm, applied = clip_by_global_norm(grads, cfg.clip_norm)
    else:
        norm = applied = global_grad_norm(grads)
    lr = cfg.lr_at(step)
    if lr:
        opt.step(model.params, grads, lr)
    stats = cache["stats"]
    return StepRecord(
        step=step,
        loss=cache["loss"],
        global_grad_norm=norm,
        layer0_max_abs_score=stats[0][0],
        post_clip_grad_norm=applied,
        layer0_max_weight_derivative=stats[0][1],
        lr=lr,
        batch_hash=batch.digest(),
        layer_max_abs_scores=[s[0] for s in stats],
    )


def train(
    encoder_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    data_stream: Iterable[MaskedBatch] | None = None,
    model: EncoderModel | None = None,
) -> tuple[TrainingLog, EncoderModel]:
    """Run ``train_cfg.steps`` steps and return the log and the trained model.

    Without an explicit stream, batches come from a :class:`MarkovTokenStream`
    seeded by ``train_cfg.seed``; the initial weights use the same seed, so two
    runs differing only in mechanism see identical data and initial weights.
    """
    if model is None:
        model = EncoderModel.init(encoder_cfg, seed=train_cfg.seed)
    if data_stream is None:
        data_stream = default_stream(encoder_cfg, train_cfg)
    batches: Iterator[MaskedBatch] = iter(data_stream)
    opt = AdamW(model.params, train_cfg)
    log = TrainingLog(mechanism=encoder_cfg.mechanism)
    with np.errstate(all="ignore"):
        for step in range(train_cfg.steps):
            log.records.append(train_step(model, opt, next(batches), train_cfg, step))
    return log, model


def default_stream(encoder_cfg: EncoderConfig, train_cfg: TrainConfig) -> MarkovTokenStream:
    return MarkovTokenStream(
        encoder_cfg.vocab_size, encoder_cfg.max_len, train_cfg.batch, train_cfg.mask_prob, seed=train_cfg.seed
    )


def write_run(log: TrainingLog, encoder_cfg: EncoderConfig, train_cfg: TrainConfig, path) -> tuple[Path, Path]:
    """Write the log CSV and, beside it, the run configuration as JSON."""
    path = Path(path)
    log.to_csv(path)
    cfg_path = path.with_suffix(".config.json")
    cfg_path.write_text(json.dumps({"encoder": asdict(encoder_cfg), "train": asdict(train_cfg)}, indent=2))
    return path, cfg_path
