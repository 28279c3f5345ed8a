"""Monte Carlo masked-LM validation loss.

For each sequence and each of ``T`` trials a fresh ``mask_prob`` fraction of
the non-special tokens is masked; the trial loss is the mean cross-entropy
over that masked set, and the sequence loss is the mean over trials.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .model import MASK_ID, N_SPECIAL, PAD_ID, EncoderModel, MaskedBatch, model_forward


@dataclass
class ValidationLoss:
    mean: float
    ci95: float
    per_sequence: np.ndarray
    trials: int
    skipped: int


def validation_loss_mc(
    model: EncoderModel,
    sequences,
    trials: int = 15,
    mask_prob: float = 0.15,
    seed: int = 0,
    chunk: int = 64,
) -> ValidationLoss:
    """Mean validation loss over sequences with a 95% normal CI.

    Each trial masks ``max(1, round(mask_prob * n))`` of the ``n`` maskable
    tokens, chosen without replacement.  Sequences with nothing to mask are
    skipped and counted.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    seqs = [np.asarray(s, dtype=np.int64).reshape(-1) for s in sequences]
    if not seqs:
        raise ValueError("no sequences")
    keep = [s for s in seqs if np.any(s >= N_SPECIAL)]
    skipped = len(seqs) - len(keep)
    if skipped:
        warnings.warn(f"skipped {skipped} sequences without maskable tokens", stacklevel=2)
    if not keep:
        raise ValueError("no sequence has a maskable token")

    rng = np.random.default_rng(seed)
    losses = np.zeros((trials, len(keep)))
    for t in range(trials):
        for start in range(0, len(keep), chunk):
            group = keep[start : start + chunk]
            lengths = np.array([s.size for s in group], dtype=np.int64)
            L = int(lengths.max())
            targets = np.full((len(group), L), PAD_ID, dtype=np.int64)
            chosen = np.zeros((len(group), L), dtype=bool)
            for i, s in enumerate(group):
                targets[i, : s.size] = s
                maskable = np.flatnonzero(s >= N_SPECIAL)
                n_mask = max(1, int(round(mask_prob * maskable.size)))
                chosen[i, rng.choice(maskable, size=n_mask, replace=False)] = True
            batch = MaskedBatch(np.where(chosen, MASK_ID, targets), targets, lengths, chosen)
            _, cache = model_forward(model, batch)
            per_seq = cache["token_ce"].sum(axis=1) / chosen.sum(axis=1)
            losses[t, start : start + len(group)] = per_seq

    per_sequence = losses.mean(axis=0)
    n = per_sequence.size
    ci = 1.96 * float(np.std(per_sequence, ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    return ValidationLoss(float(per_sequence.mean()), ci, per_sequence, trials, skipped)
