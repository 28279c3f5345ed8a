"""Synthetic masked-LM data: jagged sequences from a seeded Markov chain."""

from __future__ import annotations

import numpy as np

from ..jagged import LengthDistributionSpec, sample_lengths
from .model import MASK_ID, N_SPECIAL, PAD_ID, MaskedBatch


def mask_tokens(tokens: np.ndarray, lengths: np.ndarray, mask_prob: float, rng: np.random.Generator) -> MaskedBatch:
    """Mask each valid non-special token with probability ``mask_prob``.

    Every sequence with a maskable token gets at least one mask.
    """
    if not 0 < mask_prob < 1:
        raise ValueError("mask_prob must lie in (0, 1)")
    Z, L = tokens.shape
    valid = np.arange(L)[None, :] < lengths[:, None]
    maskable = valid & (tokens >= N_SPECIAL)
    chosen = maskable & (rng.random((Z, L)) < mask_prob)
    for z in np.flatnonzero(~chosen.any(axis=1) & maskable.any(axis=1)):
        chosen[z, rng.choice(np.flatnonzero(maskable[z]))] = True
    inputs = np.where(chosen, MASK_ID, tokens)
    return MaskedBatch(inputs, tokens.copy(), lengths.copy(), chosen)


class MarkovTokenStream:
    """Endless stream of masked batches.

    Symbols ``2..vocab_size-1`` follow a sparse random transition matrix
    (Dirichlet rows with small concentration) so there is structure to learn.
    Lengths come from ``lengths`` clamped to ``max_len``.
    """

    def __init__(
        self,
        vocab_size: int,
        max_len: int,
        batch_size: int,
        mask_prob: float = 0.15,
        seed: int = 0,
        lengths: LengthDistributionSpec | None = None,
        concentration: float = 0.1,
    ):
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.batch_size = batch_size
        self.mask_prob = mask_prob
        self.lengths = lengths or LengthDistributionSpec("uniform", 0.0, 0.0, max(2, max_len // 4), max_len)
        chain_rng = np.random.default_rng([seed, 0])
        n_sym = vocab_size - N_SPECIAL
        self.transition_cdf = np.cumsum(chain_rng.dirichlet(np.full(n_sym, concentration), size=n_sym), axis=1)
        self.initial_cdf = np.cumsum(chain_rng.dirichlet(np.ones(n_sym)))
        self._rng = np.random.default_rng([seed, 1])

    def _draw(self, cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.minimum((cdf < u[:, None]).sum(axis=1), cdf.shape[-1] - 1)

    def sample_tokens(self, count: int, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
        """``(tokens [count, L], lengths)`` with PAD after each length."""
        rng = rng or self._rng
        lengths = np.minimum(sample_lengths(self.lengths, count, rng), self.max_len)
        L = int(lengths.max())
        sym = np.empty((count, L), dtype=np.int64)
        sym[:, 0] = self._draw(np.broadcast_to(self.initial_cdf, (count, self.initial_cdf.size)), rng.random(count))
        for t in range(1, L):
            sym[:, t] = self._draw(self.transition_cdf[sym[:, t - 1]], rng.random(count))
        tokens = np.where(np.arange(L)[None, :] < lengths[:, None], sym + N_SPECIAL, PAD_ID)
        return tokens, lengths

    def sequences(self, count: int, seed: int) -> list[np.ndarray]:
        tokens, lengths = self.sample_tokens(count, np.random.default_rng(seed))
        return [tokens[i, : lengths[i]].copy() for i in range(count)]

    def __iter__(self):
        return self

    def __next__(self) -> MaskedBatch:
        tokens, lengths = self.sample_tokens(self.batch_size)
        return mask_tokens(tokens, lengths, self.mask_prob, self._rng)
