"""Padding-aware blocked sigmoid attention and its verification tooling."""

from .jagged import JaggedBatch, LengthDistributionSpec, generate_batch
from .kernel import KernelStats, TileConfig, blocked_backward_dkdv, blocked_backward_dq, blocked_forward
from .reference import AttentionConfig, dense_backward, dense_forward

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "JaggedBatch",
    "KernelStats",
    "LengthDistributionSpec",
    "TileConfig",
    "blocked_backward_dkdv",
    "blocked_backward_dq",
    "blocked_forward",
    "dense_backward",
    "dense_forward",
    "generate_batch",
]
