"""Desk-scale masked-LM stability lab."""

from .data import MarkovTokenStream, mask_tokens
from .model import (
    MASK_ID,
    PAD_ID,
    EncoderConfig,
    EncoderModel,
    MaskedBatch,
    TokenRangeError,
    global_grad_norm,
    model_backward,
    model_forward,
    model_gradcheck,
)
from .train import AdamW, StepRecord, TrainConfig, TrainingLog, clip_by_global_norm, train, write_run
from .validation import ValidationLoss, validation_loss_mc

__all__ = [
    "MASK_ID",
    "PAD_ID",
    "AdamW",
    "EncoderConfig",
    "EncoderModel",
    "MarkovTokenStream",
    "MaskedBatch",
    "StepRecord",
    "TokenRangeError",
    "TrainConfig",
    "TrainingLog",
    "ValidationLoss",
    "clip_by_global_norm",
    "global_grad_norm",
    "mask_tokens",
    "model_backward",
    "model_forward",
    "model_gradcheck",
    "train",
    "validation_loss_mc",
    "write_run",
]
