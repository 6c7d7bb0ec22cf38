"""Tiny Transformer encoder classifier with static and timestamp-driven positional encodings."""

from .archive import ChecksumMismatch, VersionMismatch, load_weights, save_weights
from .config import PE_KINDS, REFERENCE, REFERENCE_PARAM_COUNT, ModelConfig
from .encodings import pe_fourier, pe_sinusoidal, rope_rotate
from .model import (
    ForwardTrace,
    ModelWeights,
    NonFiniteActivation,
    ShapeMismatch,
    backward,
    count_params,
    edl_loss,
    forward,
    init_weights,
    loss_and_grads,
    param_breakdown,
)
from .optim import AdamState, EmptyDataset, adam_step, train

__all__ = [
    "PE_KINDS", "REFERENCE", "REFERENCE_PARAM_COUNT", "AdamState", "ChecksumMismatch", "EmptyDataset",
    "ForwardTrace", "ModelConfig", "ModelWeights", "NonFiniteActivation", "ShapeMismatch",
    "VersionMismatch", "adam_step", "backward", "count_params", "edl_loss", "forward",
    "init_weights", "load_weights", "loss_and_grads", "param_breakdown", "pe_fourier",
    "pe_sinusoidal", "rope_rotate", "save_weights", "train",
]
