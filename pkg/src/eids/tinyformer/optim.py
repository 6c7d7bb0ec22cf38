from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..augment import AugConfig, augment_pipeline, collate
from ..flowcap import FlowRecord
from .config import ModelConfig
from .model import ModelWeights, backward, edl_logit_grad, edl_loss, forward, init_weights

log = logging.getLogger(__name__)


class EmptyDataset(ValueError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(weights: ModelWeights, grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, applied to ``weights.params`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, param in weights.params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        param -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(param.dtype)
    return state


@dataclass
class TrainSettings:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 2e-4
    seed: int = 0
    edl_normalize: bool = False
    augment: bool = True


def train(dataset: Sequence[FlowRecord], config: ModelConfig, aug_cfg: AugConfig | None = None,
          epochs: int = 10, batch_size: int = 4, seed: int = 0, lr: float = 2e-4,
          edl_normalize: bool = False, augment: bool = True, init: ModelWeights | None = None,
          on_epoch: Callable[[dict], None] | None = None):
    """Train on already expanded samples (subflows, oversampled).

    Each epoch re-augments every sample, shuffles, and takes one Adam step
    per batch. Loss weights use the augmented lengths. Returns the weights
    and a per-epoch history of mean loss and training accuracy.
    """
    if len(dataset) == 0:
        raise EmptyDataset("no training samples")
    if any(rec.label is None for rec in dataset):
        raise ValueError("every training sample needs a label")
    aug_cfg = aug_cfg or AugConfig(seed=seed)
    weights = init.copy() if init is not None else init_weights(config, seed)
    state = AdamState()
    history = []
    for epoch in range(epochs):
        if augment:
            samples = [augment_pipeline(rec, aug_cfg, epoch=epoch, index=i, max_len=config.N)
                       for i, rec in enumerate(dataset)]
        else:
            samples = list(dataset)
        order = np.random.default_rng([seed, epoch]).permutation(len(samples))
        drop_rng = np.random.default_rng([seed, epoch, 1])
        losses, correct = [], 0
        for start in range(0, len(order), batch_size):
            batch = [samples[i] for i in order[start:start + batch_size]]
            X, M, T = collate(batch, config.N)
            labels = np.array([rec.label for rec in batch])
            lengths = M.sum(axis=1)
            probs, trace = forward(weights, X, M, T, train=True, rng=drop_rng)
            losses.append(edl_loss(probs, labels, lengths, edl_normalize))
            correct += int((probs.argmax(axis=1) == labels).sum())
            grads = backward(weights, trace, edl_logit_grad(probs, labels, lengths, edl_normalize))
            adam_step(weights, grads, state, lr=lr)
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "accuracy": correct / len(samples)}
        history.append(record)
        log.debug("epoch %d loss %.5f acc %.3f", epoch, record["loss"], record["accuracy"])
        if on_epoch is not None:
            on_epoch(record)
    return weights, history
