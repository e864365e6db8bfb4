"""Cross-entropy loss, SGD with momentum, and single training steps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class TrainingAborted(RuntimeError):
    """Raised when a step produces a non-finite loss."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    scheduler: str = "constant"  # constant | cosine
    momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.scheduler not in ("constant", "cosine"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")

    def lr_at(self, epoch: int) -> float:
        if self.scheduler == "cosine":
            return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.learning_rate


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient wrt the logits.

    The log-sum-exp is max-shifted; the loss accumulates in float64.
    """
    logits64 = logits.astype(np.float64)
    shifted = logits64 - logits64.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    n = logits.shape[0]
    loss = -log_probs[np.arange(n), labels].mean()
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits.astype(logits.dtype)


class SgdOptimizer:
    """SGD with classical momentum and decoupled-from-nothing weight decay:
    v <- m*v + g + wd*p; p <- p - lr*v.
    """

    def __init__(self, momentum=0.9, weight_decay=0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {}

    def step(self, net, lr):
        for key, layer, name, param in net.named_params():
            grad = layer.grads[name]
            if self.weight_decay:
                grad = grad + self.weight_decay * param
            vel = self._velocity.get(key)
            if vel is None:
                vel = np.zeros_like(param)
            vel = self.momentum * vel + grad
            self._velocity[key] = vel
            param -= (lr * vel).astype(param.dtype)


def train_step(net, batch, labels, cfg: TrainConfig, optimizer: SgdOptimizer, lr=None):
    """One forward/backward/update on a batch. Returns the float64 loss."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= net.num_classes:
        raise ValueError(f"labels out of range [0, {net.num_classes})")
    logits = net.forward(batch, training=True, cache=True)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise TrainingAborted(f"non-finite loss {loss}")
    net.backward(dlogits)
    optimizer.step(net, cfg.learning_rate if lr is None else lr)
    return float(loss)
