"""Adam and the minibatch training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .models import FallModel
from .tensor import SeededRng

log = logging.getLogger(__name__)


class Adam:
    """Adam with bias-corrected moments; updates parameter arrays in place."""

    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, p in params.items():
            if k not in grads:
                raise KeyError(f"no gradient for parameter {k!r}")
            if grads[k].shape != p.shape:
                raise ValueError(f"gradient for {k!r} has shape {grads[k].shape}, parameter has {p.shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    aux_weight: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def train(
    model: FallModel,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    rng: SeededRng,
) -> list[float]:
    """Train ``model`` in place and return the mean per-sample total loss of each epoch.

    Each epoch reshuffles with ``rng`` and walks the data in batches of
    ``config.batch_size``; a short final batch is kept. One Adam step per batch
    on the batch-mean gradient.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    n = len(x)
    if n == 0:
        raise ValueError("empty training set")
    if len(y) != n:
        raise ValueError(f"{n} inputs but {len(y)} labels")
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps)
    params = model.params()
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            losses = model.loss_and_grads(x[idx], y[idx], config.aux_weight)
            opt.step(params, model.grads())
            total += float(losses.sum())
        history.append(total / n)
        log.debug("epoch %d/%d mean loss %.6f", epoch + 1, config.epochs, history[-1])
    model.clear_cache()
    return history
