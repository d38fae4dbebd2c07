"""Client-side objective and local training loop.

The training objective is mean cross-entropy plus ``gamma`` times a
domain regularizer: the batch-mean squared l2 norm of the representation
the encoder hands to the classifier head.  Shrinking that norm pulls the
per-domain feature distributions toward a common, small region, which is
what lets heterogeneously pruned clients share a global model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core
from .errors import ConfigError, InputError
from .masking import ChannelMask
from .nn_core import Network, Objective, Tensor


@dataclass(frozen=True)
class HyperParams:
    """Local optimization settings shared by all clients."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64
    local_epochs: int = 5
    gamma: float = 0.01

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    cross_entropy: float
    regularizer: float
    gamma: float

    @property
    def total(self) -> float:
        return self.cross_entropy + self.gamma * self.regularizer


def dar_regularizer(representation: Tensor) -> float:
    """Batch-mean squared l2 norm of the representation."""
    z = np.asarray(representation, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise InputError("representation must be a non-empty (batch, dim) array")
    return float(np.sum(z * z) / z.shape[0])


def cross_entropy(logits: Tensor, labels: Tensor) -> float:
    """Mean negative log-likelihood under a softmax, max-shifted for
    stability."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise InputError("logits must be a non-empty (batch, classes) array")
    if labels.shape != (logits.shape[0],):
        raise InputError("labels must be a vector matching the batch size")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise InputError(f"labels out of range [0, {logits.shape[1]})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(labels.size), labels]
    return float(np.mean(log_z - picked))


def local_objective(
    net: Network,
    mask: ChannelMask | None,
    features: Tensor,
    labels: Tensor,
    gamma: float,
) -> LossBreakdown:
    """Evaluate the composite objective on one batch.

    The mask, when given, must already be applied to ``net``; this is
    checked so a stale model cannot silently leak pruned weights into the
    loss.
    """
    if mask is not None:
        for (wm, _), w in zip(mask.tensors(), net.weights):
            if np.any(w[wm == 0.0] != 0.0):
                raise InputError("mask not applied: pruned positions are non-zero")
    representation, logits = nn_core.forward(net, features)
    return LossBreakdown(
        cross_entropy=cross_entropy(logits, labels),
        regularizer=dar_regularizer(representation),
        gamma=float(gamma),
    )


def run_epochs(
    net: Network,
    mask: ChannelMask | None,
    features: Tensor,
    labels: Tensor,
    hp: HyperParams,
    rng: np.random.Generator,
    epochs: int,
    gamma: float,
) -> None:
    """Shuffled minibatch SGD, in place, with a fresh optimizer.

    Each epoch draws one permutation from ``rng`` and walks it in
    consecutive slices of ``hp.batch_size``; the trailing short batch is
    kept.
    """
    n = features.shape[0]
    if n == 0:
        raise InputError("cannot train on an empty dataset")
    opt = nn_core.init_optimizer(net, hp.learning_rate, hp.momentum, hp.weight_decay)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            idx = order[start : start + hp.batch_size]
            objective = Objective(labels=labels[idx], gamma=gamma)
            grads = nn_core.backward(net, features[idx], objective, mask)
            nn_core.sgd_step(net, grads, opt, mask)


def train_local(
    pruned: Network,
    mask: ChannelMask | None,
    features: Tensor,
    labels: Tensor,
    hp: HyperParams,
    seed: int,
    epochs: int | None = None,
) -> Network:
    """Train a pruned model on local data and return the result.

    The fine-tuning pass that precedes pruning counts as the first local
    epoch, so by default this runs ``hp.local_epochs - 1`` epochs of the
    composite objective.  ``epochs`` overrides that count for pipelines
    without a fine-tuning pass.  The input model is not modified.
    """
    if epochs is None:
        epochs = hp.local_epochs - 1
    out = pruned.copy()
    if epochs <= 0:
        return out
    rng = np.random.default_rng(seed)
    run_epochs(out, mask, features, labels, hp, rng, epochs, hp.gamma)
    return out


def mean_sq_representation(net: Network, features: Tensor, chunk: int = 1024) -> float:
    """Mean squared representation norm over a dataset."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        raise InputError("empty dataset")
    total = 0.0
    for start in range(0, features.shape[0], chunk):
        z, _ = nn_core.forward(net, features[start : start + chunk])
        total += float(np.sum(z * z))
    return total / features.shape[0]
