"""Shared helpers: spec builders, random networks, and a finite-difference
gradient oracle used by several test modules."""

import numpy as np
import pytest

from dapperfl.nn_core import LayerSpec, Network, Objective, backward, forward, init_network
from dapperfl.training import cross_entropy, dar_regularizer


def dense_specs(*widths, prunable_hidden=True):
    """Chain of dense layers: widths = (in, hidden..., out)."""
    specs = []
    for k in range(len(widths) - 1):
        last = k == len(widths) - 2
        specs.append(
            LayerSpec(
                kind="dense",
                in_channels=widths[k],
                out_channels=widths[k + 1],
                activation="none" if last else "relu",
                prunable=False if last else prunable_hidden,
            )
        )
    return tuple(specs)


def conv_specs(channels, classes, kernel=3):
    """conv2d chain (1 input channel) ending in a dense classifier."""
    specs = []
    chan_in = 1
    for chan in channels:
        specs.append(
            LayerSpec("conv2d", chan_in, chan, activation="relu", prunable=True, kernel=kernel)
        )
        chan_in = chan
    specs.append(LayerSpec("dense", chan_in, classes, activation="none", prunable=False))
    return tuple(specs)


def random_batch(net: Network, rng: np.random.Generator, batch: int = 6):
    first = net.specs[0]
    n_classes = net.specs[-1].out_channels
    if first.kind == "dense":
        x = rng.normal(size=(batch, first.in_channels))
    else:
        h, w = net.input_hw
        x = rng.normal(size=(batch, first.in_channels, h, w))
    y = rng.integers(0, n_classes, size=batch)
    return x, y


def objective_value(net: Network, x, y, gamma: float) -> float:
    z, logits = forward(net, x)
    if z.ndim == 4:
        z = z.mean(axis=(2, 3))
    return cross_entropy(logits, y) + gamma * dar_regularizer(z)


def fd_max_rel_err(net: Network, x, y, gamma: float = 0.0, h: float = 1e-4) -> float:
    """Max relative error between analytic gradients and central finite
    differences of the composite objective, over every parameter."""
    grads = backward(net, x, Objective(labels=np.asarray(y), gamma=gamma))
    worst = 0.0
    for k, (dw, db) in enumerate(grads):
        for tensor, analytic in ((net.weights[k], dw), (net.biases[k], db)):
            flat = tensor.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                up = objective_value(net, x, y, gamma)
                flat[idx] = orig - h
                down = objective_value(net, x, y, gamma)
                flat[idx] = orig
                numeric = (up - down) / (2.0 * h)
                a = analytic.reshape(-1)[idx]
                scale = max(abs(a), abs(numeric), 1.0)
                worst = max(worst, abs(a - numeric) / scale)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def small_random_net(seed: int) -> Network:
    """Alternate between dense and conv nets so both layer kinds get
    exercised by shared property checks.

    Biases are randomized away from the zero init: with zero biases, a
    sample whose first relu layer goes fully negative yields downstream
    pre-activations of exactly 0, and finite differences at a relu kink
    measure the subgradient convention instead of the gradient.
    """
    if seed % 2 == 0:
        net = init_network(dense_specs(3, 5, 4, 3), seed=seed)
    else:
        net = init_network(conv_specs((2, 3), 3, kernel=2), seed=seed, input_hw=(5, 5))
    rng = np.random.default_rng(seed + 977)
    for b in net.biases:
        b += rng.uniform(0.05, 0.4, size=b.shape)
    return net
