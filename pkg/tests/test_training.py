"""Objective pieces (cross-entropy, representation penalty) and the local
training loop."""

import statistics

import numpy as np
import pytest

from dapperfl.errors import ConfigError, InputError
from dapperfl.masking import apply_mask, build_mask, channel_l1_scores
from dapperfl.nn_core import Objective, backward, init_network, init_optimizer, sgd_step
from dapperfl.training import (
    HyperParams,
    LossBreakdown,
    cross_entropy,
    dar_regularizer,
    local_objective,
    mean_sq_representation,
    run_epochs,
    train_local,
)

from conftest import dense_specs, fd_max_rel_err


def make_task(seed, n=40, dims=4, classes=3):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, dims)), rng.integers(0, classes, size=n)


def test_dar_regularizer_examples():
    assert dar_regularizer(np.array([[3.0, 4.0]])) == 25.0
    assert dar_regularizer(np.zeros((5, 7))) == 0.0


def test_dar_regularizer_matches_brute_force(rng):
    z = rng.normal(size=(9, 6))
    brute = sum(float(np.dot(row, row)) for row in z) / 9
    assert abs(dar_regularizer(z) - brute) < 1e-12


def test_dar_regularizer_validates_shape():
    with pytest.raises(InputError):
        dar_regularizer(np.zeros(4))
    with pytest.raises(InputError):
        dar_regularizer(np.zeros((0, 4)))


def test_cross_entropy_uniform_two_classes():
    assert cross_entropy(np.zeros((3, 2)), np.array([0, 1, 0])) == pytest.approx(np.log(2.0))


def test_cross_entropy_confident_limit():
    logits = np.array([[40.0, 0.0], [0.0, 40.0]])
    assert cross_entropy(logits, np.array([0, 1])) < 1e-6


def test_cross_entropy_matches_brute_force(rng):
    logits = rng.normal(size=(4, 5)) * 3.0
    labels = rng.integers(0, 5, size=4)
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    brute = float(np.mean([-np.log(probs[i, labels[i]]) for i in range(4)]))
    assert abs(cross_entropy(logits, labels) - brute) <= 1e-10


def test_cross_entropy_validates_labels():
    logits = np.zeros((2, 3))
    with pytest.raises(InputError):
        cross_entropy(logits, np.array([0, 3]))
    with pytest.raises(InputError):
        cross_entropy(logits, np.array([0, -1]))
    with pytest.raises(InputError):
        cross_entropy(logits, np.array([0]))
    with pytest.raises(InputError):
        cross_entropy(np.zeros((0, 3)), np.zeros(0, dtype=int))


def test_loss_breakdown_total():
    loss = LossBreakdown(cross_entropy=0.7, regularizer=25.0, gamma=0.01)
    assert loss.total == pytest.approx(0.95, abs=0)
    assert loss.total - (loss.cross_entropy + loss.gamma * loss.regularizer) == 0.0


def test_local_objective_gamma_zero_is_plain_ce():
    net = init_network(dense_specs(4, 6, 3), seed=1)
    feats, labels = make_task(2)
    loss = local_objective(net, None, feats, labels, gamma=0.0)
    assert loss.total == loss.cross_entropy
    assert loss.regularizer > 0.0


def test_local_objective_rejects_unapplied_mask():
    net = init_network(dense_specs(4, 6, 3), seed=3)
    mask = build_mask(net.specs, channel_l1_scores(net), rho=0.4)
    feats, labels = make_task(4)
    with pytest.raises(InputError):
        local_objective(net, mask, feats, labels, gamma=0.01)
    pruned = apply_mask(net, mask)
    loss = local_objective(pruned, mask, feats, labels, gamma=0.01)
    assert loss.total == loss.cross_entropy + 0.01 * loss.regularizer


def test_composite_gradient_matches_finite_differences(rng):
    net = init_network(dense_specs(4, 5, 3), seed=6)
    for b in net.biases:
        b += rng.uniform(0.05, 0.4, size=b.shape)
    x, y = make_task(7, n=8)
    assert fd_max_rel_err(net, x, y, gamma=0.02) < 1e-4


def test_hyperparams_validation():
    for bad in (
        dict(learning_rate=-1.0),
        dict(momentum=1.0),
        dict(weight_decay=-1e-5),
        dict(batch_size=0),
        dict(local_epochs=0),
        dict(gamma=-0.01),
    ):
        with pytest.raises(ConfigError):
            HyperParams(**bad)


def test_train_local_epoch_accounting():
    net = init_network(dense_specs(4, 6, 3), seed=8)
    feats, labels = make_task(9)
    hp = HyperParams(local_epochs=1, batch_size=16)
    out = train_local(net, None, feats, labels, hp, seed=5)  # E=1 -> nothing to do
    assert out is not net
    for k in range(2):
        assert np.array_equal(out.weights[k], net.weights[k])


def test_train_local_zero_learning_rate_is_identity():
    net = init_network(dense_specs(4, 6, 3), seed=10)
    feats, labels = make_task(11)
    hp = HyperParams(learning_rate=0.0, batch_size=16)
    out = train_local(net, None, feats, labels, hp, seed=5, epochs=3)
    for k in range(2):
        assert np.array_equal(out.weights[k], net.weights[k])


def test_train_local_matches_scripted_replay():
    net = init_network(dense_specs(4, 6, 3), seed=12)
    mask = build_mask(net.specs, channel_l1_scores(net), rho=0.4)
    pruned = apply_mask(net, mask)
    feats, labels = make_task(13, n=10)
    hp = HyperParams(batch_size=4, gamma=0.01)
    got = train_local(pruned, mask, feats, labels, hp, seed=99, epochs=2)

    expect = pruned.copy()
    rng = np.random.default_rng(99)
    opt = init_optimizer(expect, hp.learning_rate, hp.momentum, hp.weight_decay)
    for _ in range(2):
        order = rng.permutation(10)
        for start in range(0, 10, 4):
            idx = order[start : start + 4]
            grads = backward(expect, feats[idx], Objective(labels=labels[idx], gamma=0.01), mask)
            sgd_step(expect, grads, opt, mask)
    for k in range(2):
        assert np.array_equal(got.weights[k], expect.weights[k])
        assert np.array_equal(got.biases[k], expect.biases[k])


def test_train_local_keeps_mask_and_input_intact():
    net = init_network(dense_specs(4, 8, 3), seed=14)
    mask = build_mask(net.specs, channel_l1_scores(net), rho=0.6)
    pruned = apply_mask(net, mask)
    before = [w.copy() for w in pruned.weights]
    feats, labels = make_task(15)
    out = train_local(pruned, mask, feats, labels, HyperParams(batch_size=16), seed=3, epochs=4)
    for k, (wm, bm) in enumerate(mask.tensors()):
        assert np.all(out.weights[k][wm == 0.0] == 0.0)
        assert np.all(out.biases[k][bm == 0.0] == 0.0)
        assert np.array_equal(pruned.weights[k], before[k])
    # training moved at least one unmasked weight
    assert any(not np.array_equal(out.weights[k], pruned.weights[k]) for k in range(2))


def test_train_local_is_seed_deterministic():
    net = init_network(dense_specs(4, 6, 3), seed=16)
    feats, labels = make_task(17)
    hp = HyperParams(batch_size=8)
    a = train_local(net, None, feats, labels, hp, seed=21, epochs=2)
    b = train_local(net, None, feats, labels, hp, seed=21, epochs=2)
    c = train_local(net, None, feats, labels, hp, seed=22, epochs=2)
    for k in range(2):
        assert np.array_equal(a.weights[k], b.weights[k])
    assert any(not np.array_equal(a.weights[k], c.weights[k]) for k in range(2))


def test_run_epochs_rejects_empty_data():
    net = init_network(dense_specs(4, 6, 3), seed=18)
    with pytest.raises(InputError):
        run_epochs(net, None, np.zeros((0, 4)), np.zeros(0, dtype=int),
                   HyperParams(), np.random.default_rng(0), epochs=1, gamma=0.0)


def test_mean_sq_representation_matches_regularizer():
    net = init_network(dense_specs(4, 6, 3), seed=19)
    feats, _ = make_task(20, n=30)
    from dapperfl.nn_core import forward

    z, _ = forward(net, feats)
    assert mean_sq_representation(net, feats, chunk=7) == pytest.approx(
        dar_regularizer(z), abs=1e-12
    )
    with pytest.raises(InputError):
        mean_sq_representation(net, np.zeros((0, 4)))


def test_regularizer_shrinks_representations_across_seeds():
    """The penalty's defining effect: median representation norm after
    training drops when gamma is on."""
    with_gamma, without = [], []
    for seed in range(5):
        net = init_network(dense_specs(8, 12, 3), seed=seed)
        rng = np.random.default_rng(seed + 50)
        feats = rng.normal(size=(120, 8)) + 1.0
        labels = rng.integers(0, 3, size=120)
        hp_on = HyperParams(batch_size=32, gamma=0.05)
        hp_off = HyperParams(batch_size=32, gamma=0.0)
        a = train_local(net, None, feats, labels, hp_on, seed=seed, epochs=4)
        b = train_local(net, None, feats, labels, hp_off, seed=seed, epochs=4)
        with_gamma.append(mean_sq_representation(a, feats))
        without.append(mean_sq_representation(b, feats))
    assert statistics.median(with_gamma) < statistics.median(without)
