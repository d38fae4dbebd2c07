"""Mask construction, application, recovery, and footprint accounting."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dapperfl.errors import ConfigError, InputError
from dapperfl.masking import (
    ChannelMask,
    apply_mask,
    build_mask,
    channel_l1_scores,
    complement,
    count_footprint,
    keep_vector,
    random_mask,
    recover,
)
from dapperfl.nn_core import LayerSpec, Network, init_network

from conftest import conv_specs, dense_specs

RATIO_GRID = (0.0, 0.2, 0.4, 0.6, 0.8)


def keep_mask(net, keep):
    return ChannelMask(net.specs, keep)


def test_l1_scores_hand_example():
    specs = (LayerSpec("dense", 2, 2, activation="none", prunable=False),)
    net = Network(specs=specs, weights=[np.array([[1.0, -2.0], [0.5, 0.5]])], biases=[np.zeros(2)])
    assert channel_l1_scores(net)[0].tolist() == [3.0, 1.0]


def test_l1_scores_zero_layer_and_bias_exclusion():
    specs = (LayerSpec("dense", 3, 2, activation="none", prunable=False),)
    net = Network(specs=specs, weights=[np.zeros((2, 3))], biases=[np.array([9.0, 9.0])])
    assert channel_l1_scores(net)[0].tolist() == [0.0, 0.0]


def test_l1_scores_conv_matches_brute_force(rng):
    net = init_network(conv_specs((4, 3), 2, kernel=2), seed=21, input_hw=(5, 5))
    scores = channel_l1_scores(net)
    for w, s in zip(net.weights, scores):
        brute = np.array([np.sum(np.abs(w[c])) for c in range(w.shape[0])])
        assert np.allclose(s, brute, atol=1e-12)


def test_keep_vector_examples():
    keep = keep_vector(np.array([3.0, 1.0, 2.0, 0.5]), rho=0.5)
    assert set(np.flatnonzero(keep)) == {0, 2}
    assert keep_vector(np.array([3.0, 1.0]), rho=0.0).all()
    # ties keep the lower index
    tied = keep_vector(np.ones(4), rho=0.5)
    assert set(np.flatnonzero(tied)) == {0, 1}


def test_keep_vector_count_rule_grid():
    for channels in range(1, 12):
        for rho in RATIO_GRID + (0.5, 0.45, 0.55, 0.99):
            keep = keep_vector(np.arange(channels, dtype=float), rho)
            expected_drop = min(int(math.floor(rho * channels + 0.5)), channels - 1)
            assert channels - int(keep.sum()) == expected_drop


def test_keep_vector_clamps_to_one_channel():
    assert keep_vector(np.array([5.0, 1.0]), rho=0.9).tolist() == [True, False]
    assert keep_vector(np.array([1.0]), rho=0.99).tolist() == [True]


def test_keep_vector_non_prunable_and_errors():
    assert keep_vector(np.zeros(4), rho=0.8, prunable=False).all()
    with pytest.raises(ConfigError):
        keep_vector(np.ones(4), rho=1.0)
    with pytest.raises(ConfigError):
        keep_vector(np.ones(4), rho=-0.1)
    with pytest.raises(InputError):
        keep_vector(np.ones((2, 2)), rho=0.5)
    with pytest.raises(InputError):
        keep_vector(np.array([]), rho=0.5)


def test_build_mask_expansion_rule():
    net = init_network(dense_specs(3, 4, 2), seed=5)
    scores = [np.array([4.0, 1.0, 3.0, 2.0]), np.zeros(2)]
    mask = build_mask(net.specs, scores, rho=0.5)
    assert mask.kept_counts() == [2, 2]  # head is never output-pruned
    wm0, bm0 = mask.tensors()[0]
    wm1, bm1 = mask.tensors()[1]
    dropped = [1, 3]
    assert np.all(wm0[dropped] == 0.0) and np.all(bm0[dropped] == 0.0)
    assert np.all(wm0[[0, 2]] == 1.0)
    assert np.all(wm1[:, dropped] == 0.0)  # successor input columns follow
    assert np.all(wm1[:, [0, 2]] == 1.0) and np.all(bm1 == 1.0)


def test_build_mask_requires_one_score_vector_per_layer():
    net = init_network(dense_specs(3, 4, 2), seed=5)
    with pytest.raises(InputError):
        build_mask(net.specs, [np.ones(4)], rho=0.2)


def test_channel_mask_validates_keep_vectors():
    net = init_network(dense_specs(3, 4, 2), seed=5)
    with pytest.raises(InputError):
        ChannelMask(net.specs, [np.ones(4, dtype=bool)])
    with pytest.raises(InputError):
        ChannelMask(net.specs, [np.ones(3, dtype=bool), np.ones(2, dtype=bool)])


def test_apply_mask_identity_and_idempotence(rng):
    net = init_network(dense_specs(3, 4, 2), seed=6)
    ones = build_mask(net.specs, channel_l1_scores(net), rho=0.0)
    same = apply_mask(net, ones)
    for k in range(2):
        assert np.array_equal(same.weights[k], net.weights[k])
    mask = build_mask(net.specs, channel_l1_scores(net), rho=0.5)
    once = apply_mask(net, mask)
    twice = apply_mask(once, mask)
    for k in range(2):
        assert np.array_equal(once.weights[k], twice.weights[k])
        assert np.all(once.weights[k][mask.tensors()[k][0] == 0.0] == 0.0)
    # the input is never mutated
    assert not np.array_equal(once.weights[0], net.weights[0])


def test_apply_mask_structure_mismatch():
    a = init_network(dense_specs(3, 4, 2), seed=1)
    b = init_network(dense_specs(3, 5, 2), seed=1)
    mask = build_mask(a.specs, channel_l1_scores(a), rho=0.2)
    with pytest.raises(InputError):
        apply_mask(b, mask)
    with pytest.raises(InputError):
        recover(b, mask, b)


def test_random_mask_counts_and_determinism():
    specs = dense_specs(6, 10, 4)
    a = random_mask(specs, 0.4, np.random.default_rng(3))
    b = random_mask(specs, 0.4, np.random.default_rng(3))
    assert a.kept_counts() == [6, 4] == b.kept_counts()
    assert all(np.array_equal(x, y) for x, y in zip(a.keep, b.keep))
    with pytest.raises(ConfigError):
        random_mask(specs, 1.0, np.random.default_rng(0))


def test_recover_end_cases(rng):
    net = init_network(dense_specs(3, 4, 2), seed=7)
    other = init_network(dense_specs(3, 4, 2), seed=8)
    ones = build_mask(net.specs, channel_l1_scores(net), rho=0.0)
    got = recover(net, ones, other)
    for k in range(2):
        assert np.array_equal(got.weights[k], net.weights[k])
    none = keep_mask(net, [np.zeros(4, dtype=bool), np.zeros(2, dtype=bool)])
    got = recover(net, none, other)
    for k in range(2):
        assert np.array_equal(got.weights[k], other.weights[k])
        assert np.array_equal(got.biases[k], other.biases[k])


def test_recover_matches_elementwise_select(rng):
    pruned = init_network(dense_specs(4, 6, 3), seed=31)
    global_model = init_network(dense_specs(4, 6, 3), seed=32)
    mask = build_mask(pruned.specs, channel_l1_scores(pruned), rho=0.4)
    pruned = apply_mask(pruned, mask)
    got = recover(pruned, mask, global_model)
    for k, (wm, bm) in enumerate(mask.tensors()):
        expect = np.where(wm == 1.0, pruned.weights[k], global_model.weights[k])
        assert np.array_equal(got.weights[k], expect)
        expect_b = np.where(bm == 1.0, pruned.biases[k], global_model.biases[k])
        assert np.array_equal(got.biases[k], expect_b)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=2**31),
    rho=st.floats(min_value=0.0, max_value=0.99),
)
def test_recover_round_trip_is_identity(seed, rho):
    net = init_network(dense_specs(3, 5, 4, 2), seed=seed)
    rng = np.random.default_rng(seed)
    for b in net.biases:
        b += rng.normal(size=b.shape)
    mask = build_mask(net.specs, channel_l1_scores(net), rho)
    got = recover(apply_mask(net, mask), mask, net)
    for k in range(len(net.specs)):
        assert np.array_equal(got.weights[k], net.weights[k])
        assert np.array_equal(got.biases[k], net.biases[k])


def test_complement_involution_and_values():
    net = init_network(dense_specs(3, 4, 2), seed=9)
    mask = build_mask(net.specs, channel_l1_scores(net), rho=0.5)
    tensors = mask.tensors()
    comp = complement(tensors)
    for (wm, bm), (cw, cb) in zip(tensors, comp):
        assert np.array_equal(wm + cw, np.ones_like(wm))
        assert np.array_equal(bm + cb, np.ones_like(bm))
    back = complement(comp)
    for (wm, bm), (rw, rb) in zip(tensors, back):
        assert np.array_equal(wm, rw) and np.array_equal(bm, rb)


def test_footprint_dense_arithmetic():
    net = init_network(dense_specs(10, 20, 5), seed=0)
    fp = count_footprint(net)
    assert fp.param_count == 10 * 20 + 20 + 20 * 5 + 5 == 325
    assert fp.flops == 2 * (10 * 20) + 2 * (20 * 5)


def test_footprint_conv_positions():
    # 1->2 conv, kernel 3 on 5x5 input -> 3x3 map -> dense head
    net = init_network(conv_specs((2,), 4, kernel=3), seed=0, input_hw=(5, 5))
    fp = count_footprint(net)
    assert fp.param_count == (2 * 1 * 9 + 2) + (4 * 2 + 4)
    assert fp.flops == 2 * 18 * 9 + 2 * 8 * 1


def test_footprint_requires_input_hw_for_conv():
    net = init_network(conv_specs((2,), 4, kernel=3), seed=0, input_hw=(5, 5))
    net.input_hw = None
    with pytest.raises(ConfigError):
        count_footprint(net)


def test_masked_footprint_matches_brute_force(rng):
    net = init_network(dense_specs(6, 9, 4), seed=17)
    for rho in RATIO_GRID:
        mask = build_mask(net.specs, channel_l1_scores(net), rho)
        fp = count_footprint(net, mask)
        ones = 0
        for wm, bm in mask.tensors():
            ones += int(wm.sum()) + int(bm.sum())
        assert fp.param_count == ones
        kept = mask.kept_counts()[0]
        assert fp.flops == 2 * (6 * kept) + 2 * (kept * 4)


def test_footprint_monotone_in_rho():
    net = init_network(dense_specs(16, 64, 4), seed=3)
    counts = [
        count_footprint(net, build_mask(net.specs, channel_l1_scores(net), rho)).param_count
        for rho in RATIO_GRID
    ]
    assert counts == sorted(counts, reverse=True)
    assert counts[0] == count_footprint(net).param_count
