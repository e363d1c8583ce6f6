"""Aggregation router tests: gate normalization, strategies, fusion counts."""

import math

import numpy as np
import pytest

from frameflow import rng, tensor as T
from frameflow.aggregation import (AggregationGate, Aggregator,
                                   aggregate_addition, aggregate_adaptive,
                                   aggregate_concat, aggregate_learnable)
from frameflow.errors import StrategyError


def rand_tokens(seed, n=10, d=16):
    return rng.generator(seed, 77).normal(size=(n, d))


def test_gate_rows_sum_to_one_many_seeds():
    for seed in range(100):
        gate = AggregationGate(d_model=16, seed=seed)
        vg = T.constant(rand_tokens(seed, n=1))
        w = gate.route_weights(vg).data
        assert w.shape == (10, 2)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert ((w > 0.0) & (w < 1.0)).all()


def test_gate_zero_logits_give_even_split():
    gate = AggregationGate(d_model=8, seed=1)
    gate.w2.data[:] = 0.0
    gate.b2.data[:] = 0.0
    w = gate.route_weights(T.constant(rand_tokens(3, n=1, d=8))).data
    np.testing.assert_allclose(w, np.full((10, 2), 0.5), atol=1e-15)


def test_gate_bias_closed_form():
    gate = AggregationGate(d_model=8, seed=1)
    gate.w2.data[:] = 0.0
    gate.b2.data[:] = 0.0
    gate.b2.data[6] = math.log(3.0)  # row 3, stream 0
    w = gate.route_weights(T.constant(rand_tokens(4, n=1, d=8))).data
    np.testing.assert_allclose(w[3], [0.75, 0.25], atol=1e-12)
    np.testing.assert_allclose(w[4], [0.5, 0.5], atol=1e-12)


def test_one_hot_recovery_within_1e8():
    gate = AggregationGate(d_model=8, seed=2)
    gate.w2.data[:] = 0.0
    gate.b2.data[0::2] = 20.0
    gate.b2.data[1::2] = -20.0
    s = T.constant(rand_tokens(5))
    t_ = T.constant(rand_tokens(6))
    w = gate.route_weights(T.constant(rand_tokens(7, n=1, d=8)))
    out = aggregate_adaptive(s, t_, w).data
    np.testing.assert_allclose(out, s.data, atol=1e-8)


def test_adaptive_is_convex_combination():
    for seed in range(50):
        gate = AggregationGate(d_model=16, seed=seed)
        s = rand_tokens(seed * 2 + 1)
        t_ = rand_tokens(seed * 2 + 2)
        w = gate.route_weights(T.constant(rand_tokens(seed, n=1)))
        out = aggregate_adaptive(T.constant(s), T.constant(t_), w).data
        lo = np.minimum(s, t_)
        hi = np.maximum(s, t_)
        assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()


def test_adaptive_one_hot_and_mean_weights():
    s = T.constant(rand_tokens(1))
    t_ = T.constant(rand_tokens(2))
    all_s = T.constant(np.tile([1.0, 0.0], (10, 1)))
    np.testing.assert_array_equal(aggregate_adaptive(s, t_, all_s).data, s.data)
    half = T.constant(np.full((10, 2), 0.5))
    np.testing.assert_allclose(aggregate_adaptive(s, t_, half).data,
                               (s.data + t_.data) / 2.0, atol=1e-15)


def test_adaptive_requires_matching_ten_token_streams():
    with pytest.raises(StrategyError):
        aggregate_adaptive(T.constant(rand_tokens(1, n=10)),
                           T.constant(rand_tokens(2, n=1)),
                           T.constant(np.full((10, 2), 0.5)))


def test_concat_counts():
    assert aggregate_concat(T.constant(rand_tokens(1, n=10)),
                            T.constant(rand_tokens(2, n=10))).shape[0] == 20
    assert aggregate_concat(T.constant(rand_tokens(1, n=10)),
                            T.constant(rand_tokens(2, n=1))).shape[0] == 11
    with pytest.raises(StrategyError):
        aggregate_concat(T.constant(rand_tokens(1, n=10)),
                         T.constant(np.zeros((0, 16))))


def test_addition_modes():
    s = T.constant(rand_tokens(3))
    zero = T.constant(np.zeros((10, 16)))
    np.testing.assert_array_equal(aggregate_addition(s, zero).data, s.data)

    cls_only = T.constant(rand_tokens(4, n=1))
    out = aggregate_addition(s, cls_only).data
    assert out.shape == (10, 16)
    np.testing.assert_allclose(out[0], s.data[0] + cls_only.data[0], atol=1e-15)
    np.testing.assert_array_equal(out[1:], s.data[1:])

    # symmetric orientation: the 10-token stream hosts the pass-through rows
    out2 = aggregate_addition(cls_only, s).data
    assert out2.shape == (10, 16)
    np.testing.assert_allclose(out2[0], s.data[0] + cls_only.data[0], atol=1e-15)
    np.testing.assert_array_equal(out2[1:], s.data[1:])

    with pytest.raises(StrategyError):
        aggregate_addition(T.constant(rand_tokens(5, n=1)),
                           T.constant(rand_tokens(6, n=1)))


def test_learnable_zero_logits_is_exact_mean():
    s = T.constant(rand_tokens(8))
    t_ = T.constant(rand_tokens(9))
    logits = T.parameter(np.zeros((10, 2)))
    out = aggregate_learnable(s, t_, logits).data
    np.testing.assert_allclose(out, (s.data + t_.data) / 2.0, atol=1e-15)


def test_learnable_equals_adaptive_with_constant_gate():
    gen = rng.generator(31, 0)
    logits = gen.normal(size=(10, 2))
    s = T.constant(rand_tokens(10, d=8))
    t_ = T.constant(rand_tokens(11, d=8))

    gate = AggregationGate(d_model=8, seed=0)
    gate.w1.data[:] = 0.0
    gate.b1.data[:] = 0.0
    gate.w2.data[:] = 0.0
    gate.b2.data[:] = logits.reshape(-1)
    w = gate.route_weights(T.constant(rand_tokens(12, n=1, d=8)))
    via_gate = aggregate_adaptive(s, t_, w).data
    via_learnable = aggregate_learnable(s, t_, T.parameter(logits)).data
    np.testing.assert_allclose(via_gate, via_learnable, atol=1e-15)


def test_gate_and_combination_gradients():
    gen = rng.generator(17, 2)
    gate = AggregationGate(d_model=6, tokens_per_frame=4, seed=9)
    s = T.constant(gen.normal(size=(4, 6)))
    t_ = T.constant(gen.normal(size=(4, 6)))
    vg_data = gen.normal(size=(1, 6))
    target = gen.normal(size=(4, 6))

    def f():
        w = gate.route_weights(T.constant(vg_data))
        out = aggregate_adaptive(s, t_, w)
        err = T.sub(out, T.constant(target))
        return T.square(err).sum()

    worst = T.grad_check(f, list(gate.params().values()))
    assert worst < 1e-6


@pytest.mark.parametrize("variant,modes,count", [
    ("concat", (10, 10), 20),
    ("concat", (10, 1), 11),
    ("concat", (1, 10), 11),
    ("concat", (1, 1), 2),
    ("addition", (10, 10), 10),
    ("addition", (10, 1), 10),
    ("addition", (1, 10), 10),
    ("learnable_weighting", (10, 10), 10),
    ("adaptive_routing", (10, 10), 10),
])
def test_fusion_token_counts(variant, modes, count):
    agg = Aggregator(variant=variant, modes=modes, d_model=8, seed=5)
    s = T.constant(rand_tokens(1, n=modes[0], d=8))
    t_ = T.constant(rand_tokens(2, n=modes[1], d=8))
    assert agg.fuse(s, t_).shape == (count, 8)


def test_invalid_strategy_configs():
    with pytest.raises(StrategyError):
        Aggregator(variant="adaptive_routing", modes=(10, 1), d_model=8, seed=0)
    with pytest.raises(StrategyError):
        Aggregator(variant="addition", modes=(1, 1), d_model=8, seed=0)
    with pytest.raises(StrategyError):
        Aggregator(variant="mystery", modes=(10, 10), d_model=8, seed=0)
    agg = Aggregator(variant="adaptive_routing", modes=(10, 10), d_model=8, seed=0)
    with pytest.raises(StrategyError):
        agg.fuse(T.constant(rand_tokens(1, n=1, d=8)),
                 T.constant(rand_tokens(2, n=10, d=8)))


def test_per_frame_scalar_gate_mode():
    gate = AggregationGate(d_model=8, seed=3, per_frame_scalar=True)
    w = gate.route_weights(T.constant(rand_tokens(1, n=1, d=8))).data
    assert w.shape == (10, 2)
    for row in w[1:]:
        np.testing.assert_array_equal(row, w[0])
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_relu_gate_nonlinearity_option():
    gate = AggregationGate(d_model=8, seed=3, nonlinearity="relu")
    w = gate.route_weights(T.constant(rand_tokens(2, n=1, d=8))).data
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(StrategyError):
        AggregationGate(d_model=8, seed=3, nonlinearity="swish")
