import itertools

import numpy as np
import pytest

from app.core.errors import ConfigurationError, ContractError
from app.core.routing import (
    RoutingDecision,
    dispatch_combine,
    expert_capacity,
    expert_choice_route,
    load_balancing_loss,
    normalize_combine_weights,
    route,
    router_probs,
    routing_stats,
    top_k_route,
)
from app.core.layers import mlp_block
from app.core.tensor import Tensor, precision


def _decision(combine) -> RoutingDecision:
    combine = np.asarray(combine, dtype=np.float64)
    assigned = combine > 0
    return RoutingDecision(
        router="expert_choice",
        combine=combine,
        assigned=assigned,
        expert_tokens=[np.flatnonzero(assigned[:, e]) for e in range(combine.shape[1])],
        capacities=[1],
        groups=[(0, combine.shape[0])],
    )


def test_router_probs_zero_weights_are_uniform():
    probs = router_probs(Tensor(np.random.default_rng(0).normal(size=(5, 3))), Tensor(np.zeros((3, 4))))
    np.testing.assert_allclose(probs.data, 0.25)
    single = router_probs(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1))))
    np.testing.assert_allclose(single.data, 1.0)


def test_expert_capacity_floor():
    assert expert_capacity(1.0, 8, 4) == 2
    assert expert_capacity(0.5, 64, 32) == 1
    assert expert_capacity(1.0, 8, 32) == 0


def test_expert_choice_small_case(random_probs):
    decision = expert_choice_route(random_probs(8, 4), 1.0, 8)
    assert decision.capacity == 2
    assert [len(tokens) for tokens in decision.expert_tokens] == [2, 2, 2, 2]
    assert decision.assigned.sum() == 8


@pytest.mark.parametrize("num_tokens,num_experts,capacity_factor", [(256, 4, 1.0), (256, 8, 2.0), (64, 32, 0.5)])
def test_expert_choice_exact_balance(random_probs, num_tokens, num_experts, capacity_factor):
    decision = expert_choice_route(random_probs(num_tokens, num_experts), capacity_factor, num_tokens)
    capacity = expert_capacity(capacity_factor, num_tokens, num_experts)
    assert all(len(tokens) == capacity for tokens in decision.expert_tokens)
    stats = routing_stats(decision)
    assert stats["max_load"] == stats["min_load"] == capacity


def test_expert_choice_zero_capacity_raises(random_probs):
    with pytest.raises(ConfigurationError):
        expert_choice_route(random_probs(8, 32), 1.0, 8)


def test_expert_choice_single_expert_takes_everything(random_probs):
    decision = expert_choice_route(random_probs(6, 1), 1.0, 6)
    assert decision.assigned.all()
    assert routing_stats(decision)["drop_fraction"] == 0.0


def test_expert_choice_matches_column_sort_oracle():
    probs = np.array([[0.7, 0.3], [0.2, 0.8], [0.55, 0.45], [0.4, 0.6]])
    decision = expert_choice_route(probs, 1.0, 4)
    for expert in range(2):
        best = max(itertools.combinations(range(4), 2), key=lambda pair: sum(probs[list(pair), expert]))
        assert set(decision.expert_tokens[expert].tolist()) == set(best)


def test_expert_choice_groups_get_their_own_budget(random_probs):
    decision = expert_choice_route(random_probs(10, 2), 1.0, 4)
    assert decision.capacities == [2, 2, 1]
    for tokens in decision.expert_tokens:
        assert sorted(tokens.tolist()).count(8) + sorted(tokens.tolist()).count(9) == 1


def test_expert_choice_c_equals_e_drops_nothing(random_probs):
    decision = expert_choice_route(random_probs(32, 4), 4.0, 32)
    assert routing_stats(decision)["drop_fraction"] == 0.0


def test_expert_choice_drops_shrink_with_capacity(random_probs):
    for seed in range(100):
        probs = random_probs(64, 8, seed)
        drops = [routing_stats(expert_choice_route(probs, c, 64))["drop_fraction"] for c in (0.5, 1.0, 2.0, 4.0)]
        assert all(later <= earlier for earlier, later in zip(drops, drops[1:]))


@pytest.mark.parametrize("bpr", [False, True])
def test_top_k_drops_shrink_with_capacity(random_probs, bpr):
    for seed in range(100):
        probs = random_probs(64, 8, seed)
        decisions = [top_k_route(probs, 2, c, bpr, 64) for c in (0.5, 1.0, 2.0, 4.0)]
        drops = [routing_stats(decision)["drop_fraction"] for decision in decisions]
        assert all(later <= earlier for earlier, later in zip(drops, drops[1:]))
        for smaller, larger in zip(decisions, decisions[1:]):
            assert not (smaller.assigned & ~larger.assigned).any()


def _softmax(logits):
    exps = np.exp(logits - logits.max(axis=1, keepdims=True))
    return exps / exps.sum(axis=1, keepdims=True)


@pytest.mark.parametrize("k", [1, 2])
def test_top_k_choice_survives_scaling_the_logits(k):
    logits = np.random.default_rng(11).normal(size=(32, 4))
    reference = top_k_route(_softmax(logits), k, 1.0, False, 32).assigned
    for scale in (0.1, 0.5, 3.0, 20.0):
        assert np.array_equal(top_k_route(_softmax(scale * logits), k, 1.0, False, 32).assigned, reference)


def test_group_at_least_batch_is_one_group(random_probs):
    probs = random_probs(24, 4, 3)
    for whole, larger in [
        (expert_choice_route(probs, 1.0, 24), expert_choice_route(probs, 1.0, 240)),
        (top_k_route(probs, 2, 1.0, True, 24), top_k_route(probs, 2, 1.0, True, 240)),
    ]:
        assert larger.groups == whole.groups == [(0, 24)]
        assert np.array_equal(larger.assigned, whole.assigned)
        np.testing.assert_array_equal(larger.combine, whole.combine)


def test_top_k_large_capacity_never_drops(random_probs):
    decision = top_k_route(random_probs(16, 4), 2, 8.0, False, 16)
    assert decision.assigned.sum() == 32
    assert routing_stats(decision)["drop_fraction"] == 0.0


def test_top_k_bpr_prefers_confident_token():
    probs = np.array([[0.6, 0.4], [0.9, 0.1]])
    plain = top_k_route(probs, 1, 1.0, False, 2)
    prioritized = top_k_route(probs, 1, 1.0, True, 2)
    assert plain.assigned[0, 0] and not plain.assigned[1, 0]
    assert prioritized.assigned[1, 0] and not prioritized.assigned[0, 0]


def _sequential_top_k(probs, k, capacity):
    num_tokens, num_experts = probs.shape
    fill = [0] * num_experts
    assigned = np.zeros(probs.shape, dtype=bool)
    choices = [sorted(range(num_experts), key=lambda e: (-probs[t, e], e))[:k] for t in range(num_tokens)]
    for rank in range(k):
        for token in range(num_tokens):
            expert = choices[token][rank]
            if fill[expert] < capacity:
                fill[expert] += 1
                assigned[token, expert] = True
    return assigned


def test_top_k_matches_sequential_simulation(random_probs):
    for seed in range(10):
        probs = random_probs(24, 4, seed)
        decision = top_k_route(probs, 2, 1.0, False, 24)
        assert np.array_equal(decision.assigned, _sequential_top_k(probs, 2, expert_capacity(1.0, 24, 4)))


def test_top_k_rejects_k_above_experts(random_probs):
    with pytest.raises(ConfigurationError):
        top_k_route(random_probs(4, 2), 3, 1.0, False, 4)


def test_route_rejects_unknown_router(random_probs):
    with pytest.raises(ConfigurationError):
        route(random_probs(4, 2), "hash", 1.0, 4)


def test_normalize_combine_weights():
    normalized = normalize_combine_weights(_decision([[0.3, 0.2, 0.1], [0.0, 0.0, 0.0], [0.0, 0.25, 0.0]]))
    np.testing.assert_allclose(normalized.combine[0], [0.5, 1 / 3, 1 / 6])
    np.testing.assert_allclose(normalized.combine[1], 0.0)
    np.testing.assert_allclose(normalized.combine[2], [0.0, 1.0, 0.0])


def test_normalize_combine_weights_is_idempotent(random_probs):
    once = normalize_combine_weights(top_k_route(random_probs(16, 4, 9), 2, 1.0, False, 16))
    twice = normalize_combine_weights(once)
    np.testing.assert_allclose(twice.combine, once.combine, rtol=1e-12, atol=0)


def _mlp(rng, width=3, hidden=5):
    return {
        "W_in": Tensor(rng.normal(size=(width, hidden))),
        "b_in": Tensor(rng.normal(size=hidden)),
        "W_out": Tensor(rng.normal(size=(hidden, width))),
        "b_out": Tensor(rng.normal(size=width)),
    }


def test_dispatch_identical_experts_reproduce_the_mlp(random_probs):
    rng = np.random.default_rng(5)
    with precision(np.float64):
        expert = _mlp(rng)
        x = Tensor(rng.normal(size=(8, 3)))
        decision = normalize_combine_weights(expert_choice_route(random_probs(8, 4), 1.0, 8))
        out = dispatch_combine(x, decision, [expert] * 4).data
        reference = mlp_block(x, expert).data
    kept = ~decision.dropped_mask
    np.testing.assert_allclose(out[kept], reference[kept], rtol=1e-10, atol=1e-12)
    assert np.array_equal(out[decision.dropped_mask], np.zeros_like(out[decision.dropped_mask]))


def test_dispatch_weighted_sum_hand_case():
    rng = np.random.default_rng(6)
    with precision(np.float64):
        experts = [_mlp(rng), _mlp(rng)]
        x = Tensor(rng.normal(size=(3, 3)))
        decision = _decision([[0.7, 0.2], [0.0, 0.5], [0.0, 0.0]])
        out = dispatch_combine(x, decision, experts).data
        e0, e1 = mlp_block(x, experts[0]).data, mlp_block(x, experts[1]).data
    np.testing.assert_allclose(out[0], 0.7 * e0[0] + 0.2 * e1[0], rtol=1e-12)
    np.testing.assert_allclose(out[1], 0.5 * e1[1], rtol=1e-12)
    np.testing.assert_allclose(out[2], 0.0)


def test_dispatch_is_linear_in_the_weights(random_probs):
    rng = np.random.default_rng(8)
    with precision(np.float64):
        experts = [_mlp(rng) for _ in range(4)]
        x = Tensor(rng.normal(size=(8, 3)))
        decision = top_k_route(random_probs(8, 4, 2), 2, 2.0, False, 8)
        mask = decision.assigned.astype(np.float64)
        first, second = rng.uniform(size=(8, 4)) * mask, rng.uniform(size=(8, 4)) * mask

        def run(weights):
            return dispatch_combine(x, decision, experts, Tensor(weights)).data

        np.testing.assert_allclose(run(2.5 * first), 2.5 * run(first), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(run(first + second), run(first) + run(second), rtol=1e-12, atol=1e-12)


def test_load_balancing_loss_uniform_is_one():
    probs = np.full((16, 4), 0.25)
    decision = top_k_route(probs, 1, 4.0, False, 16)
    assert load_balancing_loss(Tensor(probs), decision).item() == pytest.approx(1.0)


def test_load_balancing_loss_collapsed_router_approaches_e():
    probs = np.tile([0.997, 0.001, 0.001, 0.001], (16, 1))
    decision = top_k_route(probs, 1, 4.0, False, 16)
    assert load_balancing_loss(Tensor(probs), decision).item() == pytest.approx(4 * 0.997, rel=1e-5)


def test_load_balancing_loss_matches_formula(random_probs):
    probs = random_probs(32, 4, 7)
    decision = top_k_route(probs, 2, 1.0, True, 32)
    fraction = np.bincount(probs.argmax(axis=1), minlength=4) / 32
    expected = 4 * float((fraction * probs.mean(axis=0)).sum())
    with precision(np.float64):
        assert load_balancing_loss(Tensor(probs), decision).item() == pytest.approx(expected, rel=1e-6)


def test_load_balancing_loss_rejects_expert_choice(random_probs):
    probs = random_probs(8, 2)
    with pytest.raises(ContractError):
        load_balancing_loss(Tensor(probs), expert_choice_route(probs, 1.0, 8))
