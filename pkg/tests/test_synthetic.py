import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metapipe.core import ConstantPolicy, FunctionPolicy, run_batch
from metapipe.synthetic import (
    SyntheticConfig,
    SyntheticEnv,
    brute_force_best_constant,
    exact_expected_loss,
    mask_to_assignment,
    module_context,
    oracle_table,
    perfect_routing_expected_loss,
    sample_input,
    step_module,
    synthetic_loss,
)


def enumerate_expected_loss(assignment):
    """Average the loss over every equally likely bit string."""
    n = len(assignment)
    total = 0.0
    for bits in itertools.product((0, 1), repeat=n):
        latency = sum(assignment)
        error = any(b == 1 and a == 0 for b, a in zip(bits, assignment))
        total += 4.0 / n**2 * (latency - n / 2) ** 2 + error
    return total / 2**n


# Frozen from enumerate_expected_loss over all 2^n assignments.
BEST_CONSTANT = {1: 1.0, 4: 0.75, 8: 0.9375}


def test_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(0)
    with pytest.raises(ValueError):
        SyntheticConfig(3, noise_half_width=-0.1)


def test_zero_noise_context_is_exact(rng):
    s = sample_input(SyntheticConfig(4, noise_half_width=0.0), rng, 50)
    assert np.array_equal(s.noisy_context, s.true_bits)


def test_noise_bounds(rng):
    s = sample_input(SyntheticConfig(4), rng, 10_000)
    assert s.noisy_context.min() >= -0.3 and s.noisy_context.max() <= 1.3
    assert np.all(np.abs(s.noisy_context - s.true_bits) <= 0.3)
    assert s.accumulated_latency.sum() == 0 and not s.error_flag.any()


def test_bit_frequency(rng):
    s = sample_input(SyntheticConfig(4), rng, 100_000)
    assert np.all(np.abs(s.true_bits.mean(axis=0) - 0.5) < 0.01)


def _state(bits):
    s = sample_input(SyntheticConfig(len(bits), 0.0), np.random.default_rng(0))
    s.true_bits[0] = bits
    s.noisy_context[0] = bits
    return s


def test_step_examples():
    s = step_module(_state([0, 1, 1]), 1, 0)
    assert s.accumulated_latency[0] == 0 and not s.error_flag[0]
    s = step_module(s, 2, 0)
    assert s.error_flag[0]
    s = step_module(s, 3, 1)
    assert s.error_flag[0] and s.accumulated_latency[0] == 1


def test_step_out_of_order():
    s = _state([0, 1])
    with pytest.raises(ValueError):
        step_module(s, 2, 1)
    step_module(s, 1, 1)
    with pytest.raises(ValueError):
        step_module(s, 1, 1)
    with pytest.raises(ValueError):
        step_module(s, 2, 2)


@pytest.mark.parametrize(
    "latency, error, n, expected",
    [(2, False, 4, 0.0), (4, False, 4, 1.0), (0, True, 8, 2.0)],
)
def test_loss_examples(latency, error, n, expected):
    assert synthetic_loss(latency, error, n) == expected


def test_context_examples():
    s = _state([0, 1])
    s.noisy_context[0] = [0.1, 0.9]
    assert np.allclose(module_context(s, 1)[0], [0.1, 0.9, 0, 0, 0])
    step_module(s, 1, 1)
    assert np.allclose(module_context(s, 2)[0], [0.1, 0.9, 1, 0, 1])

    s = _state([1, 0, 1, 0])
    step_module(step_module(s, 1, 0), 2, 1)
    ctx = module_context(s, 3)[0]
    assert ctx.shape == (9,) and ctx[-1] == 1
    assert list(ctx[4:8]) == [0, 1, 0, 0]
    with pytest.raises(ValueError):
        module_context(s, 4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_step_invariants(n, seed):
    rng = np.random.default_rng(seed)
    s = sample_input(SyntheticConfig(n), rng, 1)
    actions = rng.integers(0, 2, n)
    seen_error = False
    for j in range(1, n + 1):
        step_module(s, j, actions[j - 1])
        assert s.accumulated_latency[0] == actions[:j].sum()
        if seen_error:
            assert s.error_flag[0]
        seen_error = bool(s.error_flag[0])
    assert s.error_flag[0] == any((s.true_bits[0] == 1) & (actions == 0))


def test_exact_loss_examples():
    assert exact_expected_loss([1, 1, 1, 1]) == 1.0
    assert exact_expected_loss([0, 1, 1, 1]) == 0.75
    assert exact_expected_loss([0, 0, 0, 0]) == 1.9375
    with pytest.raises(ValueError):
        exact_expected_loss([0, 2])


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
def test_exact_loss_matches_enumeration(n):
    for a in itertools.product((0, 1), repeat=n):
        assert exact_expected_loss(a) == pytest.approx(enumerate_expected_loss(a), abs=1e-12)


@pytest.mark.parametrize("n, best", sorted(BEST_CONSTANT.items()))
def test_brute_force_best(n, best):
    a, loss = brute_force_best_constant(n)
    assert loss == pytest.approx(best, abs=1e-12)
    assert exact_expected_loss(a) == loss


def test_brute_force_tie_break():
    # n=4 ties at k=1 and k=2; fewest cheap actions wins, then lexicographic
    a, _ = brute_force_best_constant(4)
    assert a == (0, 1, 1, 1)
    assert brute_force_best_constant(1) == ((1,), 1.0)


def test_brute_force_n11_and_limit():
    a, loss = brute_force_best_constant(11)
    assert loss == min(exact_expected_loss(mask_to_assignment(m, 11)) for m in range(2**11))
    with pytest.raises(ValueError):
        brute_force_best_constant(21)


def test_oracle_table_layout():
    table = oracle_table(3)
    assert len(table) == 8
    assert table[0] == (0, 3, exact_expected_loss([0, 0, 0]))
    assert table[0b100][:2] == (4, 2)
    assert mask_to_assignment(0b100, 3) == (1, 0, 0)


@pytest.mark.parametrize("assignment", [(0, 1, 1, 1), (1, 1, 1, 1), (0, 0, 1, 0), (1, 0, 1, 1, 0, 1, 0, 1)])
def test_monte_carlo_matches_exact(assignment):
    env = SyntheticEnv(len(assignment))
    losses = run_batch(env, ConstantPolicy(assignment), 100_000, np.random.default_rng(7)).losses
    se = losses.std(ddof=1) / np.sqrt(len(losses))
    assert abs(losses.mean() - exact_expected_loss(assignment)) <= 3 * se


@pytest.mark.parametrize("n", [2, 4, 8])
def test_perfect_routing(n):
    env = SyntheticEnv(n)
    router = FunctionPolicy(lambda j, ctx: (ctx[:, j - 1] > 0.5).astype(int))
    batch = run_batch(env, router, 100_000, np.random.default_rng(n))
    assert not batch.outputs[-1]["error"].any()
    se = batch.losses.std(ddof=1) / np.sqrt(len(batch.losses))
    assert abs(batch.losses.mean() - perfect_routing_expected_loss(n)) <= 3 * se


def test_env_wrapper(rng):
    env = SyntheticEnv(SyntheticConfig(3, heldout_size=17))
    assert env.context_dim(2) == 7
    assert env.heldout(rng).batch_size == 17
    assert env.constant_loss([1, 1, 1]) == exact_expected_loss([1, 1, 1])
