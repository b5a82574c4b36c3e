import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from envs import BANDIT_STATE, run_bandit
from oracles import brute_force_gae, reward_to_go
from ppollm import policy
from ppollm.policy import clipped_surrogate, init_params
from ppollm.ppo import (
    PPOTrainer,
    RolloutBuffer,
    Transition,
    compute_gae,
    normalize_advantages,
    ppo_update,
)

S = np.zeros(11)


def tr(reward, value, terminal=False, log_prob=-2.0, action=0, state=S):
    return Transition(state, action, log_prob, value, reward, state, terminal)


def test_single_terminal_step():
    batch = compute_gae([tr(1.0, 0.4, terminal=True)])
    assert batch.advantages[0] == pytest.approx(0.6, abs=1e-15)
    assert batch.returns[0] == pytest.approx(1.0, abs=1e-15)


def test_two_step_recursion():
    batch = compute_gae([tr(0.0, 0.0), tr(1.0, 0.0, terminal=True)], 0.99, 0.95)
    assert batch.advantages[1] == 1.0
    assert batch.advantages[0] == pytest.approx(0.99 * 0.95 * 1.0, abs=1e-15)


def test_empty_buffer_rejected():
    with pytest.raises(ValueError):
        compute_gae([])


def test_non_terminal_tail_bootstraps():
    batch = compute_gae([tr(0.5, 0.2)], gamma=0.9, bootstrap_value=2.0)
    assert batch.advantages[0] == pytest.approx(0.5 + 0.9 * 2.0 - 0.2)


def _random_buffer(rng, n):
    rewards = rng.normal(0, 3, n)
    values = rng.normal(0, 2, n)
    terminals = rng.random(n) < 0.2
    buf = [tr(float(r), float(v), bool(d)) for r, v, d in zip(rewards, values, terminals)]
    return buf, rewards, values, terminals


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 32), st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_gae_matches_brute_force(n, seed, gamma, lam):
    rng = np.random.default_rng(seed)
    buf, rewards, values, terminals = _random_buffer(rng, n)
    boot = float(rng.normal())
    got = compute_gae(buf, gamma, lam, boot)
    want = brute_force_gae(rewards, values, terminals, boot, gamma, lam)
    assert np.allclose(got.advantages, want, atol=1e-12, rtol=0)
    assert np.allclose(got.returns, np.array(want) + values, atol=1e-12, rtol=0)


@given(st.integers(1, 32), st.integers(0, 2**32 - 1))
def test_lambda_zero_is_one_step_td(n, seed):
    rng = np.random.default_rng(seed)
    buf, rewards, values, terminals = _random_buffer(rng, n)
    got = compute_gae(buf, 0.99, 0.0, 0.3)
    nxt = list(values[1:]) + [0.3]
    td = [rewards[t] + 0.99 * nxt[t] * (not terminals[t]) - values[t] for t in range(n)]
    assert np.allclose(got.advantages, td, atol=1e-12, rtol=0)


@given(st.integers(1, 32), st.integers(0, 2**32 - 1))
def test_undiscounted_gae_is_reward_to_go(n, seed):
    rng = np.random.default_rng(seed)
    rewards = rng.normal(0, 1, n)
    terminals = rng.random(n) < 0.3
    buf = [tr(float(r), 0.0, bool(d)) for r, d in zip(rewards, terminals)]
    got = compute_gae(buf, 1.0, 1.0, 0.0)
    assert np.allclose(got.advantages, reward_to_go(rewards, terminals), atol=1e-12, rtol=0)


def test_clipped_surrogate_hand_value():
    value, clipped = clipped_surrogate(1.5, 1.0, 0.2)
    assert clipped and value == pytest.approx(1.2)


@given(st.floats(0.01, 5.0), st.floats(-10, 10), st.floats(0.05, 0.5))
def test_surrogate_is_pessimistic(ratio, adv, eps):
    value, _ = clipped_surrogate(ratio, adv, eps)
    assert value <= ratio * adv + 1e-12
    clip_r = min(max(ratio, 1 - eps), 1 + eps)
    assert value <= clip_r * adv + 1e-12


def test_first_epoch_has_no_clipping():
    params = init_params(0)
    rng = np.random.default_rng(0)
    buf = []
    for _ in range(8):
        state = rng.uniform(0, 1, 11)
        out = policy.forward(params, state)
        a, lp = policy.sample_action(out, rng)
        buf.append(Transition(state, a, lp, out.value, float(rng.normal()), state, False))
    _, stats = ppo_update(params, buf, epochs=1)
    assert stats.clip_fraction == 0.0


def test_advantage_normalisation():
    adv = normalize_advantages(np.array([1.0, 2.0, 3.0, 6.0]))
    assert adv.mean() == pytest.approx(0, abs=1e-12)
    assert adv.std() == pytest.approx(1, abs=1e-6)
    assert normalize_advantages(np.array([4.0]))[0] == 4.0


def test_update_stays_finite_under_extreme_rewards():
    trainer = PPOTrainer(seed=1)
    rng = np.random.default_rng(1)
    for _ in range(60):
        state = rng.uniform(0, 1, 11)
        a, lp, out = trainer.act(state)
        r = float(rng.uniform(-1e3, 1e3))
        trainer.observe(Transition(state, a, lp, out.value, r, rng.uniform(0, 1, 11), bool(rng.random() < 0.1)))
        assert trainer.params.is_finite()


def test_entropy_regulariser_pulls_towards_uniform():
    trainer = PPOTrainer(seed=3, entropy_coef=10.0)
    trainer.params.bp = np.array([3.0, 0, 0, 0, 0, 0, 0, -2.0])
    for _ in range(100):
        a, lp, out = trainer.act(BANDIT_STATE)
        trainer.observe(Transition(BANDIT_STATE, a, lp, out.value, 1.0 if a == 0 else 0.0,
                                   BANDIT_STATE, True))
    assert policy.entropy(trainer.probs(BANDIT_STATE)) >= 0.99 * math.log(8)


def test_bandit_converges_with_defaults():
    episodes, p, _ = run_bandit(seed=42)
    assert p >= 0.9
    assert episodes <= 200


def test_rolling_buffer_keeps_most_recent():
    buf = RolloutBuffer(3)
    for k in range(5):
        buf.add(tr(float(k), 0.0))
    assert [t.reward for t in buf.as_list()] == [2.0, 3.0, 4.0]


def test_transition_rejects_positive_log_prob():
    with pytest.raises(ValueError):
        tr(0.0, 0.0, log_prob=0.1)
