"""Tiny environments for trainer tests."""
import numpy as np

from ppollm.mdp import encode_state
from ppollm.metrics import CodeMetrics
from ppollm.ppo import PPOTrainer, Transition

BANDIT_STATE = encode_state(CodeMetrics(295, 5, 40, 3, 30), 0.0, 0.0)


def run_bandit(seed=42, episodes=200, target=0.9, good_arm=3, **trainer_kwargs):
    """Eight arms, reward 1 for ``good_arm`` only; every pull is terminal.

    Returns (episodes used, final probability of the good arm, trainer).
    """
    trainer = PPOTrainer(seed=seed, **trainer_kwargs)
    state = BANDIT_STATE
    for ep in range(1, episodes + 1):
        action, log_prob, out = trainer.act(state)
        reward = 1.0 if action == good_arm else 0.0
        trainer.observe(Transition(state, action, log_prob, out.value, reward, state, True))
        p = trainer.probs(state)[good_arm]
        if p >= target:
            return ep, p, trainer
    return episodes, trainer.probs(state)[good_arm], trainer
