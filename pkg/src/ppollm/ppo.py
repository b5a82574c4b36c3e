"""Transition buffer, GAE and the clipped-surrogate update loop."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from . import policy
from .policy import NetworkParams

GAMMA = 0.99
GAE_LAMBDA = 0.95
EPOCHS = 4
LEARNING_RATE = 0.01
BUFFER_SIZE = 16


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    log_prob_old: float
    value_old: float
    reward: float
    next_state: np.ndarray
    terminal: bool

    def __post_init__(self):
        if self.log_prob_old > 0:
            raise ValueError(f"log_prob_old must be <= 0, got {self.log_prob_old}")
        for x in (self.log_prob_old, self.value_old, self.reward):
            if not math.isfinite(x):
                raise ValueError("transition holds a non-finite scalar")


@dataclass
class AdvantageBatch:
    advantages: np.ndarray
    returns: np.ndarray


def compute_gae(
    buffer: list[Transition],
    gamma: float = GAMMA,
    lam: float = GAE_LAMBDA,
    bootstrap_value: float = 0.0,
) -> AdvantageBatch:
    """Backward GAE recursion over a chronologically ordered buffer.

    The value of each step's successor is the next transition's stored
    ``value_old``; the last step uses ``bootstrap_value``. Terminal steps cut
    both the bootstrap and the recursion.
    """
    if not buffer:
        raise ValueError("compute_gae needs at least one transition")
    n = len(buffer)
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        tr = buffer[t]
        next_value = bootstrap_value if t == n - 1 else buffer[t + 1].value_old
        nonterminal = 0.0 if tr.terminal else 1.0
        delta = tr.reward + gamma * next_value * nonterminal - tr.value_old
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    returns = adv + np.array([tr.value_old for tr in buffer])
    return AdvantageBatch(adv, returns)


@dataclass
class UpdateStats:
    surrogate: float
    value_loss: float
    entropy: float
    clip_fraction: float
    grad_norm: float

    def to_dict(self) -> dict:
        return asdict(self)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    if len(adv) < 2:
        return adv.copy()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_update(
    params: NetworkParams,
    buffer: list[Transition],
    epochs: int = EPOCHS,
    learning_rate: float = LEARNING_RATE,
    gamma: float = GAMMA,
    lam: float = GAE_LAMBDA,
    bootstrap_value: float | None = None,
    clip_eps: float = policy.CLIP_EPS,
    entropy_coef: float = policy.ENTROPY_COEF,
    value_coef: float = policy.VALUE_COEF,
    max_norm: float = policy.MAX_GRAD_NORM,
) -> tuple[NetworkParams, UpdateStats]:
    """Replay ``buffer`` for ``epochs`` full-batch SGD steps.

    Each epoch averages per-sample gradients over the buffer, clips the
    global norm and takes one step. Stats are the buffer means over all
    epochs. When ``bootstrap_value`` is None it is V(next_state) of the last
    transition under the incoming params.
    """
    if not buffer:
        raise ValueError("ppo_update needs a non-empty buffer")
    if bootstrap_value is None:
        bootstrap_value = policy.forward(params, buffer[-1].next_state).value
    batch = compute_gae(buffer, gamma, lam, bootstrap_value)
    advantages = normalize_advantages(batch.advantages)

    n = len(buffer)
    sums = np.zeros(4)
    norm_sum = 0.0
    for _ in range(epochs):
        total = np.zeros(policy.N_PARAMS)
        for tr, adv, ret in zip(buffer, advantages, batch.returns):
            grad, terms = policy.backward(
                params, tr.state, tr.action, float(adv), float(ret), tr.log_prob_old,
                clip_eps, entropy_coef, value_coef,
            )
            total += grad.flat()
            sums += (terms.surrogate, terms.value_loss, terms.entropy, float(terms.clipped))
        mean_grad = NetworkParams.from_flat(total / n)
        norm_sum += float(np.linalg.norm(total / n))
        params = policy.apply_update(params, mean_grad, learning_rate, max_norm)

    count = epochs * n
    stats = UpdateStats(
        surrogate=float(sums[0] / count),
        value_loss=float(sums[1] / count),
        entropy=float(sums[2] / count),
        clip_fraction=float(sums[3] / count),
        grad_norm=norm_sum / epochs,
    )
    return params, stats


class RolloutBuffer:
    """Rolling window of the most recent transitions."""

    def __init__(self, capacity: int = BUFFER_SIZE):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self._items: deque[Transition] = deque(maxlen=capacity)

    def add(self, transition: Transition) -> None:
        self._items.append(transition)

    def __len__(self) -> int:
        return len(self._items)

    def as_list(self) -> list[Transition]:
        return list(self._items)


class PPOTrainer:
    """Owns params, the rolling buffer and the sampling RNG."""

    def __init__(
        self,
        seed: int = 0,
        params: NetworkParams | None = None,
        buffer_size: int = BUFFER_SIZE,
        epochs: int = EPOCHS,
        learning_rate: float = LEARNING_RATE,
        gamma: float = GAMMA,
        lam: float = GAE_LAMBDA,
        entropy_coef: float = policy.ENTROPY_COEF,
    ):
        self.params = params if params is not None else policy.init_params(seed)
        self.rng = np.random.default_rng(seed)
        self.buffer = RolloutBuffer(buffer_size)
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.gamma = gamma
        self.lam = lam
        self.entropy_coef = entropy_coef

    def act(self, state: np.ndarray) -> tuple[int, float, policy.PolicyOutput]:
        out = policy.forward(self.params, state)
        action, log_prob = policy.sample_action(out, self.rng)
        return action, log_prob, out

    def observe(self, transition: Transition) -> UpdateStats:
        self.buffer.add(transition)
        self.params, stats = ppo_update(
            self.params,
            self.buffer.as_list(),
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            gamma=self.gamma,
            lam=self.lam,
            entropy_coef=self.entropy_coef,
        )
        return stats

    def probs(self, state: np.ndarray) -> np.ndarray:
        return policy.forward(self.params, state).probs
