"""Shared-trunk actor-critic MLP with hand-written forward and backward passes.

Shapes are fixed: an 11 -> 32 ReLU trunk feeding an 8-way softmax policy
head and a scalar value head. Everything is float64 numpy.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .mdp import N_ACTIONS, STATE_DIM

HIDDEN = 32
CLIP_EPS = 0.2
ENTROPY_COEF = 0.02
VALUE_COEF = 0.5
MAX_GRAD_NORM = 1.0


@dataclass
class NetworkParams:
    w1: np.ndarray  # (32, 11)
    b1: np.ndarray  # (32,)
    wp: np.ndarray  # (8, 32)
    bp: np.ndarray  # (8,)
    wv: np.ndarray  # (1, 32)
    bv: float

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: np.asarray(getattr(self, f.name), dtype=np.float64) for f in fields(self)}

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays().values()])

    @classmethod
    def from_flat(cls, vec: np.ndarray) -> NetworkParams:
        out, k = {}, 0
        for name, shape in PARAM_SHAPES.items():
            size = int(np.prod(shape)) if shape else 1
            chunk = np.array(vec[k:k + size], dtype=np.float64)
            out[name] = float(chunk[0]) if not shape else chunk.reshape(shape)
            k += size
        return cls(**out)

    def copy(self) -> NetworkParams:
        return NetworkParams.from_flat(self.flat())

    @classmethod
    def zeros(cls) -> NetworkParams:
        return cls.from_flat(np.zeros(N_PARAMS))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))

    def to_json(self) -> dict:
        return {name: np.asarray(a).tolist() for name, a in self.arrays().items()}

    @classmethod
    def from_json(cls, data: dict) -> NetworkParams:
        params = {}
        for name, shape in PARAM_SHAPES.items():
            arr = np.asarray(data[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            params[name] = float(arr) if not shape else arr
        return cls(**params)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> NetworkParams:
        return cls.from_json(json.loads(Path(path).read_text()))


PARAM_SHAPES: dict[str, tuple[int, ...]] = {
    "w1": (HIDDEN, STATE_DIM),
    "b1": (HIDDEN,),
    "wp": (N_ACTIONS, HIDDEN),
    "bp": (N_ACTIONS,),
    "wv": (1, HIDDEN),
    "bv": (),
}
N_PARAMS = sum(int(np.prod(s)) if s else 1 for s in PARAM_SHAPES.values())


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(seed: int) -> NetworkParams:
    """Xavier-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)

    def xavier(out_dim: int, in_dim: int) -> np.ndarray:
        bound = xavier_bound(in_dim, out_dim)
        return rng.uniform(-bound, bound, size=(out_dim, in_dim))

    return NetworkParams(
        w1=xavier(HIDDEN, STATE_DIM),
        b1=np.zeros(HIDDEN),
        wp=xavier(N_ACTIONS, HIDDEN),
        bp=np.zeros(N_ACTIONS),
        wv=xavier(1, HIDDEN),
        bv=0.0,
    )


@dataclass
class PolicyOutput:
    logits: np.ndarray
    log_probs: np.ndarray
    probs: np.ndarray
    value: float
    hidden: np.ndarray
    pre_activation: np.ndarray


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z)
    return shifted - math.log(np.sum(np.exp(shifted)))


def entropy(probs: np.ndarray) -> float:
    p = probs[probs > 0]
    return float(-np.sum(p * np.log(p)))


def forward(params: NetworkParams, state: np.ndarray) -> PolicyOutput:
    s = np.asarray(state, dtype=np.float64)
    pre = params.w1 @ s + params.b1
    h = np.maximum(pre, 0.0)
    logits = params.wp @ h + params.bp
    logp = log_softmax(logits)
    probs = np.exp(logp)
    value = float(params.wv[0] @ h + params.bv)
    return PolicyOutput(logits, logp, probs, value, h, pre)


def sample_action(output: PolicyOutput, rng: np.random.Generator) -> tuple[int, float]:
    """Inverse-CDF draw from the policy; one uniform per call."""
    cdf = np.cumsum(output.probs)
    u = rng.random() * cdf[-1]
    action = int(np.searchsorted(cdf, u, side="right"))
    action = min(action, N_ACTIONS - 1)
    # never land on a zero-probability action through round-off at the top
    while output.probs[action] <= 0.0 and action > 0:
        action -= 1
    return action, float(output.log_probs[action])


@dataclass
class LossTerms:
    loss: float
    surrogate: float
    value_loss: float
    entropy: float
    ratio: float
    clipped: bool


def clipped_surrogate(ratio: float, advantage: float, clip_eps: float = CLIP_EPS) -> tuple[float, bool]:
    """min(r A, clip(r) A) and whether the clipped branch is the one in force."""
    clipped_ratio = min(max(ratio, 1.0 - clip_eps), 1.0 + clip_eps)
    unclipped = ratio * advantage
    clipped = clipped_ratio * advantage
    if clipped < unclipped:
        return clipped, True
    return unclipped, False


def loss_terms(
    params: NetworkParams,
    state: np.ndarray,
    action: int,
    advantage: float,
    value_target: float,
    old_log_prob: float,
    clip_eps: float = CLIP_EPS,
    entropy_coef: float = ENTROPY_COEF,
    value_coef: float = VALUE_COEF,
) -> LossTerms:
    out = forward(params, state)
    return _loss_from_output(out, action, advantage, value_target, old_log_prob,
                             clip_eps, entropy_coef, value_coef)


def _loss_from_output(out, action, advantage, value_target, old_log_prob,
                      clip_eps, entropy_coef, value_coef) -> LossTerms:
    ratio = math.exp(out.log_probs[action] - old_log_prob)
    surrogate, clipped = clipped_surrogate(ratio, advantage, clip_eps)
    value_loss = (out.value - value_target) ** 2
    ent = float(-np.sum(out.probs * out.log_probs))
    loss = -surrogate + value_coef * value_loss - entropy_coef * ent
    return LossTerms(loss, surrogate, value_loss, ent, ratio, clipped)


def backward(
    params: NetworkParams,
    state: np.ndarray,
    action: int,
    advantage: float,
    value_target: float,
    old_log_prob: float,
    clip_eps: float = CLIP_EPS,
    entropy_coef: float = ENTROPY_COEF,
    value_coef: float = VALUE_COEF,
) -> tuple[NetworkParams, LossTerms]:
    """Analytic gradient of the per-sample loss

        -min(r A, clip(r, 1-eps, 1+eps) A) + value_coef (V - R)^2 - entropy_coef H

    with respect to every parameter. When the clipped branch is selected the
    surrogate contributes nothing.
    """
    for x in (advantage, value_target, old_log_prob):
        if not math.isfinite(x):
            raise ValueError("backward called with a non-finite scalar")
    s = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("backward called with a non-finite state")

    out = forward(params, s)
    terms = _loss_from_output(out, action, advantage, value_target, old_log_prob,
                              clip_eps, entropy_coef, value_coef)
    p, logp = out.probs, out.log_probs

    grad_logits = np.zeros(N_ACTIONS)
    if not terms.clipped:
        # d(-r A)/dz = -A r (onehot - p)
        onehot = np.zeros(N_ACTIONS)
        onehot[action] = 1.0
        grad_logits -= advantage * terms.ratio * (onehot - p)
    # d(-c H)/dz_j = c p_j (log p_j + H)
    grad_logits += entropy_coef * p * (logp + terms.entropy)
    grad_value = 2.0 * value_coef * (out.value - value_target)

    grad_h = params.wp.T @ grad_logits + params.wv[0] * grad_value
    grad_pre = grad_h * (out.pre_activation > 0)

    grad = NetworkParams(
        w1=np.outer(grad_pre, s),
        b1=grad_pre,
        wp=np.outer(grad_logits, out.hidden),
        bp=grad_logits,
        wv=(grad_value * out.hidden)[None, :],
        bv=float(grad_value),
    )
    return grad, terms


def clip_gradient(gradient: NetworkParams, max_norm: float = MAX_GRAD_NORM) -> tuple[NetworkParams, float]:
    flat = gradient.flat()
    norm = float(np.linalg.norm(flat))
    if norm > max_norm:
        flat = flat * (max_norm / norm)
    return NetworkParams.from_flat(flat), norm


def apply_update(
    params: NetworkParams,
    gradient: NetworkParams,
    learning_rate: float,
    max_norm: float = MAX_GRAD_NORM,
) -> NetworkParams:
    """One SGD step on the norm-clipped gradient; returns new params."""
    if learning_rate <= 0:
        raise ValueError(f"learning_rate must be > 0, got {learning_rate}")
    clipped, _ = clip_gradient(gradient, max_norm)
    return NetworkParams.from_flat(params.flat() - learning_rate * clipped.flat())
