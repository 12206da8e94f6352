"""Tabular softmax policy, tabular value baseline and first-order optimizers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidInputError


@dataclass
class PolicyParams:
    """Logits theta[s * n_actions + a] for one-hot (state, action) features."""

    theta: np.ndarray
    n_states: int
    n_actions: int

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)
        if self.theta.size != self.n_states * self.n_actions:
            raise InvalidInputError(
                f"theta has {self.theta.size} entries, expected {self.n_states * self.n_actions}"
            )

    @classmethod
    def zeros(cls, n_states, n_actions):
        return cls(np.zeros(n_states * n_actions), n_states, n_actions)

    @property
    def logits(self) -> np.ndarray:
        return self.theta.reshape(self.n_states, self.n_actions)

    def probs_table(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def log_probs_table(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.theta.copy(), self.n_states, self.n_actions)


@dataclass
class ValueParams:
    upsilon: np.ndarray

    def __post_init__(self):
        self.upsilon = np.asarray(self.upsilon, dtype=float).reshape(-1)

    @classmethod
    def zeros(cls, n_states):
        return cls(np.zeros(n_states))

    def copy(self) -> "ValueParams":
        return ValueParams(self.upsilon.copy())


@dataclass
class OptimizerState:
    kind: str = "sgd"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("sgd", "adam"):
            raise InvalidInputError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning rate must be positive")


def action_probs(params: PolicyParams, state: int) -> np.ndarray:
    z = params.logits[state]
    e = np.exp(z - z.max())
    return e / e.sum()


def grad_log_prob(params: PolicyParams, state: int, action: int) -> np.ndarray:
    """one_hot(s, a) - sum_b pi(b|s) one_hot(s, b)."""
    g = np.zeros_like(params.theta)
    A = params.n_actions
    g[state * A:(state + 1) * A] = -action_probs(params, state)
    g[state * A + action] += 1.0
    return g


def trajectory_scores(params: PolicyParams, states: np.ndarray, actions: np.ndarray,
                      mask: Optional[np.ndarray] = None, weights: Optional[np.ndarray] = None,
                      probs: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-episode sums of (optionally weighted) score vectors on padded (n, T) arrays.

    Row i equals sum_t w[i, t] * grad_log_prob(s[i, t], a[i, t]) over unmasked steps.
    """
    states = np.asarray(states)
    actions = np.asarray(actions)
    n = states.shape[0]
    S, A = params.n_states, params.n_actions
    if mask is None:
        mask = np.ones(states.shape, dtype=bool)
    w = mask.astype(float) if weights is None else np.where(mask, weights, 0.0)
    if probs is None:
        probs = params.probs_table()
    rows = np.repeat(np.arange(n), states.shape[1])
    sa = np.zeros((n, S, A))
    np.add.at(sa, (rows, states.ravel(), actions.ravel()), w.ravel())
    visits = np.zeros((n, S))
    np.add.at(visits, (rows, states.ravel()), w.ravel())
    return (sa - visits[:, :, None] * probs[None]).reshape(n, S * A)


def state_value(vparams: ValueParams, state) -> float:
    return vparams.upsilon[state]


def returns_and_advantages(trajectories, vparams: ValueParams, gamma: float,
                           gae_lambda: Optional[float] = None):
    """Per-step advantages and value targets.

    Without ``gae_lambda``: A_t = R_t - V(s_t), target R_t. With it: GAE over TD
    residuals, bootstrapping 0 after the last step; target A_t + V(s_t).
    Returns (advantages, targets), two lists of per-trajectory arrays.
    """
    advs, targets = [], []
    for tr in trajectories:
        v = vparams.upsilon[np.asarray(tr.states)]
        if gae_lambda is None:
            adv = np.asarray(tr.rewards_to_go, dtype=float) - v
            tgt = np.asarray(tr.rewards_to_go, dtype=float).copy()
        else:
            r = np.asarray(tr.rewards, dtype=float)
            v_next = np.append(v[1:], 0.0)
            delta = r + gamma * v_next - v
            adv = np.zeros_like(delta)
            acc = 0.0
            for t in range(delta.size - 1, -1, -1):
                acc = delta[t] + gamma * gae_lambda * acc
                adv[t] = acc
            tgt = adv + v
        advs.append(adv)
        targets.append(tgt)
    return advs, targets


def gae_padded(rewards, values, lengths, gamma, gae_lambda):
    """GAE on padded (n, T) arrays; entries past each length are zero."""
    n, T = rewards.shape
    mask = np.arange(T)[None, :] < lengths[:, None]
    v = np.where(mask, values, 0.0)
    v_next = np.zeros_like(v)
    v_next[:, :-1] = v[:, 1:]
    delta = np.where(mask, rewards + gamma * v_next - v, 0.0)
    adv = np.zeros_like(delta)
    acc = np.zeros(n)
    for t in range(T - 1, -1, -1):
        acc = delta[:, t] + gamma * gae_lambda * acc
        adv[:, t] = acc
    return adv


def _vector_of(params):
    if isinstance(params, PolicyParams):
        return params.theta
    if isinstance(params, ValueParams):
        return params.upsilon
    return np.asarray(params, dtype=float)


def apply_gradient(params, opt_state: OptimizerState, grad, ascent: bool = True):
    """One SGD or Adam step; returns a new object of the same type as ``params``."""
    vec = _vector_of(params)
    grad = np.asarray(grad, dtype=float).reshape(-1)
    if grad.shape != vec.shape:
        raise InvalidInputError(f"gradient shape {grad.shape} differs from parameters {vec.shape}")
    sign = 1.0 if ascent else -1.0
    if opt_state.kind == "sgd":
        new = vec + sign * opt_state.learning_rate * grad
    else:
        if opt_state.m is None:
            opt_state.m = np.zeros_like(vec)
            opt_state.v = np.zeros_like(vec)
        if opt_state.m.shape != vec.shape:
            raise InvalidInputError("Adam moments do not match parameter dimension")
        opt_state.t += 1
        b1, b2 = opt_state.beta1, opt_state.beta2
        opt_state.m = b1 * opt_state.m + (1 - b1) * grad
        opt_state.v = b2 * opt_state.v + (1 - b2) * grad * grad
        m_hat = opt_state.m / (1 - b1**opt_state.t)
        v_hat = opt_state.v / (1 - b2**opt_state.t)
        new = vec + sign * opt_state.learning_rate * m_hat / (np.sqrt(v_hat) + opt_state.eps)
    if isinstance(params, PolicyParams):
        return PolicyParams(new, params.n_states, params.n_actions)
    if isinstance(params, ValueParams):
        return ValueParams(new)
    return new


def fit_value_sequential(vparams: ValueParams, trajectories, lr: float) -> ValueParams:
    """One SGD step per trajectory on (1/T) sum_t (V(s_t) - R_t)^2, in batch order."""
    u = vparams.upsilon.copy()
    for tr in trajectories:
        s = np.asarray(tr.states)
        err = u[s] - np.asarray(tr.rewards_to_go, dtype=float)
        g = np.zeros_like(u)
        np.add.at(g, s, 2.0 * err / s.size)
        u -= lr * g
    return ValueParams(u)


PARAMS_MAGIC = "varpg-params v1"


def save_params(path, params: PolicyParams | ValueParams):
    """Text checkpoint: magic line, ``states``/``actions`` header, one value per line."""
    if isinstance(params, PolicyParams):
        S, A, vec = params.n_states, params.n_actions, params.theta
    else:
        S, A, vec = params.upsilon.size, 0, params.upsilon
    lines = [PARAMS_MAGIC, f"states {S}", f"actions {A}"] + [repr(float(x)) for x in vec]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != PARAMS_MAGIC:
        raise InvalidInputError(f"{path}: not a parameter checkpoint")
    try:
        S = int(lines[1].split()[1])
        A = int(lines[2].split()[1])
        vec = np.array([float(x) for x in lines[3:]])
    except (IndexError, ValueError) as exc:
        raise InvalidInputError(f"{path}: malformed checkpoint ({exc})") from None
    if A == 0:
        if vec.size != S:
            raise InvalidInputError(f"{path}: expected {S} values, found {vec.size}")
        return ValueParams(vec)
    return PolicyParams(vec, S, A)
