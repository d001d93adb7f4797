"""Parameterized stochastic policies and importance weights.

Every policy exposes the same small protocol used by the samplers, the
estimators and the gradient code:

``probs_at(t, states, history)``
    action distributions for a vector of states at time ``t``.
``step_log_probs(batch)``
    ``(k, L+1)`` log-probabilities of the taken actions, zero on padding.
``weighted_score_sum(batch, weights)``
    ``sum_j sum_t weights[j, t] * d/dtheta log pi(A_t | S_t)``.
"""
from __future__ import annotations

import json
from typing import Mapping

import numpy as np

from .errors import SupportError
from .mdp import Trajectory, TrajectoryBatch


def _softmax(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = np.max(theta, axis=-1, keepdims=True)
    z = np.exp(theta - m)
    total = z.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        logp = theta - m - np.log(total)
    return z / total, logp


def _as_batch(traj) -> TrajectoryBatch:
    return traj.to_batch() if isinstance(traj, Trajectory) else traj


class SoftmaxPolicy:
    """Tabular softmax policy, ``pi(a|s) = exp(theta[s, a]) / sum_b exp(theta[s, b])``.

    Logits may be ``-inf`` to give an action exactly zero probability.
    Instances are immutable; ``with_params`` returns a new policy.
    """

    kind = "softmax"

    def __init__(self, theta):
        theta = np.array(theta, dtype=float)
        if theta.ndim != 2:
            raise ValueError("theta must have shape (num_states, num_actions)")
        if np.any(np.isnan(theta)) or np.any(theta == np.inf) or np.any(np.all(np.isneginf(theta), axis=1)):
            raise ValueError("theta rows need at least one finite logit and no NaN/+inf")
        theta.setflags(write=False)
        self._theta = theta
        self.probs, self.log_probs = _softmax(theta)

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "SoftmaxPolicy":
        return cls(np.zeros((num_states, num_actions)))

    @property
    def params(self) -> np.ndarray:
        return self._theta

    @property
    def num_states(self) -> int:
        return self._theta.shape[0]

    @property
    def num_actions(self) -> int:
        return self._theta.shape[1]

    def with_params(self, theta) -> "SoftmaxPolicy":
        return SoftmaxPolicy(theta)

    def with_action_probability(self, state: int, action: int, p: float) -> "SoftmaxPolicy":
        """Set ``pi(action|state) = p``, rescaling the other actions proportionally."""
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {p}")
        probs = self.probs[state].copy()
        others = np.arange(self.num_actions) != action
        rest = probs[others].sum()
        probs[others] = probs[others] / rest * (1.0 - p) if rest > 0 else (1.0 - p) / others.sum()
        probs[action] = p
        theta = self._theta.copy()
        with np.errstate(divide="ignore"):
            theta[state] = np.log(probs)
        return SoftmaxPolicy(theta)

    def action_probabilities(self, state: int) -> np.ndarray:
        return self.probs[state]

    def probs_at(self, t, states, history=None) -> np.ndarray:
        return self.probs[states]

    def table_at(self, t: int) -> np.ndarray:
        return self.probs

    def score(self, state: int, action: int) -> np.ndarray:
        g = np.zeros_like(self._theta)
        g[state] = -self.probs[state]
        g[state, action] += 1.0
        return g

    def step_log_probs(self, batch) -> np.ndarray:
        batch = _as_batch(batch)
        lp = self.log_probs[batch.states[:, :-1], batch.actions]
        return np.where(batch.mask, lp, 0.0)

    def weighted_score_sum(self, batch, weights: np.ndarray) -> np.ndarray:
        batch = _as_batch(batch)
        S, A = self._theta.shape
        mask = batch.mask
        s = batch.states[:, :-1][mask]
        a = batch.actions[mask]
        w = np.asarray(weights, dtype=float)[mask]
        grad = np.bincount(s * A + a, weights=w, minlength=S * A).reshape(S, A)
        grad -= np.bincount(s, weights=w, minlength=S)[:, None] * self.probs
        return grad

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "shape": list(self._theta.shape),
                           "params": self._theta.ravel().tolist()})


class GaussianPolicy:
    """Linear-feature Gaussian policy with state-independent diagonal covariance.

    ``a ~ N(W phi(s), diag(exp(log_std))^2)`` with ``phi(s) = [s, 1]``.
    Parameters flatten to ``concat(W.ravel(), log_std)``.
    """

    kind = "gaussian"

    def __init__(self, mean_weights, log_std):
        W = np.array(mean_weights, dtype=float)
        log_std = np.array(log_std, dtype=float).ravel()
        if W.ndim != 2 or W.shape[0] != log_std.size:
            raise ValueError("mean_weights must be (action_dim, feature_dim) matching log_std")
        W.setflags(write=False)
        log_std.setflags(write=False)
        self.mean_weights = W
        self.log_std = log_std

    @staticmethod
    def features(states: np.ndarray) -> np.ndarray:
        states = np.atleast_1d(np.asarray(states, dtype=float))
        if states.ndim == 1:
            states = states[:, None]
        return np.concatenate([states, np.ones(states.shape[:-1] + (1,))], axis=-1)

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.mean_weights.ravel(), self.log_std])

    @property
    def action_dim(self) -> int:
        return self.log_std.size

    def with_params(self, flat) -> "GaussianPolicy":
        flat = np.asarray(flat, dtype=float)
        n = self.mean_weights.size
        return GaussianPolicy(flat[:n].reshape(self.mean_weights.shape), flat[n:])

    def mean(self, states) -> np.ndarray:
        return self.features(states) @ self.mean_weights.T

    def sample(self, states, normals: np.ndarray) -> np.ndarray:
        return self.mean(states) + np.exp(self.log_std) * normals

    def log_density(self, states, actions) -> np.ndarray:
        z = (np.asarray(actions, dtype=float) - self.mean(states)) / np.exp(self.log_std)
        return np.sum(-0.5 * z**2 - self.log_std - 0.5 * np.log(2 * np.pi), axis=-1)

    def _score_parts(self, states, actions):
        sigma2 = np.exp(2 * self.log_std)
        diff = np.asarray(actions, dtype=float) - self.mean(states)
        return self.features(states), diff / sigma2, diff**2 / sigma2 - 1.0

    def score(self, state, action) -> np.ndarray:
        phi, dmean, dlogstd = self._score_parts(np.atleast_2d(state), np.atleast_2d(action))
        return np.concatenate([np.outer(dmean[0], phi[0]).ravel(), dlogstd[0]])

    def step_log_probs(self, batch) -> np.ndarray:
        batch = _as_batch(batch)
        k, T = batch.rewards.shape
        lp = self.log_density(batch.states[:, :-1].reshape(k * T, -1),
                              batch.actions.reshape(k * T, -1)).reshape(k, T)
        return np.where(batch.mask, lp, 0.0)

    def weighted_score_sum(self, batch, weights: np.ndarray) -> np.ndarray:
        batch = _as_batch(batch)
        mask = batch.mask
        w = np.asarray(weights, dtype=float)[mask]
        phi, dmean, dlogstd = self._score_parts(batch.states[:, :-1][mask], batch.actions[mask])
        gW = np.einsum("n,ni,nj->ij", w, dmean, phi)
        return np.concatenate([gW.ravel(), w @ dlogstd])

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "shape": list(self.mean_weights.shape),
                           "params": self.params.tolist()})


class TimeDependentPolicy:
    """Markov policy whose action table changes with the time step: ``table[t, s, a]``."""

    kind = "time_dependent"
    params = None

    def __init__(self, table):
        table = np.array(table, dtype=float)
        if table.ndim != 3 or np.max(np.abs(table.sum(-1) - 1.0)) > 1e-12 or np.any(table < 0):
            raise ValueError("table must be (L+1, S, A) with rows summing to one")
        table.setflags(write=False)
        self.table = table

    def probs_at(self, t, states, history=None) -> np.ndarray:
        return self.table[t, states]

    def table_at(self, t: int) -> np.ndarray:
        return self.table[t]

    def step_log_probs(self, batch) -> np.ndarray:
        batch = _as_batch(batch)
        T = batch.rewards.shape[1]
        with np.errstate(divide="ignore"):
            lp = np.log(self.table[np.arange(T)[None, :], batch.states[:, :-1], batch.actions])
        return np.where(batch.mask, lp, 0.0)


class HistoryPolicy:
    """Policy conditioned on the sequence of previous actions.

    In a deterministic MDP the action prefix fixes the whole history, so this
    represents any mixture of time-dependent deterministic policies.
    ``conditionals`` maps an action-prefix tuple to a distribution over
    actions; unseen prefixes fall back to ``default``.
    """

    kind = "history"
    params = None

    def __init__(self, conditionals: Mapping[tuple, np.ndarray], default: np.ndarray):
        self.conditionals = {tuple(k): np.asarray(v, dtype=float) for k, v in conditionals.items()}
        self.default = np.asarray(default, dtype=float)

    def distribution(self, prefix) -> np.ndarray:
        return self.conditionals.get(tuple(int(a) for a in prefix), self.default)

    def probs_at(self, t, states, history) -> np.ndarray:
        return np.stack([self.distribution(h) for h in np.asarray(history).reshape(len(states), t)])

    def step_log_probs(self, batch) -> np.ndarray:
        batch = _as_batch(batch)
        out = np.zeros(batch.rewards.shape)
        for j in range(len(batch)):
            acts = batch.actions[j]
            for t in range(int(batch.lengths[j])):
                with np.errstate(divide="ignore"):
                    out[j, t] = np.log(self.distribution(acts[:t])[acts[t]])
        return out


def policy_from_json(text: str):
    d = json.loads(text)
    flat = np.array(d["params"], dtype=float)
    if d["kind"] == "softmax":
        return SoftmaxPolicy(flat.reshape(d["shape"]))
    if d["kind"] == "gaussian":
        rows, cols = d["shape"]
        return GaussianPolicy(flat[: rows * cols].reshape(rows, cols), flat[rows * cols :])
    raise ValueError(f"unknown policy kind {d['kind']!r}")


def trajectory_weight(policy, traj) -> float:
    """``w_pi(H)``: product of action probabilities over the effective length."""
    return float(np.exp(policy.step_log_probs(traj).sum()))


def step_log_ratios(batch, eval_policy, behavior_policy) -> np.ndarray:
    """Per-step ``log pi_e(A_t|S_t) - log pi_b(A_t|S_t)``, zero on padding.

    Raises :class:`SupportError` when the behavior policy gives an observed
    action zero probability.
    """
    batch = _as_batch(batch)
    lb = behavior_policy.step_log_probs(batch)
    if np.any(np.isneginf(lb)):
        raise SupportError("behavior policy assigns zero probability to an observed action")
    le = eval_policy.step_log_probs(batch)
    return le - lb


def cumulative_ratios(batch, eval_policy, behavior_policy) -> np.ndarray:
    """``w_{pi_e,t} / w_{pi_b,t}`` for every ``t``, computed in log space."""
    return np.exp(np.cumsum(step_log_ratios(batch, eval_policy, behavior_policy), axis=1))


def importance_weight(traj, eval_policy, behavior_policy, upto_t: int | None = None) -> float:
    lr = step_log_ratios(traj, eval_policy, behavior_policy)[0]
    if upto_t is not None:
        lr = lr[: upto_t + 1]
    return float(np.exp(lr.sum()))
