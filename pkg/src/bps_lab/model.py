"""Maximum-likelihood tabular models and their value tables for ``pi_e``."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .mdp import TabularMDP, TrajectoryBatch, backward_values


@dataclass(frozen=True, eq=False)
class TabularModel:
    """Count-based MLE model plus time-indexed ``q_hat[t, s, a]`` / ``v_hat[t, s]``.

    Unvisited ``(s, a)`` pairs self-transition with zero reward. Terminal
    states are known to be absorbing and always have zero value.
    ``v_hat`` has ``L + 2`` rows; the last one is identically zero.
    """

    counts: np.ndarray
    reward_sums: np.ndarray
    terminal_mask: np.ndarray
    horizon: int
    discount: float
    q_hat: np.ndarray | None = None
    v_hat: np.ndarray | None = None
    fit_iteration: int = 0

    @property
    def num_states(self) -> int:
        return self.counts.shape[0]

    @property
    def num_actions(self) -> int:
        return self.counts.shape[1]

    @property
    def visits(self) -> np.ndarray:
        return self.counts.sum(-1)

    @property
    def transition(self) -> np.ndarray:
        S, A, _ = self.counts.shape
        n = self.visits
        P = np.zeros_like(self.counts)
        seen = n > 0
        P[seen] = self.counts[seen] / n[seen][:, None]
        s_idx, a_idx = np.nonzero(~seen)
        P[s_idx, a_idx, s_idx] = 1.0
        return P

    @property
    def reward(self) -> np.ndarray:
        """Mean observed reward per ``(s, a, s')``; zero where never observed."""
        R = np.zeros_like(self.reward_sums)
        seen = self.counts > 0
        R[seen] = self.reward_sums[seen] / self.counts[seen]
        return R

    @property
    def r_hat(self) -> np.ndarray:
        """Count-weighted mean reward per ``(s, a)``."""
        n = self.visits
        out = np.zeros(n.shape)
        seen = n > 0
        out[seen] = self.reward_sums.sum(-1)[seen] / n[seen]
        return out

    def updated(self, batches: Iterable[TrajectoryBatch], fit_iteration: int | None = None) -> "TabularModel":
        """New snapshot with extra trajectories counted in; value tables cleared."""
        counts = self.counts.copy()
        sums = self.reward_sums.copy()
        for batch in batches:
            _accumulate(batch, counts, sums)
        return replace(self, counts=counts, reward_sums=sums, q_hat=None, v_hat=None,
                       fit_iteration=self.fit_iteration if fit_iteration is None else fit_iteration)

    def with_q(self, q_hat: np.ndarray, eval_policy) -> "TabularModel":
        """Install arbitrary ``q_hat`` and the matching ``v_hat = E_{pi_e}[q_hat]``."""
        q = np.array(q_hat, dtype=float)
        q[:, self.terminal_mask] = 0.0
        v = np.zeros((self.horizon + 2, self.num_states))
        for t in range(self.horizon + 1):
            v[t] = np.sum(eval_policy.table_at(t) * q[t], axis=1)
        return replace(self, q_hat=q, v_hat=v)

    def to_json(self) -> str:
        d = {
            "counts": self.counts.tolist(),
            "reward_sums": self.reward_sums.tolist(),
            "terminal_states": np.flatnonzero(self.terminal_mask).tolist(),
            "horizon": self.horizon,
            "discount": self.discount,
            "fit_iteration": self.fit_iteration,
        }
        if self.q_hat is not None:
            d["q_hat"] = self.q_hat.tolist()
            d["v_hat"] = self.v_hat.tolist()
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "TabularModel":
        d = json.loads(text)
        counts = np.array(d["counts"], dtype=float)
        term = np.zeros(counts.shape[0], dtype=bool)
        term[d["terminal_states"]] = True
        return cls(
            counts=counts,
            reward_sums=np.array(d["reward_sums"], dtype=float),
            terminal_mask=term,
            horizon=d["horizon"],
            discount=d["discount"],
            q_hat=np.array(d["q_hat"]) if "q_hat" in d else None,
            v_hat=np.array(d["v_hat"]) if "v_hat" in d else None,
            fit_iteration=d["fit_iteration"],
        )


def _accumulate(batch: TrajectoryBatch, counts: np.ndarray, sums: np.ndarray) -> None:
    mask = batch.mask
    s = batch.states[:, :-1][mask]
    a = batch.actions[mask]
    s2 = batch.states[:, 1:][mask]
    r = batch.rewards[mask]
    np.add.at(counts, (s, a, s2), 1.0)
    np.add.at(sums, (s, a, s2), r)


def empty_model(mdp: TabularMDP) -> TabularModel:
    S, A = mdp.num_states, mdp.num_actions
    return TabularModel(np.zeros((S, A, S)), np.zeros((S, A, S)), mdp.terminal_mask,
                        mdp.horizon, mdp.discount)


def fit_tabular_model(trajectories: Iterable[TrajectoryBatch], mdp: TabularMDP,
                      fit_iteration: int = 0) -> TabularModel:
    """MLE counts and rewards over a known state/action space.

    ``mdp`` supplies only the structural facts (sizes, terminal set, horizon
    and discount); its dynamics are not consulted.
    """
    return empty_model(mdp).updated(trajectories, fit_iteration)


def compute_value_tables(model: TabularModel, eval_policy, discount: float | None = None,
                         horizon: int | None = None) -> TabularModel:
    """Backward recursion for ``q_hat``/``v_hat`` of ``eval_policy`` in the model."""
    discount = model.discount if discount is None else discount
    horizon = model.horizon if horizon is None else horizon
    q, v = backward_values(model.transition, model.reward, model.terminal_mask,
                           eval_policy.table_at, horizon, discount)
    return replace(model, q_hat=q, v_hat=v, discount=discount, horizon=horizon)


def zero_model(mdp: TabularMDP) -> TabularModel:
    """Model whose value tables are identically zero (no control variate)."""
    S, A, L = mdp.num_states, mdp.num_actions, mdp.horizon
    return replace(empty_model(mdp), q_hat=np.zeros((L + 1, S, A)), v_hat=np.zeros((L + 2, S)))


def true_model(mdp: TabularMDP, eval_policy) -> TabularModel:
    """Value tables computed from the real dynamics (a perfect model)."""
    q, v = backward_values(mdp.transition, mdp.reward, mdp.terminal_mask, eval_policy.table_at,
                           mdp.horizon, mdp.discount)
    return replace(empty_model(mdp), q_hat=q, v_hat=v)


def max_transition_error(model: TabularModel, mdp: TabularMDP) -> float:
    """Largest absolute MLE transition error over visited, non-terminal pairs."""
    seen = (model.visits > 0) & ~mdp.terminal_mask[:, None]
    if not seen.any():
        return float("nan")
    return float(np.max(np.abs(model.transition - mdp.transition)[seen]))
