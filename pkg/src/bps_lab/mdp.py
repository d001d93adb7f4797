"""Finite-horizon tabular MDPs, trajectory containers and exact evaluation.

States are integer indices. Gridworld cells use ``(col, row)`` coordinates
with ``(0, 0)`` in the top-left corner and ``index = row * width + col``.
Every trajectory is padded to ``horizon + 1`` steps: once a terminal state is
entered the agent stays there, takes no further actions and collects zero
reward, so fixed-length sums over ``t = 0..L`` are always valid.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import CapacityError

UP, RIGHT, DOWN, LEFT = 0, 1, 2, 3
ACTION_NAMES = ("UP", "RIGHT", "DOWN", "LEFT")
_MOVES = {UP: (0, -1), RIGHT: (1, 0), DOWN: (0, 1), LEFT: (-1, 0)}
# Perpendicular slips: (left of intended, right of intended).
_SLIPS = {UP: (LEFT, RIGHT), RIGHT: (UP, DOWN), DOWN: (RIGHT, LEFT), LEFT: (DOWN, UP)}


def derive_seed(root: int, *keys: int) -> int:
    """Counter-style seed for the stream identified by ``(root, *keys)``."""
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def derive_rng(root: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in keys)))


def inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise categorical draws from uniforms ``u`` in [0, 1)."""
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


@dataclass
class Trajectory:
    """One padded episode ``S_0, A_0, R_0, ..., S_L, A_L, R_L`` plus ``S_{L+1}``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    effective_length: int
    behavior_params: np.ndarray | None = None
    discount: float = 1.0

    @property
    def horizon(self) -> int:
        return len(self.rewards) - 1

    def to_batch(self) -> "TrajectoryBatch":
        return TrajectoryBatch(
            states=self.states[None],
            actions=self.actions[None],
            rewards=self.rewards[None],
            lengths=np.array([self.effective_length]),
            behavior_params=self.behavior_params,
            discount=self.discount,
        )


@dataclass
class TrajectoryBatch:
    """``k`` trajectories sampled from a single behavior policy.

    Arrays are indexed ``[trajectory, time]``; ``states`` has one extra column
    holding ``S_{L+1}``. Continuous domains add a trailing feature axis.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    lengths: np.ndarray
    behavior_params: np.ndarray | None = None
    discount: float = 1.0

    def __len__(self) -> int:
        return self.rewards.shape[0]

    def __getitem__(self, j: int) -> Trajectory:
        return Trajectory(
            states=self.states[j],
            actions=self.actions[j],
            rewards=self.rewards[j],
            effective_length=int(self.lengths[j]),
            behavior_params=self.behavior_params,
            discount=self.discount,
        )

    def __iter__(self) -> Iterator[Trajectory]:
        return (self[j] for j in range(len(self)))

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1] - 1

    @property
    def mask(self) -> np.ndarray:
        """Boolean ``(k, L+1)``; True where an action was actually taken."""
        return np.arange(self.rewards.shape[1])[None, :] < self.lengths[:, None]

    @property
    def discounts(self) -> np.ndarray:
        return self.discount ** np.arange(self.rewards.shape[1], dtype=float)

    def returns(self) -> np.ndarray:
        return self.rewards @ self.discounts

    def take(self, idx) -> "TrajectoryBatch":
        return TrajectoryBatch(self.states[idx], self.actions[idx], self.rewards[idx], self.lengths[idx],
                               self.behavior_params, self.discount)

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory]) -> "TrajectoryBatch":
        first = trajs[0]
        return cls(
            states=np.stack([t.states for t in trajs]),
            actions=np.stack([t.actions for t in trajs]),
            rewards=np.stack([t.rewards for t in trajs]),
            lengths=np.array([t.effective_length for t in trajs]),
            behavior_params=first.behavior_params,
            discount=first.discount,
        )


def discounted_return(traj: Trajectory, discount: float) -> float:
    if not 0.0 <= discount <= 1.0:
        raise ValueError(f"discount must lie in [0, 1], got {discount}")
    n = traj.effective_length
    return float(np.dot(traj.rewards[:n], discount ** np.arange(n, dtype=float)))


@dataclass(eq=False)
class TabularMDP:
    """Finite MDP with dense ``(S, A, S)`` transition and reward tensors."""

    transition: np.ndarray
    reward: np.ndarray
    start_state: int
    horizon: int
    discount: float = 1.0
    terminal_states: frozenset[int] = frozenset()
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        self.terminal_states = frozenset(int(s) for s in self.terminal_states)
        S, A, S2 = self.transition.shape
        if S != S2 or self.reward.shape != self.transition.shape:
            raise ValueError("transition and reward must both have shape (S, A, S)")
        if np.any(self.transition < 0) or np.max(np.abs(self.transition.sum(-1) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be probability distributions")
        if self.horizon < 0:
            raise ValueError("horizon must be finite and non-negative")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        if not 0 <= self.start_state < S or self.start_state in self.terminal_states:
            raise ValueError("start state must be a valid non-terminal state")
        for s in self.terminal_states:
            if not np.all(self.transition[s, :, s] == 1.0) or np.any(self.reward[s] != 0.0):
                raise ValueError(f"terminal state {s} must self-loop with zero reward")

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def terminal_mask(self) -> np.ndarray:
        m = np.zeros(self.num_states, dtype=bool)
        m[list(self.terminal_states)] = True
        return m

    @property
    def expected_reward(self) -> np.ndarray:
        """``r(s, a) = sum_s' P(s'|s,a) R(s,a,s')``."""
        return np.einsum("ijk,ijk->ij", self.transition, self.reward)

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all((self.transition == 0.0) | (self.transition == 1.0)))

    def sample_batch(self, policy, k: int, rng: np.random.Generator) -> TrajectoryBatch:
        """Roll out ``k`` episodes under ``policy``.

        All uniforms for trajectory ``j`` come from row ``j`` of one draw, so
        a batch is a deterministic function of the generator state.
        """
        T = self.horizon + 1
        u = rng.random((k, 2, T))
        term = self.terminal_mask
        states = np.empty((k, T + 1), dtype=np.int64)
        actions = np.zeros((k, T), dtype=np.int64)
        rewards = np.zeros((k, T))
        lengths = np.zeros(k, dtype=np.int64)
        states[:, 0] = self.start_state
        alive = np.ones(k, dtype=bool)
        for t in range(T):
            states[:, t + 1] = states[:, t]
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                states[:, t + 1 :] = states[:, t : t + 1]
                break
            s = states[idx, t]
            a = inverse_cdf(policy.probs_at(t, s, actions[idx, :t]), u[idx, 0, t])
            s2 = inverse_cdf(self.transition[s, a], u[idx, 1, t])
            actions[idx, t] = a
            rewards[idx, t] = self.reward[s, a, s2]
            states[idx, t + 1] = s2
            lengths[idx] += 1
            alive[idx] = ~term[s2]
        return TrajectoryBatch(states, actions, rewards, lengths, _params_of(policy), self.discount)

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "num_states": self.num_states,
                "num_actions": self.num_actions,
                "transition": self.transition.tolist(),
                "reward": self.reward.tolist(),
                "start_state": self.start_state,
                "terminal_states": sorted(self.terminal_states),
                "horizon": self.horizon,
                "discount": self.discount,
                "meta": self.meta,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "TabularMDP":
        d = json.loads(text)
        return cls(
            transition=np.array(d["transition"]),
            reward=np.array(d["reward"]),
            start_state=d["start_state"],
            horizon=d["horizon"],
            discount=d["discount"],
            terminal_states=frozenset(d["terminal_states"]),
            name=d.get("name", ""),
            meta=d.get("meta", {}),
        )


def _params_of(policy):
    params = getattr(policy, "params", None)
    return None if params is None else np.array(params, copy=True)


def sample_trajectory(mdp: TabularMDP, policy, rng: np.random.Generator) -> Trajectory:
    return mdp.sample_batch(policy, 1, rng)[0]


# ---------------------------------------------------------------------------
# Gridworlds
# ---------------------------------------------------------------------------


def _grid_mdp(size, cell_rewards, terminal, slip, horizon, name):
    S = size * size
    index = lambda c, r: r * size + c  # noqa: E731
    reward_of = np.full(S, -1.0)
    for (c, r), value in cell_rewards.items():
        reward_of[index(c, r)] = value
    P = np.zeros((S, 4, S))
    R = np.zeros((S, 4, S))
    term = index(*terminal)
    for r in range(size):
        for c in range(size):
            s = index(c, r)
            if s == term:
                P[s, :, s] = 1.0
                continue
            for a in range(4):
                outcomes = [(a, 1.0 - slip)] + [(b, slip / 2) for b in _SLIPS[a]]
                for b, prob in outcomes:
                    if prob == 0.0:
                        continue
                    dc, dr = _MOVES[b]
                    nc, nr = c + dc, r + dr
                    s2 = index(nc, nr) if 0 <= nc < size and 0 <= nr < size else s
                    P[s, a, s2] += prob
                    # A wall bump is not an entry; it pays the plain step cost.
                    R[s, a, s2] = reward_of[s2] if s2 != s else -1.0
    return TabularMDP(P, R, start_state=index(0, 0), horizon=horizon, discount=1.0,
                      terminal_states=frozenset({term}), name=name,
                      meta={"grid_size": size})


def make_gridworld(variant: str, p: float | None = None, horizon: int = 100) -> TabularMDP:
    """Build one of the benchmark gridworlds.

    ``det4x4``: deterministic 4x4 grid; entering (3,3) terminates with +10,
    entering (1,1) gives -10, entering (1,3) gives +1, entering any other
    cell gives -1 and bumping into a wall (no movement) also gives -1.
    ``stoch10x10``: 10x10 grid with the same rewards, terminal +10 at (9,9)
    and +1 at (1,9); moves succeed with probability 0.9 and otherwise slip
    left or right of the intended direction with equal probability.
    ``stochNxN``: the stochastic layout on an NxN grid, terminal at
    (N-1,N-1) and +1 at (1,N-1).
    ``rare_event``: ``det4x4`` where UP in the start cell jumps to the
    terminal cell with reward +50. ``p`` is the probability the evaluation
    policy assigns to that action; it is recorded in ``meta`` and applied by
    :func:`bps_lab.policy.SoftmaxPolicy.with_action_probability`.
    """
    if variant == "det4x4":
        return _grid_mdp(4, {(3, 3): 10.0, (1, 1): -10.0, (1, 3): 1.0}, (3, 3), 0.0, horizon, "det4x4")
    if variant == "stoch10x10":
        return _grid_mdp(10, {(9, 9): 10.0, (1, 1): -10.0, (1, 9): 1.0}, (9, 9), 0.1, horizon, "stoch10x10")
    if variant.startswith("stoch") and "x" in variant:
        # Smaller stochastic layouts, same reward pattern scaled to the grid.
        n = int(variant[5:].split("x")[0])
        return _grid_mdp(n, {(n - 1, n - 1): 10.0, (1, 1): -10.0, (1, n - 1): 1.0}, (n - 1, n - 1), 0.1, horizon, variant)
    if variant == "rare_event":
        if p is None or not 0.0 <= p <= 1.0:
            raise ValueError(f"rare_event needs a probability p in [0, 1], got {p}")
        base = make_gridworld("det4x4", horizon=horizon)
        P, R = base.transition.copy(), base.reward.copy()
        s0 = base.start_state
        (term,) = base.terminal_states
        P[s0, UP] = 0.0
        P[s0, UP, term] = 1.0
        R[s0, UP] = 0.0
        R[s0, UP, term] = 50.0
        return TabularMDP(P, R, s0, horizon, 1.0, base.terminal_states, "rare_event",
                          {"grid_size": 4, "rare_event_p": p})
    raise ValueError(f"unknown gridworld variant {variant!r}")


def make_random_mdp(
    num_states: int,
    num_actions: int,
    horizon: int,
    rng: np.random.Generator,
    deterministic: bool = False,
    positive_rewards: bool = False,
    with_terminal: bool = False,
    discount: float = 1.0,
) -> TabularMDP:
    """Small random MDP used by the enumeration oracles."""
    S, A = num_states, num_actions
    if deterministic:
        P = np.zeros((S, A, S))
        nxt = rng.integers(0, S, size=(S, A))
        P[np.arange(S)[:, None], np.arange(A)[None, :], nxt] = 1.0
    else:
        P = rng.dirichlet(np.ones(S), size=(S, A))
    if positive_rewards:
        R = rng.uniform(0.5, 3.0, size=(S, A, S))
    else:
        R = rng.normal(size=(S, A, S))
    terminal = frozenset()
    if with_terminal and S > 1:
        t = S - 1
        P[t] = 0.0
        P[t, :, t] = 1.0
        R[t] = 0.0
        terminal = frozenset({t})
    P /= P.sum(-1, keepdims=True)
    return TabularMDP(P, R, start_state=0, horizon=horizon, discount=discount,
                      terminal_states=terminal, name="random")


def make_bandit(rewards: Sequence[float]) -> TabularMDP:
    """Single-state, single-step MDP with deterministic per-action rewards."""
    A = len(rewards)
    P = np.ones((1, A, 1))
    R = np.asarray(rewards, dtype=float).reshape(1, A, 1)
    return TabularMDP(P, R, start_state=0, horizon=0, name="bandit")


# ---------------------------------------------------------------------------
# Exact evaluation
# ---------------------------------------------------------------------------


def backward_values(
    transition: np.ndarray,
    reward: np.ndarray,
    terminal_mask: np.ndarray,
    policy_table: Callable[[int], np.ndarray],
    horizon: int,
    discount: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Time-indexed ``q[t, s, a]`` and ``v[t, s]`` for a Markov policy.

    ``v[L+1] = 0`` and values at terminal states are zero.
    """
    S, A, _ = transition.shape
    r = np.einsum("ijk,ijk->ij", transition, reward)
    q = np.zeros((horizon + 1, S, A))
    v = np.zeros((horizon + 2, S))
    for t in range(horizon, -1, -1):
        q[t] = r + discount * transition @ v[t + 1]
        q[t, terminal_mask] = 0.0
        v[t] = np.sum(policy_table(t) * q[t], axis=1)
    return q, v


def value_tables(mdp: TabularMDP, policy) -> tuple[np.ndarray, np.ndarray]:
    return backward_values(mdp.transition, mdp.reward, mdp.terminal_mask, policy.table_at,
                           mdp.horizon, mdp.discount)


def policy_value(mdp: TabularMDP, policy) -> float:
    """Exact expected return of ``policy`` from the start state."""
    _, v = value_tables(mdp, policy)
    return float(v[0, mdp.start_state])


@dataclass
class EnumeratedTrajectorySet:
    """Every trajectory with non-zero environment probability ``p(H)``.

    ``base_prob[j]`` excludes action probabilities, so the probability of
    trajectory ``j`` under a policy is ``base_prob[j] * w_pi(H_j)``.
    """

    batch: TrajectoryBatch
    base_prob: np.ndarray

    def __len__(self) -> int:
        return len(self.base_prob)

    @property
    def entries(self) -> list[tuple[Trajectory, float]]:
        return [(self.batch[j], float(self.base_prob[j])) for j in range(len(self))]

    def probabilities(self, policy) -> np.ndarray:
        return self.base_prob * np.exp(policy.step_log_probs(self.batch).sum(axis=1))

    def expectation(self, values: np.ndarray, policy) -> float:
        return float(np.dot(self.probabilities(policy), values))


def enumerate_trajectories(mdp: TabularMDP, max_paths: int = 1_000_000) -> EnumeratedTrajectorySet:
    T = mdp.horizon + 1
    term = mdp.terminal_mask
    # Each partial path: (states, actions, rewards, prob, alive)
    paths = [([mdp.start_state], [], [], 1.0)]
    done = []
    for t in range(T):
        nxt = []
        for states, actions, rewards, prob in paths:
            s = states[-1]
            for a in range(mdp.num_actions):
                for s2 in np.flatnonzero(mdp.transition[s, a] > 0):
                    item = (states + [int(s2)], actions + [a], rewards + [float(mdp.reward[s, a, s2])],
                            prob * float(mdp.transition[s, a, s2]))
                    (done if term[s2] else nxt).append(item)
            if len(nxt) + len(done) > max_paths:
                raise CapacityError(f"more than {max_paths} trajectories")
        paths = nxt
    done.extend(paths)
    n = len(done)
    states = np.empty((n, T + 1), dtype=np.int64)
    actions = np.zeros((n, T), dtype=np.int64)
    rewards = np.zeros((n, T))
    lengths = np.empty(n, dtype=np.int64)
    probs = np.empty(n)
    for j, (st, ac, rw, prob) in enumerate(done):
        m = len(ac)
        states[j, : m + 1] = st
        states[j, m + 1 :] = st[-1]
        actions[j, :m] = ac
        rewards[j, :m] = rw
        lengths[j] = m
        probs[j] = prob
    batch = TrajectoryBatch(states, actions, rewards, lengths, None, mdp.discount)
    return EnumeratedTrajectorySet(batch, probs)
