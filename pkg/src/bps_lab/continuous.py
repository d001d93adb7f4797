"""A small continuous-state, continuous-action domain for Gaussian policies."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import TrajectoryBatch


@dataclass(frozen=True)
class PointMass:
    """One-dimensional point mass pushed toward the origin.

    ``x' = x + dt * a + noise``; each step pays ``-x'^2``. Leaving
    ``[-bound, bound]`` ends the episode with ``crash_penalty``, which plays
    the role of the rare, high-magnitude out-of-bounds event.
    """

    start: float = 1.0
    dt: float = 0.2
    noise_std: float = 0.05
    bound: float = 2.0
    crash_penalty: float = -100.0
    horizon: int = 20
    discount: float = 1.0
    name: str = "pointmass"

    def sample_batch(self, policy, k: int, rng: np.random.Generator) -> TrajectoryBatch:
        T = self.horizon + 1
        da = policy.action_dim
        z = rng.standard_normal((k, T, da + 1))
        states = np.empty((k, T + 1, 1))
        actions = np.zeros((k, T, da))
        rewards = np.zeros((k, T))
        lengths = np.zeros(k, dtype=np.int64)
        states[:, 0, 0] = self.start
        alive = np.ones(k, dtype=bool)
        for t in range(T):
            states[:, t + 1] = states[:, t]
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                break
            x = states[idx, t]
            a = policy.sample(x, z[idx, t, :da])
            x2 = x[:, 0] + self.dt * a[:, 0] + self.noise_std * z[idx, t, da]
            crashed = np.abs(x2) > self.bound
            actions[idx, t] = a
            rewards[idx, t] = np.where(crashed, self.crash_penalty, -(x2**2))
            states[idx, t + 1, 0] = x2
            lengths[idx] += 1
            alive[idx] = ~crashed
        return TrajectoryBatch(states, actions, rewards, lengths,
                               np.array(policy.params, copy=True), self.discount)

    def monte_carlo_value(self, policy, n: int = 1_000_000, seed: int = 0, chunk: int = 100_000) -> tuple[float, float]:
        """Reference value and its standard error from ``n`` roll-outs."""
        rng = np.random.default_rng(seed)
        total = total_sq = 0.0
        done = 0
        while done < n:
            m = min(chunk, n - done)
            g = self.sample_batch(policy, m, rng).returns()
            total += g.sum()
            total_sq += (g**2).sum()
            done += m
        mean = total / n
        var = max(total_sq / n - mean**2, 0.0)
        return float(mean), float(np.sqrt(var / n))
