"""Frozen evaluation policies and the recipes that regenerate them.

The policies are REINFORCE snapshots taken from a uniform start. They ship as
JSON under ``bps_lab/data`` so tests and experiments never have to rerun the
optimisation; :func:`regenerate` rebuilds them from the recorded recipe.
"""
from __future__ import annotations

import json
from importlib import resources

from .bpg import reinforce_run, select_evaluation_policies
from .mdp import make_gridworld
from .policy import SoftmaxPolicy, policy_from_json

# name -> (gridworld variant, step size, iterations, batch size, seed, which snapshot)
RECIPES = {
    "det4x4_pi1": ("det4x4", 0.002, 2000, 10, 1, "partial"),
    "det4x4_pi2": ("det4x4", 0.002, 2000, 10, 1, "converged"),
    "stoch10x10_pi1": ("stoch10x10", 0.002, 2000, 10, 1, "partial"),
    "stoch10x10_pi2": ("stoch10x10", 0.002, 2000, 10, 1, "converged"),
    "stoch6x6_pi1": ("stoch6x6", 0.002, 2000, 10, 1, "partial"),
}


def fixture_names() -> list[str]:
    return sorted(RECIPES)


def load_policy(name: str) -> SoftmaxPolicy:
    """Load a frozen evaluation policy by name (see :data:`RECIPES`)."""
    if name not in RECIPES:
        raise KeyError(f"unknown policy fixture {name!r}; known: {fixture_names()}")
    text = resources.files("bps_lab").joinpath("data", f"{name}.json").read_text()
    return policy_from_json(text)


def load_reference_values() -> dict[str, float]:
    """DP values of the frozen policies, recorded when they were generated."""
    text = resources.files("bps_lab").joinpath("data", "reference_values.json").read_text()
    return json.loads(text)


def regenerate(name: str) -> SoftmaxPolicy:
    """Rerun the REINFORCE recipe behind fixture ``name``."""
    variant, lr, iters, k, seed, which = RECIPES[name]
    mdp = make_gridworld(variant)
    start = SoftmaxPolicy.uniform(mdp.num_states, mdp.num_actions)
    result = reinforce_run(mdp, start, lr, iters, batch_size=k, seed=seed)
    partial, conv = select_evaluation_policies(result)
    return SoftmaxPolicy(result.thetas[partial if which == "partial" else conv])
