import numpy as np
import pytest

from bps_lab.mdp import make_random_mdp


@pytest.fixture
def small_mdp():
    """Stochastic 3-state, 2-action MDP with L=3 and a terminal state."""
    return make_random_mdp(3, 2, 3, np.random.default_rng(5), with_terminal=True, discount=0.9)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
