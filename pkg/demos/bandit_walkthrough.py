"""Two-armed bandit: every quantity behind behavior policy search in closed form.

Rewards are 2 and 1 and the evaluation policy is uniform, so rho = 1.5.
Run with ``python3 demos/bandit_walkthrough.py``.
"""
import numpy as np

from bps_lab.bpg import BPGConfig, bpg_run, optimal_behavior_policy
from bps_lab.estimators import is_values
from bps_lab.experiments import bandit_p1_gradient
from bps_lab.mdp import enumerate_trajectories, make_bandit, policy_value
from bps_lab.oracles import exact_is_variance
from bps_lab.policy import SoftmaxPolicy


def main():
    mdp = make_bandit([2.0, 1.0])
    pe = SoftmaxPolicy.uniform(1, 2)
    print(f"value of the uniform policy: {policy_value(mdp, pe)}")
    print(f"on-policy IS variance: {exact_is_variance(mdp, pe, pe):.4f}  (closed form 0.25)")
    print(f"dE[IS^2]/dp1 at p1 = 0.5: {bandit_p1_gradient(0.5):.6f}  (closed form -3)")

    pb_star = optimal_behavior_policy(mdp, pe)
    enum = enumerate_trajectories(mdp)
    print(f"zero-variance behavior policy: {pb_star.distribution(())}")
    print(f"IS values under it: {is_values(enum.batch, pe, pb_star)}")

    cfg = BPGConfig(step_size=0.05, batch_size=20, iterations=200, seed=0)
    run = bpg_run(mdp, pe, cfg)
    p = run.policy.probs[0]
    print(f"BPG after {cfg.iterations} steps: pi_b = {np.round(p, 4)}, "
          f"variance {exact_is_variance(mdp, run.policy, pe):.2e}, estimate {run.estimate:.4f}")


if __name__ == "__main__":
    main()
