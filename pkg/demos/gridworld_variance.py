"""Watch BPG shrink the exact IS variance on the deterministic 4x4 gridworld.

The exact variance of each behavior policy comes from a dynamic program over
(state, time), so no probe sampling is needed. Run with
``python3 demos/gridworld_variance.py``.
"""
from bps_lab.bpg import BPGConfig, bpg_run
from bps_lab.fixtures import load_policy
from bps_lab.mdp import make_gridworld, policy_value
from bps_lab.oracles import is_variance_dp


def main():
    mdp = make_gridworld("det4x4")
    for name, alpha in (("det4x4_pi1", 1e-5), ("det4x4_pi2", 1e-3)):
        pe = load_policy(name)
        curve = {}

        def record(i, policy):
            if i % 50 == 0:
                curve[i] = is_variance_dp(mdp, policy, pe)

        run = bpg_run(mdp, pe, BPGConfig(step_size=alpha, batch_size=100, iterations=300, seed=7), callback=record)
        v0 = curve[0]
        print(f"{name}: rho = {policy_value(mdp, pe):.4f}, final estimate {run.estimate:.4f}")
        for i, v in curve.items():
            print(f"  iteration {i:4d}: variance {v:10.4f}  ({(v0 - v) / v0:6.1%} below on-policy)")


if __name__ == "__main__":
    main()
