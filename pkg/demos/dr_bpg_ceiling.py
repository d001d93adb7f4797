"""How much can a behavior policy help once a good model is in place?

Runs exact gradient descent on the DR second moment over behavior logits,
with the true model as control variate. The remaining variance is mostly
transition noise, which reweighting actions cannot remove, so the gain over
the on-policy advantage-sum estimator stays small. Run with
``python3 demos/dr_bpg_ceiling.py``.
"""
from bps_lab.fixtures import load_policy
from bps_lab.mdp import make_gridworld
from bps_lab.model import true_model
from bps_lab.oracles import dr_moments_dp, dr_second_moment_gradient_dp, dr_variance_dp


def main(steps=300):
    mdp = make_gridworld("stoch6x6")
    pe = load_policy("stoch6x6_pi1")
    model = true_model(mdp, pe)
    pb = pe
    v_ase = dr_variance_dp(mdp, pe, pe, model)
    for i in range(steps + 1):
        if i % 50 == 0:
            v = dr_variance_dp(mdp, pb, pe, model)
            print(f"step {i:4d}: DR variance {v:.4f} ({(v_ase - v) / v_ase:6.2%} below advantage sum)")
        g = dr_second_moment_gradient_dp(mdp, pb, pe, model)
        # normalised step with backtracking keeps the descent monotone
        step = 0.5
        m2 = dr_moments_dp(mdp, pb, pe, model)[1]
        while step > 1e-8:
            cand = pb.with_params(pb.params - step * g / max(abs(g).max(), 1e-12))
            if dr_moments_dp(mdp, cand, pe, model)[1] < m2:
                pb = cand
                break
            step /= 2


if __name__ == "__main__":
    main()
