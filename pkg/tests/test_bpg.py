import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bps_lab.bpg import (
    BPGConfig,
    bpg_run,
    dr_bpg_run,
    dr_mse_gradient,
    is_mse_gradient,
    optimal_behavior_policy,
    reinforce_run,
    select_evaluation_policies,
    uncentered_second_moment,
)
from bps_lab.continuous import PointMass
from bps_lab.errors import PreconditionError
from bps_lab.estimators import ase_values, dr_values, is_values
from bps_lab.fixtures import load_policy, load_reference_values, regenerate
from bps_lab.mdp import (
    TabularMDP,
    derive_seed,
    enumerate_trajectories,
    make_bandit,
    make_gridworld,
    make_random_mdp,
    policy_value,
)
from bps_lab.model import fit_tabular_model, max_transition_error, true_model, zero_model
from bps_lab.oracles import (
    exact_dr_gradient,
    exact_is_gradient,
    exact_is_variance,
    exact_mse_fd_gradient,
    relative_error,
)
from bps_lab.policy import GaussianPolicy, SoftmaxPolicy, cumulative_ratios


def deterministic_chain(rewards, L=2):
    """One state, ``len(rewards)`` actions, deterministic self-loop, positive rewards."""
    A = len(rewards)
    P = np.ones((1, A, 1))
    R = np.asarray(rewards, dtype=float).reshape(1, A, 1)
    return TabularMDP(P, R, 0, L)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"batch_size": 0}, {"iterations": 0}, {"step_size": -1.0},
                                    {"estimator": "WIS"}, {"model_mode": "never"},
                                    {"step_size": [1e-3, 1e-3], "iterations": 3}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            BPGConfig(**kw)

    def test_schedule(self):
        c = BPGConfig(step_size=[1.0, 2.0, 3.0], iterations=3)
        assert [c.alpha(i) for i in range(3)] == [1.0, 2.0, 3.0]


class TestIsGradient:
    def test_single_trajectory_mdp_zero_gradient(self):
        m = deterministic_chain([2.0], L=2)
        pol = SoftmaxPolicy.uniform(1, 1)
        batch = m.sample_batch(pol, 3, np.random.default_rng(0))
        ge = is_mse_gradient(batch, pol, pol)
        np.testing.assert_array_equal(ge.gradient, 0.0)
        assert ge.batch_sq_moment == 36.0
        assert exact_is_variance(m, pol, pol) == pytest.approx(0.0, abs=1e-12)

    def test_bandit_closed_form(self):
        from bps_lab.experiments import bandit_p1_gradient

        assert abs(bandit_p1_gradient(0.5) - (-3.0)) < 1e-9
        p = 0.3
        assert bandit_p1_gradient(p) == pytest.approx(-1 / p**2 + 0.25 / (1 - p) ** 2, rel=1e-12)

    def test_exact_matches_fd(self):
        rng = np.random.default_rng(12)
        m = make_random_mdp(2, 2, 2, rng)
        pe, pb = SoftmaxPolicy(rng.normal(size=(2, 2))), SoftmaxPolicy(rng.normal(size=(2, 2)))
        assert relative_error(exact_is_gradient(m, pb, pe), exact_mse_fd_gradient(m, pb, pe)) < 1e-6

    def test_sample_mean_converges_to_exact(self):
        rng = np.random.default_rng(13)
        m = make_random_mdp(2, 2, 2, rng)
        pe, pb = SoftmaxPolicy(rng.normal(size=(2, 2))), SoftmaxPolicy(rng.normal(size=(2, 2)))
        batch = m.sample_batch(pb, 200_000, rng)
        ge = is_mse_gradient(batch, pb, pe)
        np.testing.assert_allclose(ge.gradient, exact_is_gradient(m, pb, pe), atol=0.05 * np.abs(ge.gradient).max())

    def test_empty_batch(self):
        m = make_bandit([2, 1])
        pol = SoftmaxPolicy.uniform(1, 2)
        with pytest.raises(ValueError):
            is_mse_gradient(m.sample_batch(pol, 1, np.random.default_rng(0)).take([]), pol, pol)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 10_000), b=st.floats(-100, 100))
    def test_baseline_neutral(self, seed, b):
        rng = np.random.default_rng(seed)
        m = make_random_mdp(2, 2, 2, rng, with_terminal=True)
        pe, pb = SoftmaxPolicy(rng.normal(size=(2, 2))), SoftmaxPolicy(rng.normal(size=(2, 2)))
        np.testing.assert_allclose(exact_is_gradient(m, pb, pe, baseline=b), exact_is_gradient(m, pb, pe),
                                   atol=1e-10)

    def test_gaussian_matches_loop(self):
        env = PointMass(horizon=5)
        rng = np.random.default_rng(0)
        pe = GaussianPolicy([[-1.0, 0.0]], [np.log(0.5)])
        pb = pe.with_params(pe.params + 0.1)
        batch = env.sample_batch(pb, 20, rng)
        ge = is_mse_gradient(batch, pb, pe, baseline=-3.0)
        isv = is_values(batch, pe, pb)
        expected = np.zeros_like(pb.params)
        for j, h in enumerate(batch):
            for t in range(h.effective_length):
                expected += (-(isv[j] ** 2) + 3.0) * pb.score(h.states[t], h.actions[t]) / len(batch)
        np.testing.assert_allclose(ge.gradient, expected, rtol=1e-10, atol=1e-12)


def pdis_gradient_loop(batch, pb, pe):
    """Independent per-trajectory form of the per-decision-IS variance gradient."""
    rho = cumulative_ratios(batch, pe, pb)
    g = np.zeros_like(pb.params)
    for j, h in enumerate(batch):
        n = h.effective_length
        scores = [pb.score(h.states[t], h.actions[t]) for t in range(n)]
        c = [batch.discounts[t] * rho[j, t] * h.rewards[t] for t in range(n)]
        pdis = sum(c)
        g += pdis**2 * sum(scores)
        for t in range(n):
            g -= 2 * pdis * c[t] * sum(scores[: t + 1])
    return g / len(batch)


class TestDrGradient:
    def test_zero_model_reduces_to_pdis(self, small_mdp):
        rng = np.random.default_rng(6)
        pe, pb = SoftmaxPolicy(rng.normal(size=(3, 2))), SoftmaxPolicy(rng.normal(size=(3, 2)))
        enum = enumerate_trajectories(small_mdp)
        ge = dr_mse_gradient(enum.batch, pb, pe, zero_model(small_mdp))
        np.testing.assert_allclose(ge.gradient, pdis_gradient_loop(enum.batch, pb, pe), atol=1e-9)

    def test_exact_model_deterministic_zero(self):
        rng = np.random.default_rng(7)
        m = make_random_mdp(3, 2, 3, rng, deterministic=True)
        pe = SoftmaxPolicy(rng.normal(size=(3, 2)))
        np.testing.assert_allclose(exact_dr_gradient(m, pe, pe, true_model(m, pe)), 0.0, atol=1e-9)

    def test_exact_matches_fd(self):
        rng = np.random.default_rng(8)
        m = make_random_mdp(2, 2, 2, rng, discount=0.9)
        pe, pb = SoftmaxPolicy(rng.normal(size=(2, 2))), SoftmaxPolicy(rng.normal(size=(2, 2)))
        model = true_model(m, pe)
        model = model.with_q(model.q_hat + rng.normal(size=model.q_hat.shape), pe)
        fd = exact_mse_fd_gradient(m, pb, pe, estimator="DR", model=model)
        assert relative_error(exact_dr_gradient(m, pb, pe, model), fd) < 1e-5


class TestBpgRun:
    def test_noop_update(self):
        m = make_gridworld("det4x4")
        pe = load_policy("det4x4_pi1")
        r = bpg_run(m, pe, BPGConfig(step_size=0.0, batch_size=1, iterations=1, seed=4, keep_dataset=True))
        np.testing.assert_array_equal(r.params, pe.params)
        (params, batch), = r.dataset.entries
        assert r.estimate == batch.returns()[0]

    def test_iteration_zero_is_monte_carlo(self):
        m = make_gridworld("det4x4")
        pe = load_policy("det4x4_pi1")
        cfg = BPGConfig(step_size=1e-5, batch_size=10, iterations=3, seed=9, keep_dataset=True)
        r = bpg_run(m, pe, cfg)
        first = m.sample_batch(pe, 10, np.random.default_rng(derive_seed(9, 0, 0)))
        assert r.series.records[0].estimate == pytest.approx(first.returns().mean(), abs=1e-12)
        np.testing.assert_array_equal(r.dataset.entries[0][0], pe.params)

    def test_dataset_records_each_theta(self):
        m = make_gridworld("det4x4")
        pe = load_policy("det4x4_pi1")
        r = bpg_run(m, pe, BPGConfig(step_size=1e-5, batch_size=5, iterations=4, keep_dataset=True))
        ids = [rec.theta_id for rec in r.series.records]
        assert len(set(ids)) == 4
        assert len(r.dataset) == 20

    def test_deterministic(self):
        m = make_gridworld("det4x4")
        pe = load_policy("det4x4_pi2")
        cfg = BPGConfig(step_size=1e-3, batch_size=5, iterations=5, seed=3)
        assert bpg_run(m, pe, cfg, trial=2).series.to_csv() == bpg_run(m, pe, cfg, trial=2).series.to_csv()

    def test_large_step_diverges(self):
        m = make_gridworld("det4x4")
        r = bpg_run(m, load_policy("det4x4_pi1"), BPGConfig(step_size=10.0, batch_size=100, iterations=250))
        assert r.diverged

    def test_sq_moment_guard(self):
        m = make_bandit([2, 1])
        pe = SoftmaxPolicy.uniform(1, 2)
        r = bpg_run(m, pe, BPGConfig(step_size=1.0, batch_size=2, iterations=50, divergence_factor=1.0 + 1e-9))
        assert r.diverged or np.all(r.series.sq_moments <= r.series.sq_moments[0] * (1 + 1e-9))

    def test_reduces_variance_det4x4(self):
        m = make_gridworld("det4x4")
        pe = load_policy("det4x4_pi1")
        from bps_lab.oracles import is_variance_dp

        r = bpg_run(m, pe, BPGConfig(step_size=1e-5, batch_size=100, iterations=100, seed=2))
        assert is_variance_dp(m, r.policy, pe) < is_variance_dp(m, pe, pe)

    def test_callback_sees_every_policy(self):
        m = make_gridworld("det4x4")
        seen = []
        bpg_run(m, load_policy("det4x4_pi1"), BPGConfig(step_size=1e-5, batch_size=2, iterations=3),
                callback=lambda i, p: seen.append(i))
        assert seen == [0, 1, 2, 3]

    def test_pointmass_runs(self):
        env = PointMass()
        pe = GaussianPolicy([[-1.0, 0.0]], [np.log(0.6)])
        r = bpg_run(env, pe, BPGConfig(step_size=1e-6, batch_size=50, iterations=5))
        assert r.status == "ok" and np.all(np.isfinite(r.params))


class TestDrBpgRun:
    def _setup(self):
        return make_gridworld("stoch6x6"), load_policy("stoch6x6_pi1")

    def test_fixed_warmup(self):
        m, pe = self._setup()
        cfg = BPGConfig(step_size=1e-5, batch_size=20, iterations=12, estimator="DR", seed=1, keep_dataset=True)
        r = dr_bpg_run(m, pe, cfg)
        ids = [rec.theta_id for rec in r.series.records]
        assert len(set(ids[:11])) == 1 and ids[11] != ids[0]
        # warm-up estimates are advantage sums with the zero model, i.e. Monte Carlo
        batches = [b for _, b in r.dataset.entries]
        for i in range(10):
            vals = np.concatenate([ase_values(b, zero_model(m)) for b in batches[: i + 1]])
            assert r.series.records[i].estimate == pytest.approx(vals.mean(), abs=1e-10)
        assert r.model.fit_iteration == 9
        np.testing.assert_array_equal(r.model.counts, fit_tabular_model(batches[:10], m).counts)

    def test_on_policy_arm_is_ase(self):
        m, pe = self._setup()
        cfg = BPGConfig(step_size=0.0, batch_size=20, iterations=15, estimator="DR", seed=1, keep_dataset=True)
        r = dr_bpg_run(m, pe, cfg)
        vals = np.concatenate([ase_values(b, r.model) for _, b in r.dataset.entries])
        assert r.estimate == pytest.approx(vals.mean(), abs=1e-9)

    def test_zero_model_equals_plain_bpg_when_single_step(self):
        m = make_bandit([2.0, 1.0])
        pe = SoftmaxPolicy.uniform(1, 2)
        base = dict(step_size=0.05, batch_size=4, iterations=20, seed=5, baseline=False)
        a = bpg_run(m, pe, BPGConfig(**base))
        b = dr_bpg_run(m, pe, BPGConfig(**base, estimator="DR", warmup=0))
        np.testing.assert_allclose(a.series.estimates, b.series.estimates, atol=1e-9)
        np.testing.assert_allclose(a.params, b.params, atol=1e-9)

    def test_update_mode_rescores_all_data(self):
        m, pe = self._setup()
        cfg = BPGConfig(step_size=1e-5, batch_size=20, iterations=8, estimator="DR", model_mode="update",
                        seed=2, keep_dataset=True)
        r = dr_bpg_run(m, pe, cfg)
        vals = np.concatenate([dr_values(b, pe, r.model, pe.with_params(p)) for p, b in r.dataset.entries])
        assert r.estimate == pytest.approx(vals.mean(), abs=1e-9)
        np.testing.assert_array_equal(r.model.counts, fit_tabular_model([b for _, b in r.dataset.entries], m).counts)

    def test_update_mode_model_error_shrinks(self):
        m, pe = self._setup()
        diffs = []
        for rep in range(20):
            errs = []
            cfg = BPGConfig(step_size=0.0, batch_size=20, iterations=6, estimator="DR", model_mode="update",
                            seed=rep, keep_dataset=True)
            r = dr_bpg_run(m, pe, cfg)
            batches = [b for _, b in r.dataset.entries]
            for i in (0, 5):
                errs.append(max_transition_error(fit_tabular_model(batches[: i + 1], m), m))
            diffs.append(errs[1] - errs[0])
        diffs = np.array(diffs)
        assert diffs.mean() <= 4 * diffs.std(ddof=1) / np.sqrt(20)
        assert r.model.fit_iteration == 5


class TestReinforce:
    def test_zero_step(self):
        m = make_gridworld("det4x4")
        pol = SoftmaxPolicy.uniform(16, 4)
        r = reinforce_run(m, pol, 0.0, 3, track_values=False)
        np.testing.assert_array_equal(r.policy.params, pol.params)

    def test_fixture_ordering(self):
        ref = load_reference_values()
        uniform = policy_value(make_gridworld("det4x4"), SoftmaxPolicy.uniform(16, 4))
        assert ref["det4x4_pi2"] >= ref["det4x4_pi1"] >= uniform

    @pytest.mark.slow
    def test_regenerates_fixtures(self):
        for name in ("det4x4_pi1", "det4x4_pi2"):
            np.testing.assert_array_equal(regenerate(name).params, load_policy(name).params)

    def test_selection_rule(self):
        class R:
            values = np.array([-10.0, -8.0, -5.0, -2.0] + [0.0] * 60)

        partial, conv = select_evaluation_policies(R(), window=50, tol=0.1)
        assert conv == 54 and partial == 2


class TestOptimalBehavior:
    def test_bandit(self):
        m = make_bandit([2, 1])
        pe = SoftmaxPolicy.uniform(1, 2)
        pb = optimal_behavior_policy(m, pe)
        np.testing.assert_allclose(pb.distribution(()), [2 / 3, 1 / 3], atol=1e-15)
        enum = enumerate_trajectories(m)
        np.testing.assert_allclose(is_values(enum.batch, pe, pb), 1.5, atol=1e-12)

    def test_constant_return_gives_eval_policy(self):
        m = deterministic_chain([1.0, 1.0], L=2)
        pe = SoftmaxPolicy([[0.3, -0.2]])
        pb = optimal_behavior_policy(m, pe)
        for prefix, dist in pb.conditionals.items():
            np.testing.assert_allclose(dist, pe.probs[0], atol=1e-12)

    def test_zero_variance(self):
        m = deterministic_chain([1.0, 3.0], L=2)
        pe = SoftmaxPolicy([[0.4, -0.1]])
        pb = optimal_behavior_policy(m, pe)
        enum = enumerate_trajectories(m)
        np.testing.assert_allclose(is_values(enum.batch, pe, pb), policy_value(m, pe), atol=1e-9)
        assert exact_is_variance(m, pb, pe) < 1e-12

    def test_beats_random_softmax(self):
        rng = np.random.default_rng(17)
        m = make_random_mdp(2, 2, 2, rng, deterministic=True, positive_rewards=True)
        pe = SoftmaxPolicy(rng.normal(size=(2, 2)))
        best = exact_is_variance(m, optimal_behavior_policy(m, pe), pe)
        assert abs(best) < 1e-12
        for _ in range(100):
            assert best <= exact_is_variance(m, SoftmaxPolicy(rng.normal(scale=2, size=(2, 2))), pe)

    def test_preconditions(self):
        rng = np.random.default_rng(0)
        with pytest.raises(PreconditionError):
            optimal_behavior_policy(make_random_mdp(2, 2, 1, rng), SoftmaxPolicy.uniform(2, 2))
        with pytest.raises(PreconditionError):
            optimal_behavior_policy(make_bandit([1.0, -1.0]), SoftmaxPolicy.uniform(1, 2))


class TestExactVariance:
    def test_bandit(self):
        assert exact_is_variance(make_bandit([2, 1]), SoftmaxPolicy.uniform(1, 2),
                                 SoftmaxPolicy.uniform(1, 2)) == pytest.approx(0.25, abs=1e-12)

    def test_fd_matches_score_gradient(self):
        rng = np.random.default_rng(30)
        m = make_random_mdp(3, 2, 3, rng, with_terminal=True)
        pe = SoftmaxPolicy(rng.normal(size=(3, 2)))
        for _ in range(5):
            pb = SoftmaxPolicy(rng.normal(size=(3, 2)))
            assert relative_error(exact_is_gradient(m, pb, pe), exact_mse_fd_gradient(m, pb, pe)) < 1e-6

    def test_monotone_exact_descent(self):
        rng = np.random.default_rng(31)
        m = make_random_mdp(2, 2, 2, rng)
        pe = SoftmaxPolicy(rng.normal(size=(2, 2)))
        enum = enumerate_trajectories(m)
        pb = pe
        v = [exact_is_variance(m, pb, pe, enum)]
        for _ in range(200):
            pb = pb.with_params(pb.params - 1e-3 * exact_is_gradient(m, pb, pe, enum=enum))
            v.append(exact_is_variance(m, pb, pe, enum))
        assert np.all(np.diff(v) <= 1e-12)


class TestSecondMoment:
    def test_constant(self):
        m = make_bandit([3.0, 3.0])
        pol = SoftmaxPolicy.uniform(1, 2)
        batch = m.sample_batch(pol, 10, np.random.default_rng(0))
        assert uncentered_second_moment(batch, pol, pol) == 9.0

    def test_on_policy(self):
        m = make_gridworld("det4x4")
        pol = load_policy("det4x4_pi1")
        batch = m.sample_batch(pol, 50, np.random.default_rng(0))
        assert uncentered_second_moment(batch, pol, pol) == pytest.approx(np.mean(batch.returns() ** 2))

    def test_converges_to_exact(self):
        from bps_lab.oracles import is_moments_dp

        m = make_gridworld("det4x4")
        pe = load_policy("det4x4_pi2")
        pb = pe.with_params(pe.params * 0.8)
        batch = m.sample_batch(pb, 10_000, np.random.default_rng(3))
        sq = is_values(batch, pe, pb) ** 2
        se = sq.std(ddof=1) / 100
        assert abs(uncentered_second_moment(batch, pb, pe) - is_moments_dp(m, pb, pe)[1]) < 4 * se

    def test_dr_form(self, small_mdp):
        pe = SoftmaxPolicy.uniform(3, 2)
        model = true_model(small_mdp, pe)
        batch = small_mdp.sample_batch(pe, 20, np.random.default_rng(0))
        assert uncentered_second_moment(batch, pe, pe, "DR", model) == pytest.approx(
            np.mean(dr_values(batch, pe, model) ** 2))
