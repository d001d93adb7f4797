import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bps_lab.errors import SupportError
from bps_lab.estimators import (
    CSV_HEADER,
    Dataset,
    EstimateRecord,
    EstimateSeries,
    ase_estimate,
    ase_values,
    dr_estimate,
    dr_estimate_dataset,
    dr_values,
    is_estimate,
    is_estimate_dataset,
    is_values,
    mc_estimate,
    theta_id,
)
from bps_lab.fixtures import load_policy
from bps_lab.mdp import (
    Trajectory,
    TrajectoryBatch,
    enumerate_trajectories,
    make_bandit,
    make_gridworld,
    make_random_mdp,
    policy_value,
)
from bps_lab.model import true_model, zero_model
from bps_lab.policy import SoftmaxPolicy, cumulative_ratios


def batch_with_returns(returns):
    r = np.asarray(returns, dtype=float)[:, None]
    k = len(r)
    return TrajectoryBatch(np.zeros((k, 2), dtype=int), np.zeros((k, 1), dtype=int), r, np.ones(k, dtype=int))


def bandit_traj(a, params):
    return Trajectory(np.zeros(2, dtype=int), np.array([a]), np.array([[2.0, 1.0][a]]), 1, params)


class TestMonteCarlo:
    def test_mean(self):
        d = Dataset()
        d.add(None, batch_with_returns([8, 6, 10]))
        assert mc_estimate(d) == 8.0

    def test_single(self):
        d = Dataset()
        d.add(None, batch_with_returns([3.5]))
        assert mc_estimate(d) == 3.5

    def test_empty(self):
        with pytest.raises(ValueError):
            mc_estimate(Dataset())

    def test_det4x4_within_4se(self):
        m = make_gridworld("det4x4")
        pol = load_policy("det4x4_pi2")
        d = Dataset()
        d.add(pol.params, m.sample_batch(pol, 10_000, np.random.default_rng(5)))
        g = next(d.batches()).returns()
        assert abs(mc_estimate(d) - policy_value(m, pol)) < 4 * g.std(ddof=1) / 100


class TestImportanceSampling:
    def test_on_policy_equals_return(self):
        m = make_gridworld("det4x4")
        pol = load_policy("det4x4_pi1")
        batch = m.sample_batch(pol, 20, np.random.default_rng(0))
        np.testing.assert_array_equal(is_values(batch, pol), batch.returns())

    def test_bandit_hand_values(self):
        pe = SoftmaxPolicy.uniform(1, 2)
        pb_params = np.log([[0.75, 0.25]])
        assert is_estimate(bandit_traj(0, pb_params), pe) == pytest.approx(4 / 3, abs=1e-15)
        assert is_estimate(bandit_traj(1, pb_params), pe) == pytest.approx(2.0, abs=1e-15)
        expected = 0.75 * 4 / 3 + 0.25 * 2.0
        assert expected == pytest.approx(1.5)

    def test_enumerated_unbiased(self):
        rng = np.random.default_rng(21)
        m = make_random_mdp(2, 2, 3, rng)
        pe = SoftmaxPolicy(rng.normal(size=(2, 2)))
        enum = enumerate_trajectories(m)
        for _ in range(10):
            pb = SoftmaxPolicy(rng.normal(size=(2, 2)))
            v = np.dot(enum.probabilities(pb), is_values(enum.batch, pe, pb))
            assert abs(v - policy_value(m, pe)) < 1e-10

    def test_dataset_uses_stored_params(self):
        m = make_gridworld("det4x4")
        pe = load_policy("det4x4_pi1")
        pb = SoftmaxPolicy(pe.params + 0.3 * np.random.default_rng(0).normal(size=pe.params.shape))
        d = Dataset()
        b1 = m.sample_batch(pe, 5, np.random.default_rng(1))
        b2 = m.sample_batch(pb, 5, np.random.default_rng(2))
        d.add(pe.params, b1)
        d.add(pb.params, b2)
        expected = np.concatenate([is_values(b1, pe, pe), is_values(b2, pe, pb)]).mean()
        assert is_estimate_dataset(d, pe) == pytest.approx(expected, abs=1e-12)

    def test_support_violation_propagates(self):
        pe = SoftmaxPolicy.uniform(1, 2)
        with pytest.raises(SupportError):
            is_values(bandit_traj(1, np.array([[0.0, -np.inf]])), pe)


class TestDoublyRobust:
    def test_exact_model_deterministic_on_policy(self):
        m = make_gridworld("det4x4")
        pe = load_policy("det4x4_pi2")
        model = true_model(m, pe)
        batch = m.sample_batch(pe, 50, np.random.default_rng(0))
        np.testing.assert_allclose(dr_values(batch, pe, model), policy_value(m, pe), atol=1e-9)

    def test_zero_model_is_per_decision_is(self, small_mdp):
        rng = np.random.default_rng(4)
        pe, pb = SoftmaxPolicy(rng.normal(size=(3, 2))), SoftmaxPolicy(rng.normal(size=(3, 2)))
        batch = small_mdp.sample_batch(pb, 30, rng)
        pdis = (cumulative_ratios(batch, pe, pb) * batch.rewards * batch.discounts).sum(1)
        np.testing.assert_allclose(dr_values(batch, pe, zero_model(small_mdp), pb), pdis, atol=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_unbiased_with_wrong_model(self, seed):
        rng = np.random.default_rng(seed)
        m = make_random_mdp(3, 2, 3, rng, with_terminal=True, discount=0.9)
        pe, pb = SoftmaxPolicy(rng.normal(size=(3, 2))), SoftmaxPolicy(rng.normal(size=(3, 2)))
        model = true_model(m, pe)
        model = model.with_q(model.q_hat + 1.0, pe)
        enum = enumerate_trajectories(m)
        v = np.dot(enum.probabilities(pb), dr_values(enum.batch, pe, model, pb))
        assert abs(v - policy_value(m, pe)) < 1e-10

    def test_missing_tables(self, small_mdp):
        from bps_lab.model import empty_model

        pe = SoftmaxPolicy.uniform(3, 2)
        batch = small_mdp.sample_batch(pe, 2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            dr_values(batch, pe, empty_model(small_mdp))

    def test_single_and_dataset_forms(self, small_mdp):
        pe = SoftmaxPolicy.uniform(3, 2)
        model = true_model(small_mdp, pe)
        batch = small_mdp.sample_batch(pe, 4, np.random.default_rng(0))
        d = Dataset()
        d.add(pe.params, batch)
        vals = [dr_estimate(h, pe, model) for h in batch]
        assert dr_estimate_dataset(d, pe, model) == pytest.approx(np.mean(vals), abs=1e-12)


class TestAdvantageSum:
    def test_zero_model_is_mc(self):
        m = make_gridworld("stoch6x6")
        pe = SoftmaxPolicy.uniform(36, 4)
        d = Dataset()
        d.add(pe.params, m.sample_batch(pe, 100, np.random.default_rng(0)))
        assert ase_estimate(d, zero_model(m)) == mc_estimate(d)

    def test_exact_model_deterministic(self):
        m = make_gridworld("det4x4")
        pe = load_policy("det4x4_pi1")
        batch = m.sample_batch(pe, 100, np.random.default_rng(0))
        np.testing.assert_allclose(ase_values(batch, true_model(m, pe)), policy_value(m, pe), atol=1e-9)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_pathwise_equals_on_policy_dr(self, seed):
        rng = np.random.default_rng(seed)
        m = make_random_mdp(3, 3, 4, rng, with_terminal=True, discount=float(rng.uniform(0.5, 1.0)))
        pe = SoftmaxPolicy(rng.normal(size=(3, 3)))
        model = true_model(m, pe)
        model = model.with_q(model.q_hat + rng.normal(size=model.q_hat.shape), pe)
        batch = m.sample_batch(pe, 50, rng)
        np.testing.assert_allclose(ase_values(batch, model), dr_values(batch, pe, model, pe), atol=1e-9)

    def test_control_variate_zero_mean(self):
        rng = np.random.default_rng(8)
        m = make_random_mdp(3, 2, 3, rng, with_terminal=True, discount=0.9)
        pe = SoftmaxPolicy(rng.normal(size=(3, 2)))
        model = zero_model(m).with_q(rng.normal(size=(4, 3, 2)), pe)
        enum = enumerate_trajectories(m)
        b = enum.batch
        t = np.arange(b.rewards.shape[1])[None, :]
        s = b.states[:, :-1]
        cv = np.where(b.mask, model.v_hat[t, s] - model.q_hat[t, s, b.actions], 0.0) @ b.discounts
        assert abs(np.dot(enum.probabilities(pe), cv)) < 1e-10


class TestEstimateSeries:
    def _series(self):
        s = EstimateSeries()
        s.append(EstimateRecord(0, -1.25, 3.0, theta_id(np.zeros(3)), 17))
        s.append(EstimateRecord(1, 0.1 + 0.2, 2.0 / 3.0, "abc", 2**63 + 5))
        return s

    def test_strictly_increasing(self):
        s = self._series()
        with pytest.raises(ValueError):
            s.append(EstimateRecord(1, 0.0, 0.0, "x", 0))

    def test_csv_round_trip_exact(self):
        s = self._series()
        text = s.to_csv()
        assert text.splitlines()[0] == CSV_HEADER
        assert text.splitlines()[1] == "iteration,estimate,sq_moment,theta_id,seed"
        back = EstimateSeries.from_csv(text)
        assert back.records == s.records

    def test_theta_id_stable(self):
        a = theta_id(np.array([1.0, 2.0]))
        assert a == theta_id(np.array([1.0, 2.0])) and a != theta_id(np.array([1.0, 2.5]))
        assert len(a) == 12


def test_bandit_is_expectation():
    m = make_bandit([2, 1])
    pe = SoftmaxPolicy.uniform(1, 2)
    pb = SoftmaxPolicy(np.log([[0.75, 0.25]]))
    enum = enumerate_trajectories(m)
    assert np.dot(enum.probabilities(pb), is_values(enum.batch, pe, pb)) == pytest.approx(1.5, abs=1e-12)
