import numpy as np
import pytest

from bps_lab.bpg import BPGConfig, bpg_run
from bps_lab.continuous import PointMass
from bps_lab.estimators import is_values
from bps_lab.policy import GaussianPolicy


def controller(log_std=np.log(0.6)):
    return GaussianPolicy([[-1.0, 0.0]], [log_std])


class TestPointMass:
    def test_deterministic_given_rng(self):
        env, pol = PointMass(), controller()
        a = env.sample_batch(pol, 20, np.random.default_rng(1))
        b = env.sample_batch(pol, 20, np.random.default_rng(1))
        np.testing.assert_array_equal(a.returns(), b.returns())

    def test_crash_ends_episode(self):
        env = PointMass(start=1.9, noise_std=0.0)
        pol = GaussianPolicy([[0.0, 5.0]], [np.log(1e-6)])  # push outward hard
        batch = env.sample_batch(pol, 3, np.random.default_rng(0))
        np.testing.assert_array_equal(batch.lengths, 1)
        np.testing.assert_allclose(batch.returns(), env.crash_penalty)

    def test_full_length_without_crash(self):
        env = PointMass(start=0.0, noise_std=0.0)
        pol = GaussianPolicy([[0.0, 0.0]], [np.log(1e-6)])
        batch = env.sample_batch(pol, 2, np.random.default_rng(0))
        np.testing.assert_array_equal(batch.lengths, env.horizon + 1)
        assert batch.returns() == pytest.approx(0.0, abs=1e-6)

    def test_reference_value_se(self):
        env, pol = PointMass(), controller()
        m1, se1 = env.monte_carlo_value(pol, n=4000, seed=1)
        m2, _ = env.monte_carlo_value(pol, n=4000, seed=2)
        assert abs(m1 - m2) < 6 * se1

    def test_is_unbiased(self):
        env, pe = PointMass(), controller()
        pb = controller(np.log(0.8))
        rho, se = env.monte_carlo_value(pe, n=20_000, seed=3)
        vals = is_values(env.sample_batch(pb, 20_000, np.random.default_rng(4)), pe, pb)
        assert abs(vals.mean() - rho) < 4 * np.hypot(se, vals.std(ddof=1) / np.sqrt(vals.size))


class TestGaussianBpg:
    def test_runs_and_estimates_stay_near_value(self):
        env, pe = PointMass(), controller()
        rho, _ = env.monte_carlo_value(pe, n=20_000, seed=0)
        r = bpg_run(env, pe, BPGConfig(step_size=1e-6, batch_size=200, iterations=10, seed=1))
        assert r.status == "ok"
        est = r.series.estimates
        assert abs(est.mean() - rho) < 0.5 * abs(rho)
