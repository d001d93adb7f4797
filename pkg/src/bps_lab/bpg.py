"""Behavior policy gradient (BPG), its doubly-robust variant and REINFORCE.

BPG adapts the behavior policy by stochastic gradient descent on the
variance of the importance-sampling estimate. The gradient of
``MSE[IS(H, theta)]`` is ``E[-IS(H, theta)^2 * sum_t d/dtheta log pi_theta(A_t|S_t)]``
with ``H ~ pi_theta``; every iteration samples a batch, adds it to the
dataset and takes one step along the negated sample mean of that quantity.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import PreconditionError
from .estimators import (
    Dataset,
    EstimateRecord,
    EstimateSeries,
    dr_terms,
    dr_values,
    is_values,
    theta_id,
)
from .mdp import derive_seed, enumerate_trajectories, policy_value
from .model import compute_value_tables, empty_model, zero_model
from .policy import HistoryPolicy, cumulative_ratios


@dataclass
class BPGConfig:
    """Settings for :func:`bpg_run` and :func:`dr_bpg_run`.

    ``step_size`` is either a constant or one value per iteration.
    ``model_mode`` ("fixed" or "update") only matters for the DR variant.
    """

    step_size: float | Sequence[float] = 1e-4
    batch_size: int = 100
    iterations: int = 100
    baseline: bool = True
    seed: int = 0
    estimator: str = "IS"
    model_mode: str = "fixed"
    warmup: int = 10
    keep_dataset: bool = True
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be at least 1")
        steps = np.atleast_1d(np.asarray(self.step_size, dtype=float))
        if np.any(steps < 0) or not np.all(np.isfinite(steps)):
            raise ValueError("step sizes must be finite and non-negative")
        if steps.size > 1 and steps.size < self.iterations:
            raise ValueError("need one step size per iteration")
        if self.estimator.upper() not in ("IS", "DR"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.model_mode not in ("fixed", "update"):
            raise ValueError(f"unknown model mode {self.model_mode!r}")

    def alpha(self, i: int) -> float:
        steps = np.atleast_1d(np.asarray(self.step_size, dtype=float))
        return float(steps[0] if steps.size == 1 else steps[i])


@dataclass
class GradientEstimate:
    gradient: np.ndarray
    batch_sq_moment: float
    baseline: float
    values: np.ndarray = field(repr=False, default=None)


@dataclass
class BPGResult:
    policy: object
    series: EstimateSeries
    dataset: Dataset | None
    status: str = "ok"
    model: object = None

    @property
    def params(self) -> np.ndarray:
        return self.policy.params

    @property
    def estimate(self) -> float:
        return float(self.series.records[-1].estimate)

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"


def is_mse_gradient(batch, behavior, evaluation, baseline: float = 0.0) -> GradientEstimate:
    """Sample estimate ``(1/k) sum_H (-IS(H)^2 - b) sum_t score_t``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    isv = is_values(batch, evaluation, behavior)
    w = (-(isv**2) - baseline) / len(batch)
    grad = behavior.weighted_score_sum(batch, np.broadcast_to(w[:, None], batch.rewards.shape))
    return GradientEstimate(grad, float(np.mean(isv**2)), baseline, isv)


def dr_mse_gradient(batch, behavior, evaluation, model, baseline: float = 0.0) -> GradientEstimate:
    """Sample estimate of the DR variance gradient.

    Per trajectory: ``(DR^2 + b) sum_t score_t - 2 DR sum_t c_t sum_{i<=t} score_i``
    with ``c_t = gamma^t rho_t delta_t``. ``b`` enters with the sign used by
    :func:`is_mse_gradient` (pass ``-mean(DR^2)`` of the previous batch).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    terms, v0 = dr_terms(batch, evaluation, model, behavior)
    dr = v0 + terms.sum(1)
    tail = np.cumsum(terms[:, ::-1], axis=1)[:, ::-1]
    w = ((dr**2 + baseline)[:, None] - 2.0 * dr[:, None] * tail) / len(batch)
    grad = behavior.weighted_score_sum(batch, w)
    return GradientEstimate(grad, float(np.mean(dr**2)), baseline, dr)


def uncentered_second_moment(batch, behavior, evaluation, estimator: str = "IS", model=None) -> float:
    """``(1/k) sum_j OPE(H_j)^2``, the early-stopping diagnostic."""
    if estimator.upper() == "IS":
        v = is_values(batch, evaluation, behavior)
    else:
        v = dr_values(batch, evaluation, model, behavior)
    return float(np.mean(v**2))


def _bad(new: np.ndarray, old: np.ndarray) -> bool:
    """NaN/+inf anywhere, or a logit newly pushed to -inf."""
    return bool(np.any(np.isnan(new)) or np.any(new == np.inf)
                or np.any(np.isneginf(new) & ~np.isneginf(old)))


def _lost_support(behavior, evaluation) -> bool:
    """Behavior probabilities underflowed to 0 where ``pi_e`` is positive."""
    pb, pe = getattr(behavior, "probs", None), getattr(evaluation, "probs", None)
    return pb is not None and pe is not None and bool(np.any((pb == 0) & (pe > 0)))


def _diverged(sq: float, initial: float, factor: float) -> bool:
    if not np.isfinite(sq):
        return True
    return initial > 0 and sq > factor * initial


def bpg_run(mdp, evaluation, config: BPGConfig, trial: int = 0, callback=None) -> BPGResult:
    """Behavior policy gradient starting from ``theta_0 = theta_e``.

    Returns the final behavior policy and the per-iteration IS estimate of
    ``rho(pi_e)`` over all trajectories sampled so far. Iteration ``i`` of
    trial ``t`` draws its batch from the stream ``(config.seed, t, i)``.
    ``callback(i, policy)`` is called with the behavior policy used at
    iteration ``i`` and once more with the final policy (``i = n``).
    """
    k = config.batch_size
    policy = evaluation
    series = EstimateSeries()
    dataset = Dataset() if config.keep_dataset else None
    total, count = 0.0, 0
    initial = prev_sq = None
    status = "ok"
    for i in range(config.iterations):
        if callback is not None:
            callback(i, policy)
        seed = derive_seed(config.seed, trial, i)
        batch = mdp.sample_batch(policy, k, np.random.default_rng(seed))
        b = -prev_sq if (config.baseline and prev_sq is not None) else 0.0
        ge = is_mse_gradient(batch, policy, evaluation, b)
        total += float(ge.values.sum())
        count += k
        series.append(EstimateRecord(i, total / count, ge.batch_sq_moment, theta_id(policy.params), seed))
        if dataset is not None:
            dataset.add(policy.params, batch)
        if initial is None:
            initial = ge.batch_sq_moment
        if _diverged(ge.batch_sq_moment, initial, config.divergence_factor):
            status = "diverged"
            break
        new = policy.params - config.alpha(i) * ge.gradient
        if _bad(new, policy.params):
            status = "diverged"
            break
        policy = policy.with_params(new)
        prev_sq = ge.batch_sq_moment
        if _lost_support(policy, evaluation):
            status = "diverged"
            break
    if callback is not None and status == "ok":
        callback(config.iterations, policy)
    return BPGResult(policy, series, dataset, status)


class _DRSum:
    """Running sum of DR values over a dataset, re-scorable under any model.

    DR is linear in ``q_hat`` and ``v_hat``, so each batch is reduced once to
    per-(t, s, a) weights and the dataset sum under a new model costs one
    pass over the value tables instead of one over every trajectory.
    """

    def __init__(self, mdp):
        L, S, A = mdp.horizon, mdp.num_states, mdp.num_actions
        self.const = 0.0
        self.start = np.zeros(S)
        self.wq = np.zeros((L + 1, S, A))
        self.wv = np.zeros((L + 2, S))

    def add(self, batch, evaluation, behavior) -> None:
        T = batch.rewards.shape[1]
        w = np.where(batch.mask, batch.discounts * cumulative_ratios(batch, evaluation, behavior), 0.0)
        t = np.broadcast_to(np.arange(T), w.shape)
        self.const += float(np.sum(w * batch.rewards))
        np.add.at(self.start, batch.states[:, 0], 1.0)
        np.add.at(self.wq, (t, batch.states[:, :-1], batch.actions), w)
        np.add.at(self.wv, (t + 1, batch.states[:, 1:]), w)

    def total(self, model) -> float:
        return float(self.const + self.start @ model.v_hat[0] - np.sum(self.wq * model.q_hat)
                     + model.discount * np.sum(self.wv * model.v_hat))


def dr_bpg_run(mdp, evaluation, config: BPGConfig, trial: int = 0, callback=None) -> BPGResult:
    """DR-BPG on a tabular MDP with a maximum-likelihood model.

    The first ``config.warmup`` iterations are on-policy and only collect
    data. In ``fixed`` mode the model is fit once on that data and frozen
    at iteration ``warmup``; before then estimates are plain Monte Carlo (no
    control variate), afterwards every trajectory collected so far is scored
    with DR under the frozen model. With ``warmup=0`` the model stays
    identically zero and DR reduces to per-decision IS. In
    ``update`` mode the model is refit on all data every iteration and all
    DR values are recomputed with it. Behavior updates use the batch of
    iteration ``i`` for ``i >= warmup``. ``callback`` is as in :func:`bpg_run`.
    """
    k = config.batch_size
    warmup = config.warmup
    update = config.model_mode == "update"
    policy = evaluation
    series = EstimateSeries()
    counts = empty_model(mdp)
    model = zero_model(mdp)
    stored: list[tuple[np.ndarray, object]] = []
    total, count = 0.0, 0
    dr_sum = _DRSum(mdp) if update else None
    initial = prev_sq = None
    status = "ok"
    for i in range(config.iterations):
        if callback is not None:
            callback(i, policy)
        seed = derive_seed(config.seed, trial, i)
        batch = mdp.sample_batch(policy, k, np.random.default_rng(seed))
        stored.append((policy.params, batch))
        if update:
            counts = counts.updated([batch], fit_iteration=i)
            model = compute_value_tables(counts, evaluation)
            dr_sum.add(batch, evaluation, policy)
            total = dr_sum.total(model)
            count += k
            if not config.keep_dataset:
                stored.clear()
        elif i < warmup:
            counts = counts.updated([batch], fit_iteration=i)
            total += float(batch.returns().sum())
            count += k
        else:
            if i == warmup and warmup > 0:
                model = compute_value_tables(counts, evaluation)
                total = float(sum(dr_values(bt, evaluation, model, policy.with_params(p)).sum()
                                  for p, bt in stored[:-1]))
            total += float(dr_values(batch, evaluation, model, policy).sum())
            count += k
            if not config.keep_dataset:
                stored.clear()
        b = -prev_sq if (config.baseline and prev_sq is not None) else 0.0
        ge = dr_mse_gradient(batch, policy, evaluation, model, b)
        series.append(EstimateRecord(i, total / count, ge.batch_sq_moment, theta_id(policy.params), seed))
        if initial is None:
            initial = ge.batch_sq_moment
        if _diverged(ge.batch_sq_moment, initial, config.divergence_factor):
            status = "diverged"
            break
        if i >= warmup:
            new = policy.params - config.alpha(i) * ge.gradient
            if _bad(new, policy.params):
                status = "diverged"
                break
            policy = policy.with_params(new)
            prev_sq = ge.batch_sq_moment
            if _lost_support(policy, evaluation):
                status = "diverged"
                break
    if callback is not None and status == "ok":
        callback(config.iterations, policy)
    dataset = None
    if config.keep_dataset:
        dataset = Dataset()
        for p, bt in stored:
            dataset.add(p, bt)
    return BPGResult(policy, series, dataset, status, model)


@dataclass
class ReinforceResult:
    policy: object
    thetas: list[np.ndarray]
    values: np.ndarray
    status: str = "ok"


def reinforce_run(mdp, policy, step_size: float, iterations: int, batch_size: int = 10,
                  seed: int = 0, baseline: bool = True, track_values: bool = True) -> ReinforceResult:
    """Gradient ascent on ``rho(pi_theta)`` with ``E[g(H) sum_t score_t]``.

    ``values[i]`` is the exact value of ``thetas[i]`` (tabular MDPs only).
    """
    thetas = [np.array(policy.params, copy=True)]
    values = [policy_value(mdp, policy)] if track_values else []
    prev_mean = None
    status = "ok"
    for i in range(iterations):
        batch = mdp.sample_batch(policy, batch_size, np.random.default_rng(derive_seed(seed, i)))
        g = batch.returns()
        b = prev_mean if (baseline and prev_mean is not None) else 0.0
        w = (g - b) / batch_size
        grad = policy.weighted_score_sum(batch, np.broadcast_to(w[:, None], batch.rewards.shape))
        new = policy.params + step_size * grad
        if _bad(new, policy.params):
            status = "diverged"
            break
        policy = policy.with_params(new)
        prev_mean = float(g.mean())
        thetas.append(np.array(new, copy=True))
        if track_values:
            values.append(policy_value(mdp, policy))
    return ReinforceResult(policy, thetas, np.array(values), status)


def select_evaluation_policies(result: ReinforceResult, window: int = 50, tol: float = 0.1,
                               fraction: float = 0.5) -> tuple[int, int]:
    """Indices of a partially trained and a converged policy along a REINFORCE run.

    The converged index is the first ``i >= window`` whose value moved less
    than ``tol`` over the previous ``window`` iterations (else the last one).
    The partial index is the first whose value has covered ``fraction`` of
    the way from the initial value to the converged value.
    """
    v = result.values
    conv = len(v) - 1
    for i in range(window, len(v)):
        if abs(v[i] - v[i - window]) < tol:
            conv = i
            break
    target = v[0] + fraction * (v[conv] - v[0])
    partial = int(np.argmax(v[: conv + 1] >= target))
    return partial, conv


def optimal_behavior_policy(mdp, evaluation) -> HistoryPolicy:
    """Zero-variance behavior policy for a deterministic, positive-return MDP.

    Every trajectory ``H`` gets probability ``g(H) w_e(H) / rho(pi_e)``. The
    mass is pushed down the deterministic trajectory tree: at each node the
    action probability is the child's subtree mass over the node's mass.
    """
    if not mdp.is_deterministic:
        raise PreconditionError("optimal behavior construction needs deterministic transitions")
    enum = enumerate_trajectories(mdp)
    batch = enum.batch
    w_e = np.exp(evaluation.step_log_probs(batch).sum(1))
    g = batch.returns()
    if np.any(g[w_e > 0] <= 0):
        raise PreconditionError("every reachable return must be positive")
    mass = np.where(w_e > 0, g * w_e, 0.0)
    A = mdp.num_actions
    node_mass: dict[tuple, np.ndarray] = defaultdict(lambda: np.zeros(A))
    for j in range(len(batch)):
        acts = batch.actions[j]
        for t in range(int(batch.lengths[j])):
            node_mass[tuple(int(a) for a in acts[:t])][acts[t]] += mass[j]
    conditionals = {node: m / m.sum() for node, m in node_mass.items() if m.sum() > 0}
    return HistoryPolicy(conditionals, np.full(A, 1.0 / A))
