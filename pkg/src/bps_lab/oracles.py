"""Exact expectations used to check the sampled algorithms.

Two independent routes are provided:

* enumeration over every trajectory of a small MDP (``exact_*``), and
* moment recursions over time-indexed tables (``*_dp``) that scale to the
  L=100 gridworlds because they never materialise trajectories.
"""
from __future__ import annotations

import numpy as np

from .errors import SupportError
from .estimators import dr_terms, is_values
from .mdp import EnumeratedTrajectorySet, TabularMDP, enumerate_trajectories, policy_value


def _enum(mdp, enum):
    return enumerate_trajectories(mdp) if enum is None else enum


def _as_policy(behavior, evaluation):
    if isinstance(behavior, np.ndarray):
        return evaluation.with_params(behavior)
    return behavior


def _supported(enum: EnumeratedTrajectorySet, behavior):
    """Sub-batch of trajectories with positive probability under ``behavior``."""
    lb = behavior.step_log_probs(enum.batch)
    keep = np.flatnonzero(np.all(np.isfinite(lb), axis=1))
    batch = enum.batch.take(keep)
    probs = enum.base_prob[keep] * np.exp(lb[keep].sum(axis=1))
    return batch, probs


def _check_support(enum, behavior, evaluation):
    le = evaluation.step_log_probs(enum.batch)
    lb = behavior.step_log_probs(enum.batch)
    if np.any(np.isfinite(le.sum(1)) & ~np.isfinite(lb.sum(1))):
        raise SupportError("behavior policy does not cover the evaluation policy's support")


def exact_is_second_moment(mdp, behavior, evaluation, enum=None) -> float:
    enum = _enum(mdp, enum)
    behavior = _as_policy(behavior, evaluation)
    _check_support(enum, behavior, evaluation)
    batch, probs = _supported(enum, behavior)
    return float(np.dot(probs, is_values(batch, evaluation, behavior) ** 2))


def exact_is_variance(mdp, behavior, evaluation, enum=None) -> float:
    """``E[IS^2] - rho(pi_e)^2`` under ``H ~ behavior``, by enumeration."""
    rho = policy_value(mdp, evaluation)
    return exact_is_second_moment(mdp, behavior, evaluation, enum) - rho**2


def exact_is_expectation(mdp, behavior, evaluation, enum=None) -> float:
    enum = _enum(mdp, enum)
    behavior = _as_policy(behavior, evaluation)
    batch, probs = _supported(enum, behavior)
    return float(np.dot(probs, is_values(batch, evaluation, behavior)))


def exact_dr_moments(mdp, behavior, evaluation, model, enum=None) -> tuple[float, float]:
    """``(E[DR], E[DR^2])`` under ``H ~ behavior``, by enumeration."""
    enum = _enum(mdp, enum)
    behavior = _as_policy(behavior, evaluation)
    batch, probs = _supported(enum, behavior)
    terms, v0 = dr_terms(batch, evaluation, model, behavior)
    dr = v0 + terms.sum(1)
    return float(np.dot(probs, dr)), float(np.dot(probs, dr**2))


def exact_dr_variance(mdp, behavior, evaluation, model, enum=None) -> float:
    rho = policy_value(mdp, evaluation)
    return exact_dr_moments(mdp, behavior, evaluation, model, enum)[1] - rho**2


def exact_is_gradient(mdp, behavior, evaluation, baseline: float = 0.0, enum=None) -> np.ndarray:
    """Enumeration-weighted ``E[(-IS^2 - b) * sum_t score_t]``."""
    enum = _enum(mdp, enum)
    behavior = _as_policy(behavior, evaluation)
    batch, probs = _supported(enum, behavior)
    isv = is_values(batch, evaluation, behavior)
    w = probs * (-(isv**2) - baseline)
    return behavior.weighted_score_sum(batch, np.broadcast_to(w[:, None], batch.rewards.shape))


def exact_dr_gradient(mdp, behavior, evaluation, model, baseline: float = 0.0, enum=None) -> np.ndarray:
    """Enumeration-weighted DR variance gradient.

    ``E[DR^2 sum_t score_t - 2 DR sum_t c_t sum_{i<=t} score_i]`` with
    ``c_t = gamma^t rho_t delta_t``; the inner double sum is rewritten as
    ``sum_i score_i * sum_{t>=i} c_t``.
    """
    enum = _enum(mdp, enum)
    behavior = _as_policy(behavior, evaluation)
    batch, probs = _supported(enum, behavior)
    terms, v0 = dr_terms(batch, evaluation, model, behavior)
    dr = v0 + terms.sum(1)
    tail = np.cumsum(terms[:, ::-1], axis=1)[:, ::-1]
    w = probs[:, None] * ((dr**2 + baseline)[:, None] - 2.0 * dr[:, None] * tail)
    return behavior.weighted_score_sum(batch, w)


def exact_policy_gradient(mdp, policy, enum=None) -> np.ndarray:
    """``d rho / d theta = E[g(H) sum_t score_t]`` by enumeration."""
    enum = _enum(mdp, enum)
    batch, probs = _supported(enum, policy)
    w = probs * batch.returns()
    return policy.weighted_score_sum(batch, np.broadcast_to(w[:, None], batch.rewards.shape))


def finite_difference(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Fourth-order central difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        vals = []
        for c in (2, 1, -1, -2):
            xp = x.copy().reshape(-1)
            xp[i] += c * step
            vals.append(f(xp.reshape(x.shape)))
        f2, f1, fm1, fm2 = vals
        flat[i] = (-f2 + 8 * f1 - 8 * fm1 + fm2) / (12 * step)
    return grad


def exact_mse_fd_gradient(mdp, behavior, evaluation, step: float = 1e-4, estimator: str = "IS",
                          model=None, enum=None) -> np.ndarray:
    """Finite differences of the exact MSE with respect to behavior parameters."""
    enum = _enum(mdp, enum)
    behavior = _as_policy(behavior, evaluation)
    if estimator.upper() == "IS":
        f = lambda th: exact_is_second_moment(mdp, behavior.with_params(th), evaluation, enum)  # noqa: E731
    elif estimator.upper() == "DR":
        f = lambda th: exact_dr_moments(mdp, behavior.with_params(th), evaluation, model, enum)[1]  # noqa: E731
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    return finite_difference(f, behavior.params, step)


def relative_error(analytic: np.ndarray, reference: np.ndarray, floor: float = 1e-8) -> float:
    """Max ``|a - r| / |r|`` over coordinates with ``|r| > floor``."""
    analytic = np.asarray(analytic, dtype=float).ravel()
    reference = np.asarray(reference, dtype=float).ravel()
    sel = np.abs(reference) > floor
    if not sel.any():
        return float(np.max(np.abs(analytic - reference), initial=0.0))
    return float(np.max(np.abs(analytic[sel] - reference[sel]) / np.abs(reference[sel])))


# ---------------------------------------------------------------------------
# Moment recursions
# ---------------------------------------------------------------------------


def _ratio_sq(pe: np.ndarray, pb: np.ndarray) -> np.ndarray:
    if np.any((pe > 0) & (pb == 0)):
        raise SupportError("behavior policy does not cover the evaluation policy's support")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(pe > 0, pe**2 / pb, 0.0)


def is_moments_dp(mdp: TabularMDP, behavior, evaluation) -> tuple[float, float]:
    """``(E[IS], E[IS^2])`` under ``H ~ behavior`` by backward recursion.

    Carries suffix moments of the ratio-weighted return. Each step multiplies
    by ``pi_e^2 / pi_b`` (second moment) or ``pi_e`` (first moment).
    """
    behavior = _as_policy(behavior, evaluation)
    P, R, g = mdp.transition, mdp.reward, mdp.discount
    term = mdp.terminal_mask
    S = mdp.num_states
    PR, PR2 = P * R, P * R**2
    # a: measure pi_e^2/pi_b, b: measure pi_e (first-moment recursion)
    a0, a1, a2 = np.ones(S), np.zeros(S), np.zeros(S)
    b1 = np.zeros(S)
    for t in range(mdp.horizon, -1, -1):
        pe, pb = evaluation.table_at(t), behavior.table_at(t)
        c = _ratio_sq(pe, pb)
        n0 = P @ a0
        n1 = PR @ a0 + g * (P @ a1)
        n2 = PR2 @ a0 + 2 * g * (PR @ a1) + g**2 * (P @ a2)
        m1 = PR.sum(-1) + g * (P @ b1)
        a0, a1, a2 = (c * n0).sum(1), (c * n1).sum(1), (c * n2).sum(1)
        b1 = (pe * m1).sum(1)
        a0[term], a1[term], a2[term], b1[term] = 1.0, 0.0, 0.0, 0.0
    s0 = mdp.start_state
    return float(b1[s0]), float(a2[s0])


def is_variance_dp(mdp: TabularMDP, behavior, evaluation) -> float:
    """Exact IS variance; ``inf`` when the second moment overflows."""
    with np.errstate(over="ignore", invalid="ignore"):
        mean, second = is_moments_dp(mdp, behavior, evaluation)
    if not np.isfinite(second):
        return float("inf")
    return second - mean**2


def dr_moments_dp(mdp: TabularMDP, behavior, evaluation, model) -> tuple[float, float]:
    """``(E[DR], E[DR^2])`` under ``H ~ behavior`` by backward recursion."""
    behavior = _as_policy(behavior, evaluation)
    P, R, g = mdp.transition, mdp.reward, mdp.discount
    term = mdp.terminal_mask
    S = mdp.num_states
    e1, e2 = np.zeros(S), np.zeros(S)
    for t in range(mdp.horizon, -1, -1):
        pe, pb = evaluation.table_at(t), behavior.table_at(t)
        c = _ratio_sq(pe, pb)
        delta = R - model.q_hat[t][:, :, None] + g * model.v_hat[t + 1][None, None, :]
        n1 = np.sum(P * (delta + g * e1[None, None, :]), axis=-1)
        n2 = np.sum(P * (delta**2 + 2 * g * delta * e1[None, None, :] + g**2 * e2[None, None, :]), axis=-1)
        e1, e2 = (pe * n1).sum(1), (c * n2).sum(1)
        e1[term], e2[term] = 0.0, 0.0
    s0 = mdp.start_state
    v0 = model.v_hat[0, s0]
    return float(v0 + e1[s0]), float(v0**2 + 2 * v0 * e1[s0] + e2[s0])


def dr_variance_dp(mdp: TabularMDP, behavior, evaluation, model) -> float:
    """Exact DR variance; ``inf`` when the second moment overflows."""
    with np.errstate(over="ignore", invalid="ignore"):
        mean, second = dr_moments_dp(mdp, behavior, evaluation, model)
    if not np.isfinite(second):
        return float("inf")
    return second - mean**2


def ase_variance_dp(mdp: TabularMDP, evaluation, model) -> float:
    """On-policy advantage-sum variance; ASE equals on-policy DR pathwise."""
    return dr_variance_dp(mdp, evaluation, evaluation, model)


def dr_second_moment_gradient_dp(mdp: TabularMDP, behavior, evaluation, model) -> np.ndarray:
    """Exact gradient of ``E[DR^2]`` w.r.t. softmax behavior logits.

    Reverse-mode pass over :func:`dr_moments_dp`: the backward sweep stores
    the per-step second-moment integrands, a forward sweep carries the
    adjoint of each state's suffix moment. Only the ``pi_e^2 / pi_b`` factors
    depend on the behavior, so the gradient is a sum of their derivatives.
    """
    behavior = _as_policy(behavior, evaluation)
    P, R, g = mdp.transition, mdp.reward, mdp.discount
    term = mdp.terminal_mask
    S, L = mdp.num_states, mdp.horizon
    e1, e2 = np.zeros(S), np.zeros(S)
    n2s, cs, pes, pbs = [None] * (L + 1), [None] * (L + 1), [None] * (L + 1), [None] * (L + 1)
    for t in range(L, -1, -1):
        pe, pb = evaluation.table_at(t), behavior.table_at(t)
        c = _ratio_sq(pe, pb)
        delta = R - model.q_hat[t][:, :, None] + g * model.v_hat[t + 1][None, None, :]
        n1 = np.sum(P * (delta + g * e1[None, None, :]), axis=-1)
        n2 = np.sum(P * (delta**2 + 2 * g * delta * e1[None, None, :] + g**2 * e2[None, None, :]), axis=-1)
        n2s[t], cs[t], pes[t], pbs[t] = n2, c, pe, pb
        e1, e2 = (pe * n1).sum(1), (c * n2).sum(1)
        e1[term], e2[term] = 0.0, 0.0
    adj = np.zeros(S)
    adj[mdp.start_state] = 1.0
    grad = np.zeros((S, mdp.num_actions))
    for t in range(L + 1):
        adj = np.where(term, 0.0, adj)
        pe, pb, c = pes[t], pbs[t], cs[t]
        # d c(s,a) / d theta(s,a') = -c(s,a) * (1{a=a'} - pb(a'))
        u = adj[:, None] * n2s[t] * c
        grad += -(u - u.sum(1, keepdims=True) * pb)
        adj = g**2 * np.einsum("s,sa,sap->p", adj, c, P)
    return grad.reshape(np.shape(behavior.params))
