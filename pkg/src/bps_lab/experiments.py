"""Experiment drivers behind the ``bps-lab`` command line.

Each ``cmd_*`` function takes an :class:`ExperimentConfig`, writes CSV/JSON
files into ``config.out`` and returns a process exit code. Trials are
independent and may run in a process pool; every random stream is derived
from ``(seed, trial, ...)`` and results are written in trial order, so the
output bytes do not depend on the worker count.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field, fields
from multiprocessing import get_context
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy import stats

from . import __version__
from .bpg import BPGConfig, bpg_run, dr_bpg_run, reinforce_run, select_evaluation_policies
from .continuous import PointMass
from .errors import SupportError
from .estimators import CSV_HEADER, is_values
from .fixtures import load_policy
from .mdp import derive_rng, derive_seed, make_bandit, make_gridworld, make_random_mdp, policy_value
from .model import true_model
from .oracles import (
    dr_variance_dp,
    exact_dr_gradient,
    exact_is_gradient,
    exact_mse_fd_gradient,
    is_variance_dp,
    relative_error,
)
from .policy import GaussianPolicy, SoftmaxPolicy, policy_from_json

EXIT_OK, EXIT_CONFIG, EXIT_TOLERANCE, EXIT_DIVERGED = 0, 1, 2, 3

# spawn-key tags keeping auxiliary streams apart from the training streams
_PROBE, _HOLDOUT, _REFERENCE, _GRADCHECK = 101, 102, 103, 104

UP = 0


class ConfigError(ValueError):
    """Invalid experiment configuration (exit status 1)."""


@dataclass
class ExperimentConfig:
    """JSON-backed experiment description.

    ``evaluation_policy`` is one of ``{"fixture": name}``, ``{"path": file}``,
    ``{"uniform": true}``, ``{"gaussian": {"mean_weights": .., "log_std": ..}}``
    or ``{"reinforce": {"step_size", "iterations", "batch_size", "seed",
    "snapshot": "partial" | "converged"}}``. ``bpg`` holds
    :class:`~bps_lab.bpg.BPGConfig` fields except ``seed``.
    """

    experiment: str = "bpg"
    environment: dict = field(default_factory=lambda: {"variant": "det4x4"})
    evaluation_policy: dict = field(default_factory=lambda: {"fixture": "det4x4_pi1"})
    bpg: dict = field(default_factory=dict)
    seed: int = 0
    trials: int = 1
    workers: int = 1
    probe_samples: int = 10_000
    probe_repeats: int = 5
    probe_period: int = 0
    holdout: int = 0
    mc_baseline: bool = True
    reference_rollouts: int = 1_000_000
    step_sizes: list = field(default_factory=lambda: [1e-2, 1e-3, 1e-4, 1e-5, 1e-6])
    p_values: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    gradcheck: dict = field(default_factory=dict)
    out: str = "runs/out"

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.probe_samples < 1 or self.probe_repeats < 1:
            raise ConfigError("probe sample count and repeats must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        try:
            self.bpg_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad bpg settings: {exc}") from exc

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def bpg_config(self, **overrides) -> BPGConfig:
        d = {k: v for k, v in self.bpg.items() if k != "seed"}
        d.update(overrides)
        d["seed"] = self.seed
        d.setdefault("keep_dataset", False)
        return BPGConfig(**d)


# ---------------------------------------------------------------------------
# Environment and policy construction
# ---------------------------------------------------------------------------


def build_environment(spec: dict):
    variant = spec.get("variant", "det4x4")
    if variant == "pointmass":
        opts = {k: v for k, v in spec.items() if k != "variant"}
        return PointMass(**opts)
    try:
        return make_gridworld(variant, p=spec.get("p"), horizon=spec.get("horizon", 100))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_evaluation_policy(spec: dict, env):
    if "fixture" in spec:
        try:
            return load_policy(spec["fixture"])
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc
    if "path" in spec:
        try:
            return policy_from_json(Path(spec["path"]).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read policy {spec['path']}: {exc}") from exc
    if spec.get("uniform"):
        return SoftmaxPolicy.uniform(env.num_states, env.num_actions)
    if "gaussian" in spec:
        g = spec["gaussian"]
        return GaussianPolicy(g["mean_weights"], g["log_std"])
    if "reinforce" in spec:
        r = spec["reinforce"]
        start = SoftmaxPolicy.uniform(env.num_states, env.num_actions)
        res = reinforce_run(env, start, r.get("step_size", 0.002), r.get("iterations", 2000),
                            batch_size=r.get("batch_size", 10), seed=r.get("seed", 0))
        partial, conv = select_evaluation_policies(res)
        return SoftmaxPolicy(res.thetas[partial if r.get("snapshot", "partial") == "partial" else conv])
    raise ConfigError(f"cannot interpret evaluation_policy {spec!r}")


def _is_tabular(env) -> bool:
    return hasattr(env, "transition")


def reference_value(env, policy, config: ExperimentConfig) -> tuple[float, float]:
    """Ground-truth ``rho(pi_e)`` and its standard error (0 for the DP oracle)."""
    if _is_tabular(env):
        return policy_value(env, policy), 0.0
    return env.monte_carlo_value(policy, n=config.reference_rollouts,
                                 seed=derive_seed(config.seed, _REFERENCE))


def exact_variance(env, behavior, evaluation) -> float:
    if not _is_tabular(env):
        return float("nan")
    try:
        return is_variance_dp(env, behavior, evaluation)
    except SupportError:
        # a behavior policy that lost support has no usable IS variance
        return float("inf")


def probe_variance(env, behavior, evaluation, samples: int, repeats: int, root: int,
                   *keys: int) -> tuple[float, float]:
    """Out-of-band IS variance estimate: mean and standard error over repeats.

    The probe trajectories never enter any dataset.
    """
    v = np.empty(repeats)
    for r in range(repeats):
        rng = derive_rng(root, _PROBE, *keys, r)
        vals = is_values(env.sample_batch(behavior, samples, rng), evaluation, behavior)
        v[r] = np.var(vals, ddof=1) if samples > 1 else 0.0
    se = float(np.std(v, ddof=1) / np.sqrt(repeats)) if repeats > 1 else float("nan")
    return float(v.mean()), se


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    path.write_text(buf.getvalue())


def read_csv(path: str | os.PathLike) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_manifest(out: Path, command: str, config: ExperimentConfig, extra: dict) -> None:
    d = {
        "tool": "bps-lab",
        "version": f"v{__version__}",
        "command": command,
        "seed": config.seed,
        "config": {k: v for k, v in config.to_dict().items() if k not in ("workers", "out")},
    }
    d.update(extra)
    (out / "manifest.json").write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")


def _map(fn: Callable, jobs: list, workers: int) -> list:
    """Ordered map; uses a process pool when ``workers > 1``."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with get_context("spawn").Pool(min(workers, len(jobs))) as pool:
        return pool.map(fn, jobs, chunksize=1)


def mean_ci(x, level: float = 0.95) -> tuple[float, float, float]:
    """Mean and two-sided Student-t confidence interval."""
    x = np.asarray(x, dtype=float)
    m = float(x.mean())
    if x.size < 2:
        return m, float("nan"), float("nan")
    half = float(stats.t.ppf(0.5 + level / 2, x.size - 1) * x.std(ddof=1) / np.sqrt(x.size))
    return m, m - half, m + half


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


class _CorruptedSoftmax(SoftmaxPolicy):
    """Negative control: drops the ``-pi(.|s)`` term of the softmax score."""

    def with_params(self, theta):
        return _CorruptedSoftmax(theta)

    def weighted_score_sum(self, batch, weights):
        grad = super().weighted_score_sum(batch, weights)
        mask = batch.mask
        s = batch.states[:, :-1][mask]
        w = np.asarray(weights, dtype=float)[mask]
        S = self.num_states
        return grad + np.bincount(s, weights=w, minlength=S)[:, None] * self.probs


def bandit_p1_gradient(p1: float = 0.5, rewards=(2.0, 1.0)) -> float:
    """``d E[IS^2] / d p1`` for a two-armed bandit, via the softmax chain rule."""
    mdp = make_bandit(rewards)
    evaluation = SoftmaxPolicy.uniform(1, 2)
    behavior = SoftmaxPolicy(np.log([[p1, 1.0 - p1]]))
    g = exact_is_gradient(mdp, behavior, evaluation)  # d E[IS^2] / d logits
    # d p1 / d logit_1 = p1 (1 - p1)
    return float(g[0, 0] / (p1 * (1.0 - p1)))


def gradcheck_suite(num_mdps: int = 5, seed: int = 0, max_states: int = 3, max_actions: int = 3,
                    max_horizon: int = 3, corrupt_score: bool = False) -> list[dict]:
    """Analytic vs finite-difference gradients on random enumerable MDPs."""
    rows = []
    for j in range(num_mdps):
        rng = derive_rng(seed, _GRADCHECK, j)
        S = int(rng.integers(2, max_states + 1))
        A = int(rng.integers(2, max_actions + 1))
        L = int(rng.integers(1, max_horizon + 1))
        mdp = make_random_mdp(S, A, L, rng, deterministic=bool(j % 2), with_terminal=bool(j % 3 == 0),
                              discount=float(rng.choice([1.0, 0.9])))
        evaluation = SoftmaxPolicy(rng.normal(size=(S, A)))
        cls = _CorruptedSoftmax if corrupt_score else SoftmaxPolicy
        behavior = cls(rng.normal(size=(S, A)))
        model = true_model(mdp, evaluation)
        model = model.with_q(model.q_hat + rng.normal(size=model.q_hat.shape), evaluation)
        analytic = {"IS": exact_is_gradient(mdp, behavior, evaluation),
                    "DR": exact_dr_gradient(mdp, behavior, evaluation, model)}
        for kind, grad in analytic.items():
            fd = exact_mse_fd_gradient(mdp, behavior, evaluation, estimator=kind, model=model)
            rows.append({"mdp": j, "states": S, "actions": A, "horizon": L, "estimator": kind,
                         "max_rel_error": relative_error(grad, fd)})
    return rows


def cmd_gradcheck(config: ExperimentConfig) -> int:
    g = dict(config.gradcheck)
    tol = {"IS": g.pop("tol_is", 1e-6), "DR": g.pop("tol_dr", 1e-5)}
    bandit_tol = g.pop("tol_bandit", 1e-9)
    try:
        rows = gradcheck_suite(seed=config.seed, **g)
    except TypeError as exc:
        raise ConfigError(f"bad gradcheck settings: {exc}") from exc
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    ok = True
    table = []
    for r in rows:
        passed = r["max_rel_error"] < tol[r["estimator"]]
        ok &= passed
        table.append([r["mdp"], r["states"], r["actions"], r["horizon"], r["estimator"],
                      r["max_rel_error"], tol[r["estimator"]], passed])
        print(f"mdp {r['mdp']} ({r['states']}x{r['actions']}, L={r['horizon']}) {r['estimator']}: "
              f"max rel error {r['max_rel_error']:.3e} {'ok' if passed else 'FAIL'}")
    bandit = bandit_p1_gradient()
    bandit_ok = abs(bandit - (-3.0)) < bandit_tol
    ok &= bandit_ok
    print(f"bandit dE[IS^2]/dp1 at p1=0.5: {bandit:.12f} (closed form -3) {'ok' if bandit_ok else 'FAIL'}")
    write_csv(out / "gradcheck.csv",
              ["mdp", "states", "actions", "horizon", "estimator", "max_rel_error", "tolerance", "passed"], table)
    write_manifest(out, "gradcheck", config, {"bandit_p1_gradient": bandit, "passed": bool(ok)})
    worst = max(r["max_rel_error"] for r in rows) if rows else 0.0
    print(f"max relative error {worst:.3e}; {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_TOLERANCE


# ---------------------------------------------------------------------------
# bpg
# ---------------------------------------------------------------------------


def _bpg_trial(job) -> dict:
    env, evaluation, config, trial, with_mc = job
    bcfg = config.bpg_config()
    probe_at = set()
    if config.probe_period > 0:
        probe_at = set(range(0, bcfg.iterations + 1, config.probe_period))
    probe_at.add(bcfg.iterations)
    probes = []

    def cb(i, policy):
        if i in probe_at:
            m, se = probe_variance(env, policy, evaluation, config.probe_samples, config.probe_repeats,
                                   config.seed, trial, i)
            probes.append([trial, i, m, se, exact_variance(env, policy, evaluation)])

    run = bpg_run(env, evaluation, bcfg, trial, callback=cb)
    out = {
        "trial": trial,
        "status": run.status,
        "series": run.series.to_csv(),
        "theta": run.policy.to_json(),
        "estimates": run.series.estimates,
        "final_estimate": run.estimate,
        "initial_variance": exact_variance(env, evaluation, evaluation),
        "final_variance": exact_variance(env, run.policy, evaluation),
        "probes": probes,
        "holdout": float("nan"),
    }
    if config.holdout > 0 and not run.diverged:
        rng = derive_rng(config.seed, _HOLDOUT, trial)
        out["holdout"] = float(is_values(env.sample_batch(run.policy, config.holdout, rng),
                                         evaluation, run.policy).mean())
    if with_mc:
        mc = bpg_run(env, evaluation, config.bpg_config(step_size=0.0), trial)
        out["mc_series"] = mc.series.to_csv()
        out["mc_estimates"] = mc.series.estimates
    return out


def _aggregate_mse(results: list[dict], key: str, rho: float) -> tuple[np.ndarray, int]:
    ok = [r[key] for r in results if r["status"] == "ok"]
    if not ok:
        return np.array([]), 0
    return np.mean((np.vstack(ok) - rho) ** 2, axis=0), len(ok)


def cmd_bpg(config: ExperimentConfig) -> int:
    env = build_environment(config.environment)
    evaluation = build_evaluation_policy(config.evaluation_policy, env)
    rho, rho_se = reference_value(env, evaluation, config)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(env, evaluation, config, t, config.mc_baseline) for t in range(config.trials)]
    results = _map(_bpg_trial, jobs, config.workers)

    probe_rows, trial_rows = [], []
    for r in results:
        t = r["trial"]
        (out / f"trial_{t:03d}.csv").write_text(r["series"])
        (out / f"theta_{t:03d}.json").write_text(r["theta"] + "\n")
        if config.mc_baseline:
            (out / f"mc_trial_{t:03d}.csv").write_text(r["mc_series"])
        probe_rows.extend(r["probes"])
        trial_rows.append([t, r["status"], len(r["estimates"]), r["final_estimate"], r["initial_variance"],
                           r["final_variance"], r["holdout"]])
    write_csv(out / "trials.csv", ["trial", "status", "iterations", "final_estimate", "initial_variance",
                                   "final_variance", "holdout_estimate"], trial_rows)
    write_csv(out / "probe.csv", ["trial", "iteration", "variance", "variance_se", "exact_variance"], probe_rows)

    bpg_mse, n_ok = _aggregate_mse(results, "estimates", rho)
    header = ["iteration", "bpg_mse"]
    cols = [bpg_mse]
    if config.mc_baseline:
        mc_mse, _ = _aggregate_mse([{**r, "status": "ok"} for r in results], "mc_estimates", rho)
        header.append("mc_mse")
        cols.append(mc_mse[: len(bpg_mse)])
    rows = [[i] + [c[i] for c in cols] for i in range(len(bpg_mse))]
    write_csv(out / "aggregate.csv", header, rows)

    write_manifest(out, "bpg", config, {"reference_value": rho, "reference_value_se": rho_se,
                                        "trials_ok": n_ok})
    diverged = sum(r["status"] != "ok" for r in results)
    print(f"rho(pi_e) = {rho!r}; {config.trials - diverged}/{config.trials} trials completed")
    if n_ok:
        line = f"final aggregate MSE: BPG {bpg_mse[-1]:.6g}"
        if config.mc_baseline:
            line += f", on-policy MC {cols[1][-1]:.6g}"
        print(line)
    return EXIT_DIVERGED if diverged == config.trials else EXIT_OK


# ---------------------------------------------------------------------------
# sweep-lr
# ---------------------------------------------------------------------------


def _sweep_job(job) -> dict:
    env, evaluation, config, alpha, trial = job
    bcfg = config.bpg_config(step_size=alpha)
    curve = []
    tabular = _is_tabular(env)

    def cb(i, policy):
        curve.append(exact_variance(env, policy, evaluation) if tabular else np.nan)

    run = bpg_run(env, evaluation, bcfg, trial, callback=cb)
    if not tabular:
        # no exact oracle: fall back to the batch second moment
        curve = list(run.series.sq_moments)
    initial = curve[0]
    blown = any((not np.isfinite(v)) or v > bcfg.divergence_factor * initial for v in curve)
    return {"alpha": alpha, "trial": trial, "curve": curve, "diverged": run.diverged or blown}


def cmd_sweep_lr(config: ExperimentConfig) -> int:
    if not config.step_sizes:
        raise ConfigError("step_sizes must be nonempty")
    env = build_environment(config.environment)
    evaluation = build_evaluation_policy(config.evaluation_policy, env)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(env, evaluation, config, float(a), t) for a in config.step_sizes for t in range(config.trials)]
    results = _map(_sweep_job, jobs, config.workers)
    rows, summary = [], []
    for a in config.step_sizes:
        rs = [r for r in results if r["alpha"] == float(a)]
        for r in rs:
            v0 = r["curve"][0]
            for i, v in enumerate(r["curve"]):
                rows.append([float(a), r["trial"], i, v, (v0 - v) / v0 if v0 > 0 else 0.0, r["diverged"]])
        finals = np.array([r["curve"][-1] for r in rs if not r["diverged"]])
        v0 = rs[0]["curve"][0]
        mean_final = float(finals.mean()) if finals.size else float("nan")
        red = (v0 - mean_final) / v0 if (finals.size and v0 > 0) else float("nan")
        n_div = sum(r["diverged"] for r in rs)
        summary.append([float(a), len(rs), n_div, v0, mean_final, red])
        print(f"alpha {a:g}: relative variance reduction {red:.4f}, diverged {n_div}/{len(rs)}")
    write_csv(out / "sweep.csv", ["alpha", "trial", "iteration", "variance", "relative_reduction", "diverged"], rows)
    write_csv(out / "sweep_summary.csv", ["alpha", "trials", "diverged_trials", "initial_variance",
                                          "final_variance_mean", "relative_reduction"], summary)
    write_manifest(out, "sweep-lr", config, {})
    return EXIT_OK


# ---------------------------------------------------------------------------
# rare-event
# ---------------------------------------------------------------------------


def rare_event_setup(p: float, base) -> tuple[Any, SoftmaxPolicy]:
    """Rare-event gridworld and the base policy with ``pi(UP | start) = p``."""
    env = make_gridworld("rare_event", p=p)
    return env, base.with_action_probability(env.start_state, UP, p)


def _rare_job(job) -> dict:
    base, config, p, trial = job
    env, evaluation = rare_event_setup(p, base)
    run = bpg_run(env, evaluation, config.bpg_config(), trial)
    vi = is_variance_dp(env, evaluation, evaluation)
    vf = is_variance_dp(env, run.policy, evaluation) if not run.diverged else float("inf")
    rel = (vi - vf) / vi if vi > 0 else 0.0
    return {"p": p, "trial": trial, "status": run.status, "v_i": vi, "v_f": vf, "rel": rel}


def relative_decrease_summary(results: list[dict], p: float) -> dict:
    rel = [r["rel"] for r in results if r["p"] == p and r["status"] == "ok"]
    m, lo, hi = mean_ci(rel) if rel else (float("nan"),) * 3
    return {"mean": m, "ci_low": lo, "ci_high": hi, "n": len(rel), "values": np.array(rel)}


def cmd_rare_event(config: ExperimentConfig) -> int:
    ps = [float(p) for p in config.p_values]
    if not ps or any(not 0.0 < p <= 1.0 for p in ps):
        raise ConfigError("p_values must be nonempty and lie in (0, 1]")
    base = build_evaluation_policy(config.evaluation_policy, make_gridworld("det4x4"))
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(base, config, p, t) for p in ps for t in range(config.trials)]
    results = _map(_rare_job, jobs, config.workers)
    rows = [[r["p"], r["trial"], r["status"], r["v_i"], r["v_f"], r["rel"]] for r in results]
    write_csv(out / "rare_event.csv", ["p", "trial", "status", "v_i", "v_f", "relative_decrease"], rows)
    summary = []
    for p in ps:
        env, evaluation = rare_event_setup(p, base)
        vi = is_variance_dp(env, evaluation, evaluation)
        pm, pse = probe_variance(env, evaluation, evaluation, config.probe_samples, config.probe_repeats,
                                 config.seed, int(round(p * 1e6)))
        s = relative_decrease_summary(results, p)
        summary.append([p, vi, pm, pse, s["mean"], s["ci_low"], s["ci_high"], s["n"]])
        print(f"p={p:g}: v_i={vi:.4g} (probe {pm:.4g} +- {pse:.2g}), relative decrease {s['mean']:.4f} "
              f"[{s['ci_low']:.4f}, {s['ci_high']:.4f}]")
    write_csv(out / "rare_event_summary.csv", ["p", "v_i_exact", "v_i_probe", "v_i_probe_se",
                                               "relative_decrease", "ci_low", "ci_high", "trials"], summary)
    write_manifest(out, "rare-event", config, {})
    diverged = sum(r["status"] != "ok" for r in results)
    return EXIT_DIVERGED if diverged == len(results) else EXIT_OK


# ---------------------------------------------------------------------------
# dr-bpg
# ---------------------------------------------------------------------------

ARMS = ("ase_fixed", "ase_update", "drbpg_fixed", "drbpg_update")


def _dr_job(job) -> dict:
    env, evaluation, config, arm, trial = job
    alpha = 0.0 if arm.startswith("ase") else config.bpg_config().step_size
    mode = arm.split("_")[1]
    run = dr_bpg_run(env, evaluation, config.bpg_config(step_size=alpha, estimator="DR", model_mode=mode), trial)
    res = {"arm": arm, "trial": trial, "status": run.status, "series": run.series.to_csv(),
           "estimates": run.series.estimates}
    if mode == "fixed" and _is_tabular(env):
        res["ase_variance"] = dr_variance_dp(env, evaluation, evaluation, run.model)
        res["dr_variance"] = dr_variance_dp(env, run.policy, evaluation, run.model)
    return res


def cmd_dr_bpg(config: ExperimentConfig) -> int:
    env = build_environment(config.environment)
    if not _is_tabular(env):
        raise ConfigError("dr-bpg needs a tabular environment")
    evaluation = build_evaluation_policy(config.evaluation_policy, env)
    rho = policy_value(env, evaluation)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(env, evaluation, config, arm, t) for arm in ARMS for t in range(config.trials)]
    results = _map(_dr_job, jobs, config.workers)
    for r in results:
        (out / f"{r['arm']}_trial_{r['trial']:03d}.csv").write_text(r["series"])
    curves = {}
    for arm in ARMS:
        curves[arm], _ = _aggregate_mse([r for r in results if r["arm"] == arm], "estimates", rho)
    n = min(len(c) for c in curves.values())
    write_csv(out / "dr_bpg_aggregate.csv", ["iteration", *[f"{a}_mse" for a in ARMS]],
              [[i] + [curves[a][i] for a in ARMS] for i in range(n)])
    fixed = [r for r in results if r["arm"] == "drbpg_fixed" and r["status"] == "ok"]
    rows = [[r["trial"], r["ase_variance"], r["dr_variance"],
             (r["ase_variance"] - r["dr_variance"]) / r["ase_variance"]] for r in fixed]
    write_csv(out / "final_variance.csv", ["trial", "ase_variance", "dr_variance", "relative_improvement"], rows)
    if rows:
        m, lo, hi = mean_ci([row[3] for row in rows])
        print(f"fixed model: DR-BPG variance below ASE by {m:.4f} [{lo:.4f}, {hi:.4f}]")
    for a in ARMS:
        if len(curves[a]):
            print(f"{a}: final MSE {curves[a][-1]:.6g}")
    write_manifest(out, "dr-bpg", config, {"reference_value": rho})
    diverged = sum(r["status"] != "ok" for r in results if r["arm"].startswith("drbpg"))
    return EXIT_DIVERGED if diverged == 2 * config.trials else EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "bpg": cmd_bpg,
    "dr-bpg": cmd_dr_bpg,
    "sweep-lr": cmd_sweep_lr,
    "rare-event": cmd_rare_event,
}

