"""Monte Carlo, importance-sampling, doubly-robust and advantage-sum estimators.

Per-trajectory values are computed for whole batches at once; dataset
estimates are plain means over the per-trajectory values, reduced in index
order so results are bitwise reproducible.
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import __version__
from .mdp import Trajectory, TrajectoryBatch
from .policy import _as_batch, cumulative_ratios


@dataclass
class Dataset:
    """Ordered ``(behavior params, batch)`` pairs.

    Each trajectory is always reweighted with the parameters stored next to
    it, never with the current behavior policy.
    """

    entries: list[tuple[np.ndarray | None, TrajectoryBatch]] = field(default_factory=list)

    def add(self, params, batch: TrajectoryBatch) -> None:
        self.entries.append((None if params is None else np.array(params, copy=True), batch))

    def __len__(self) -> int:
        return sum(len(b) for _, b in self.entries)

    def batches(self) -> Iterator[TrajectoryBatch]:
        return (b for _, b in self.entries)

    def trajectories(self) -> Iterator[Trajectory]:
        for _, b in self.entries:
            yield from b


def _behavior(eval_policy, params, behavior):
    if behavior is not None:
        return behavior
    if params is None:
        raise ValueError("trajectory has no recorded behavior parameters")
    return eval_policy.with_params(params)


def _mean(values: list[np.ndarray]) -> float:
    if not values or sum(v.size for v in values) == 0:
        raise ValueError("empty dataset")
    allv = np.concatenate(values)
    return float(allv.sum() / allv.size)


def mc_estimate(dataset: Dataset) -> float:
    """Average discounted return; assumes every entry was collected on-policy."""
    return _mean([b.returns() for b in dataset.batches()])


def is_values(batch, eval_policy, behavior=None) -> np.ndarray:
    """``IS(H) = g(H) * w_e(H) / w_b(H)`` for each trajectory in ``batch``."""
    batch = _as_batch(batch)
    behavior = _behavior(eval_policy, batch.behavior_params, behavior)
    ratio = cumulative_ratios(batch, eval_policy, behavior)[:, -1]
    return batch.returns() * ratio


def is_estimate(traj, eval_policy, behavior=None) -> float:
    return float(is_values(traj, eval_policy, behavior)[0])


def is_estimate_dataset(dataset: Dataset, eval_policy) -> float:
    return _mean([is_values(b, eval_policy, _behavior(eval_policy, p, None)) for p, b in dataset.entries])


def dr_terms(batch, eval_policy, model, behavior=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-step DR pieces ``gamma^t * rho_t * delta_t`` and ``v_hat(0, S_0)``.

    ``delta_t = R_t - q_hat(t, S_t, A_t) + gamma * v_hat(t+1, S_{t+1})``.
    """
    if model.q_hat is None:
        raise ValueError("model has no value tables; call compute_value_tables first")
    batch = _as_batch(batch)
    behavior = _behavior(eval_policy, batch.behavior_params, behavior)
    T = batch.rewards.shape[1]
    t_idx = np.arange(T)[None, :]
    s, a, s2 = batch.states[:, :-1], batch.actions, batch.states[:, 1:]
    delta = batch.rewards - model.q_hat[t_idx, s, a] + model.discount * model.v_hat[t_idx + 1, s2]
    rho = cumulative_ratios(batch, eval_policy, behavior)
    terms = np.where(batch.mask, batch.discounts * rho * delta, 0.0)
    return terms, model.v_hat[0, batch.states[:, 0]]


def dr_values(batch, eval_policy, model, behavior=None) -> np.ndarray:
    terms, v0 = dr_terms(batch, eval_policy, model, behavior)
    return v0 + terms.sum(axis=1)


def dr_estimate(traj, eval_policy, model, behavior=None) -> float:
    return float(dr_values(traj, eval_policy, model, behavior)[0])


def dr_estimate_dataset(dataset: Dataset, eval_policy, model) -> float:
    return _mean([dr_values(b, eval_policy, model, _behavior(eval_policy, p, None)) for p, b in dataset.entries])


def ase_values(batch, model) -> np.ndarray:
    """On-policy advantage sum ``sum_t gamma^t (R_t - q_hat(S_t, A_t) + v_hat(S_t))``."""
    batch = _as_batch(batch)
    T = batch.rewards.shape[1]
    t_idx = np.arange(T)[None, :]
    s = batch.states[:, :-1]
    terms = batch.rewards - model.q_hat[t_idx, s, batch.actions] + model.v_hat[t_idx, s]
    return np.where(batch.mask, terms, 0.0) @ batch.discounts


def ase_estimate(dataset: Dataset, model) -> float:
    return _mean([ase_values(b, model) for b in dataset.batches()])


# ---------------------------------------------------------------------------
# Estimate series
# ---------------------------------------------------------------------------

CSV_HEADER = f"# bps-lab v{__version__}"
CSV_FIELDS = ("iteration", "estimate", "sq_moment", "theta_id", "seed")


@dataclass(frozen=True)
class EstimateRecord:
    iteration: int
    estimate: float
    sq_moment: float
    theta_id: str
    seed: int


@dataclass
class EstimateSeries:
    records: list[EstimateRecord] = field(default_factory=list)

    def append(self, record: EstimateRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("iterations must be strictly increasing")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def estimates(self) -> np.ndarray:
        return np.array([r.estimate for r in self.records])

    @property
    def sq_moments(self) -> np.ndarray:
        return np.array([r.sq_moment for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.records:
            w.writerow([r.iteration, repr(float(r.estimate)), repr(float(r.sq_moment)), r.theta_id, r.seed])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EstimateSeries":
        lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
        series = cls()
        for row in csv.DictReader(lines):
            series.append(EstimateRecord(int(row["iteration"]), float(row["estimate"]),
                                         float(row["sq_moment"]), row["theta_id"], int(row["seed"])))
        return series


def theta_id(params) -> str:
    """Short content hash identifying a parameter snapshot."""
    if params is None:
        return "none"
    return hashlib.sha1(np.ascontiguousarray(params, dtype=float).tobytes()).hexdigest()[:12]
