"""Chauvenet rejection with robust-then-precise technique sequencing.

A run starts with bulk pre-rejection (every point meeting the criterion is
dropped per iteration), then applies individual rejection stages in plan
order, each removing the single most discrepant point per iteration until
none meets the criterion. Rejected points are never reinstated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
from scipy.special import erfc

from .calibration import CorrectionTable, load_table
from .stats import (
    CentralTendency,
    Sample,
    SigmaEstimate,
    Sidedness,
    Technique,
    central_tendency,
    estimate_sigma,
)

SQRT2 = math.sqrt(2.0)


class Symmetry(str, Enum):
    SYMMETRIC = "symmetric"
    MILDLY_ASYMMETRIC = "mildly-asymmetric"


class Contaminants(str, Enum):
    TWO_SIDED = "two-sided"
    ONE_SIDED = "one-sided"
    IN_BETWEEN = "in-between"


@dataclass(frozen=True)
class DistributionAssumption:
    """User-declared shape of the uncontaminated data and of the contaminants."""

    uncontaminated: Symmetry = Symmetry.SYMMETRIC
    contaminants: Contaminants = Contaminants.TWO_SIDED

    def __post_init__(self):
        object.__setattr__(self, "uncontaminated", Symmetry(self.uncontaminated))
        object.__setattr__(self, "contaminants", Contaminants(self.contaminants))


@dataclass(frozen=True)
class Stage:
    mu_kind: CentralTendency
    technique: Technique
    sidedness: Sidedness = Sidedness.TWO_SIDED

    @property
    def name(self) -> str:
        return f"{self.mu_kind.value}+{self.technique.value}/{self.sidedness.value}"


@dataclass(frozen=True)
class TechniquePlan:
    """Bulk stage followed by individual stages, ending with traditional rejection.

    The bulk stage's technique is nominal: its deviation is the larger of
    techniques 1 and 2, which guards against underestimating sigma while
    many points are removed at once.
    """

    bulk: Stage
    stages: tuple[Stage, ...]

    def __post_init__(self):
        last = self.stages[-1]
        if (last.mu_kind, last.technique) != (CentralTendency.MEAN, Technique.STDDEV):
            raise ValueError("the last stage must be mean + standard deviation")


TRADITIONAL = Stage(CentralTendency.MEAN, Technique.STDDEV, Sidedness.TWO_SIDED)

_BEST_OPTION = {
    Contaminants.TWO_SIDED: (CentralTendency.MEDIAN, Technique.T68_3),
    Contaminants.ONE_SIDED: (CentralTendency.MODE, Technique.T68_1),
    Contaminants.IN_BETWEEN: (CentralTendency.MODE, Technique.T68_3),
}


def robust_sidedness(assumption: DistributionAssumption) -> Sidedness:
    if assumption.uncontaminated is Symmetry.MILDLY_ASYMMETRIC:
        return Sidedness.EACH
    if assumption.contaminants is Contaminants.TWO_SIDED:
        return Sidedness.TWO_SIDED
    return Sidedness.SMALLER


def select_plan(assumption: DistributionAssumption) -> TechniquePlan:
    side = robust_sidedness(assumption)
    mu_kind, technique = _BEST_OPTION[assumption.contaminants]
    return TechniquePlan(
        bulk=Stage(mu_kind, Technique.T68_2, side),
        stages=(
            Stage(mu_kind, technique, side),
            Stage(CentralTendency.MEDIAN, Technique.T68_1, side),
            TRADITIONAL,
        ),
    )


def traditional_plan() -> TechniquePlan:
    return TechniquePlan(bulk=Stage(CentralTendency.MEAN, Technique.T68_2), stages=(TRADITIONAL,))


def chauvenet_tail_probability(z) -> np.ndarray | float:
    """Two-sided Gaussian probability of lying more than ``z`` sigma out."""
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("z must be nonnegative")
    p = erfc(z / SQRT2)
    return float(p) if p.ndim == 0 else p


def meets_criterion(n: int, z) -> np.ndarray | bool:
    """True where ``n * P(>|z|) < 0.5``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    hit = n * chauvenet_tail_probability(np.abs(z)) < 0.5
    return bool(hit) if np.ndim(hit) == 0 else hit


def z_scores(residuals: np.ndarray, sigma: SigmaEstimate) -> np.ndarray:
    """|residual| / side-appropriate sigma; zero-width sigma gives 0 or inf."""
    r = np.asarray(residuals, dtype=float)
    s = sigma.per_point(r)
    a = np.abs(r)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = a / s
    return np.where(a == 0, 0.0, np.where(s == 0, np.inf, z))


class RejectionError(RuntimeError):
    """Raised when a run cannot finish; ``stage_log`` holds the history."""

    def __init__(self, message, stage_log=None):
        super().__init__(message)
        self.stage_log = stage_log or []


@dataclass
class RejectionResult:
    kept_indices: np.ndarray
    rejected_indices: np.ndarray
    mu: float
    sigma: SigmaEstimate
    stage_log: list = field(default_factory=list)
    rejection_order: list = field(default_factory=list)
    plan: TechniquePlan | None = None

    @property
    def kept_mask(self) -> np.ndarray:
        mask = np.zeros(self.kept_indices.size + self.rejected_indices.size, dtype=bool)
        mask[self.kept_indices] = True
        return mask


# A center function maps the kept mask and stage to (center summary, residuals for all points).
CenterFn = Callable[[np.ndarray, Stage], tuple[object, np.ndarray]]
# A factor function maps (technique, stage, n_kept) to a correction factor.
FactorFn = Callable[[Technique, Stage, int], float]


def table_factors(table: CorrectionTable, n_params: int = 1) -> FactorFn:
    def factor(technique: Technique, stage: Stage, n: int) -> float:
        if n_params == 1:
            return table.factor(technique, stage.mu_kind, stage.sidedness, n)
        return table.dof_factor(technique, stage.mu_kind, stage.sidedness, n, n_params)

    return factor


def _log(log, phase, stage, iteration, n, center, sigma, rejected):
    log.append({
        "phase": phase,
        "stage": stage.name,
        "iteration": iteration,
        "n": int(n),
        "center": center,
        "sigma_minus": sigma.minus,
        "sigma_plus": sigma.plus,
        "rejected": [int(i) for i in rejected],
    })


def _pick_worst(z: np.ndarray, values: np.ndarray) -> int:
    # ties on z resolve by value, so results don't depend on input order
    tied = np.flatnonzero(z == z.max())
    return int(tied[np.argmax(values[tied])]) if tied.size > 1 else int(tied[0])


def run_bulk(kept, stage: Stage, center_fn: CenterFn, factor_fn: FactorFn, weights, log, order,
             min_points: int = 1):
    """Bulk rejection; mutates ``kept`` and returns the final (center, sigma)."""
    iteration = 0
    while True:
        idx = np.flatnonzero(kept)
        n = idx.size
        center, resid = center_fn(kept, stage)
        r = resid[idx]
        w = None if weights is None else weights[idx]
        s1 = estimate_sigma(r, 0.0, Technique.T68_1, stage.sidedness, w)
        s2 = estimate_sigma(r, 0.0, Technique.T68_2, stage.sidedness, w)
        s1 = s1.scaled(factor_fn(Technique.T68_1, stage, n))
        s2 = s2.scaled(factor_fn(Technique.T68_2, stage, n))
        sigma = SigmaEstimate(max(s1.minus, s2.minus), max(s1.plus, s2.plus), Technique.T68_2, True)
        hit = idx[meets_criterion(n, z_scores(r, sigma))]
        _log(log, "bulk", stage, iteration, n, center, sigma, hit)
        if hit.size == 0:
            return center, sigma
        if n - hit.size < min_points:
            raise RejectionError(f"bulk rejection left fewer than {min_points} points", log)
        kept[hit] = False
        order.extend(int(i) for i in hit)
        iteration += 1


def run_individual(kept, stage: Stage, center_fn: CenterFn, factor_fn: FactorFn, weights, values,
                   log, order, min_points: int = 1):
    """One-at-a-time rejection; mutates ``kept``. Returns (center, sigma) or None if skipped."""
    iteration = 0
    while True:
        idx = np.flatnonzero(kept)
        n = idx.size
        need = max(min_points, 2 if stage.technique is Technique.STDDEV else 1)
        if n < need:
            return None
        center, resid = center_fn(kept, stage)
        r = resid[idx]
        w = None if weights is None else weights[idx]
        sigma = estimate_sigma(r, 0.0, stage.technique, stage.sidedness, w)
        sigma = sigma.scaled(factor_fn(stage.technique, stage, n))
        z = z_scores(r, sigma)
        j = _pick_worst(z, values[idx])
        reject = meets_criterion(n, z[j])
        _log(log, "individual", stage, iteration, n, center, sigma, [idx[j]] if reject else [])
        if not reject:
            return center, sigma
        if n - 1 < min_points:
            raise RejectionError(f"rejection would leave fewer than {min_points} points", log)
        kept[idx[j]] = False
        order.append(int(idx[j]))
        iteration += 1


def _as_sample(sample) -> Sample:
    return sample if isinstance(sample, Sample) else Sample(sample)


def _location_center(sample: Sample) -> CenterFn:
    y, w = sample.values, sample.effective_weights

    def center(kept, stage):
        mu = central_tendency(y[kept], stage.mu_kind, None if w is None else w[kept])
        return mu, y - mu

    return center


def _result(kept, outcome, log, order, plan) -> RejectionResult:
    mu, sigma = outcome
    return RejectionResult(
        kept_indices=np.flatnonzero(kept),
        rejected_indices=np.flatnonzero(~kept),
        mu=float(mu),
        sigma=sigma,
        stage_log=log,
        rejection_order=order,
        plan=plan,
    )


def individual_reject_stage(sample, stage: Stage, table: CorrectionTable | None = None,
                            kept=None) -> RejectionResult:
    """Run a single individual-rejection stage to convergence."""
    sample = _as_sample(sample)
    table = table or load_table()
    kept = np.ones(len(sample), dtype=bool) if kept is None else np.array(kept, dtype=bool)
    log, order = [], []
    outcome = run_individual(kept, stage, _location_center(sample), table_factors(table),
                             sample.effective_weights, sample.values, log, order)
    if outcome is None:
        raise RejectionError(f"stage {stage.name} needs more points", log)
    return _result(kept, outcome, log, order, None)


def bulk_reject(sample, plan: TechniquePlan, table: CorrectionTable | None = None,
                kept=None) -> RejectionResult:
    sample = _as_sample(sample)
    table = table or load_table()
    kept = np.ones(len(sample), dtype=bool) if kept is None else np.array(kept, dtype=bool)
    log, order = [], []
    outcome = run_bulk(kept, plan.bulk, _location_center(sample), table_factors(table),
                       sample.effective_weights, log, order)
    return _result(kept, outcome, log, order, plan)


def run_plan(kept, plan: TechniquePlan, center_fn: CenterFn, factor_fn: FactorFn, weights, values,
             bulk: bool = True, min_points: int = 1):
    """Bulk then individual stages; returns (final center, final sigma, log, order)."""
    log, order = [], []
    outcome = None
    if bulk:
        outcome = run_bulk(kept, plan.bulk, center_fn, factor_fn, weights, log, order, min_points)
    for stage in plan.stages:
        result = run_individual(kept, stage, center_fn, factor_fn, weights, values, log, order,
                                min_points)
        outcome = result or outcome
    if not kept.any():
        raise RejectionError("every point was rejected", log)
    if outcome is None:
        raise RejectionError("no stage could run on this sample", log)
    return outcome[0], outcome[1], log, order


def rcr(sample, assumption: DistributionAssumption | None = None,
        table: CorrectionTable | None = None, bulk: bool = True,
        plan: TechniquePlan | None = None) -> RejectionResult:
    """Robust Chauvenet rejection of a one-dimensional sample.

    ``sample`` may be a :class:`Sample` or a plain sequence of values. The
    reported center and deviation come from the last stage that ran.
    """
    sample = _as_sample(sample)
    plan = plan or select_plan(assumption or DistributionAssumption())
    table = table or load_table()
    kept = np.ones(len(sample), dtype=bool)
    mu, sigma, log, order = run_plan(kept, plan, _location_center(sample), table_factors(table),
                                     sample.effective_weights, sample.values, bulk)
    return _result(kept, (mu, sigma), log, order, plan)


def traditional_cr(sample, table: CorrectionTable | None = None) -> RejectionResult:
    """Plain iterative Chauvenet rejection with the mean and standard deviation."""
    return rcr(sample, table=table, bulk=False, plan=traditional_plan())
