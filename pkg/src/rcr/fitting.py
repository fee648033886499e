"""Functional rejection: robust model fitting over M-tuple solution ensembles."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations

import numpy as np

from .calibration import CorrectionTable, load_table
from .models import DataSet, ModelSpec, compute_pivot
from .rejection import (
    DistributionAssumption,
    RejectionError,
    Stage,
    TechniquePlan,
    run_plan,
    select_plan,
    table_factors,
)
from .stats import CentralTendency, SigmaEstimate, narrowest_half_window, weighted_median

DRAW_BUDGET = 20000
MAX_ITER = 50
STEP_TOL = 1e-10
COND_LIMIT = 1e12
TUPLE_RESIDUAL_TOL = 1e-8
SCATTER_RATIO = 3.0


class FitError(RuntimeError):
    pass


class DegenerateTupleError(FitError):
    pass


class NonConvergedError(FitError):
    pass


class ScatterWarning(UserWarning):
    """Residual scatter changes strongly with x; constant scatter is assumed."""


class EnsembleKind(str, Enum):
    MLE = "mle"
    MEDIAN = "median"
    MODE = "mode"


_FROM_CENTER = {
    CentralTendency.MEAN: EnsembleKind.MLE,
    CentralTendency.MEDIAN: EnsembleKind.MEDIAN,
    CentralTendency.MODE: EnsembleKind.MODE,
}


def chi_squared(model: ModelSpec, data: DataSet, theta) -> float:
    """Sum of squared error-bar-normalized residuals; unit error bars if none."""
    r = (data.y - model.evaluate(data.x, theta)) / data.effective_sigma
    return float(np.sum(r * r))


def _gauss_newton_batch(model: ModelSpec, x, y, s, theta0):
    """Gauss-Newton on K independent systems.

    ``x`` is (K, m, n_dims), ``y`` and ``s`` are (K, m), ``theta0`` is (K, M).
    Returns theta plus boolean masks for converged and degenerate systems.
    """
    theta = np.array(theta0, dtype=float, copy=True)
    k, m = y.shape
    square = m == model.n_params
    active = np.all(np.isfinite(theta), axis=1)
    converged = np.zeros(k, dtype=bool)
    degenerate = ~active
    for _ in range(MAX_ITER):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        th = theta[idx][:, None, :]
        with np.errstate(all="ignore"):
            r = (y[idx] - model.function(x[idx], th, model.pivot)) / s[idx]
            a = model.jacobian(x[idx], th) / s[idx][..., None]
        finite = np.all(np.isfinite(a), axis=(1, 2)) & np.all(np.isfinite(r), axis=1)
        cond = np.full(idx.size, np.inf)
        if np.any(finite):
            cond[finite] = np.linalg.cond(a[finite])
        bad = ~(cond < COND_LIMIT)
        degenerate[idx[bad]] = True
        active[idx[bad]] = False
        ok = ~bad
        idx, a, r = idx[ok], a[ok], r[ok]
        if idx.size == 0:
            break
        if square:
            step = np.linalg.solve(a, r[..., None])[..., 0]
        else:
            at = np.swapaxes(a, 1, 2)
            step = np.linalg.solve(at @ a, (at @ r[..., None]))[..., 0]
        theta[idx] += step
        norm_t = np.linalg.norm(theta[idx], axis=1)
        done = np.linalg.norm(step, axis=1) <= STEP_TOL * (norm_t + STEP_TOL)
        lost = ~np.all(np.isfinite(theta[idx]), axis=1)
        converged[idx[done & ~lost]] = True
        active[idx[done | lost]] = False
    return theta, converged, degenerate


def gauss_newton_fit(model: ModelSpec, data: DataSet, theta0, index=None) -> np.ndarray:
    """Least-squares fit of ``model`` to ``data`` (or the points in ``index``).

    Raises :class:`DegenerateTupleError` on a singular normal matrix and
    :class:`NonConvergedError` when the step does not settle.
    """
    idx = np.arange(len(data)) if index is None else np.asarray(index)
    if idx.size < model.n_params:
        raise DegenerateTupleError(f"need at least {model.n_params} points")
    theta, conv, degen = _gauss_newton_batch(
        model, data.x[idx][None], data.y[idx][None], data.effective_sigma[idx][None],
        np.asarray(theta0, dtype=float)[None],
    )
    if degen[0]:
        raise DegenerateTupleError("singular normal matrix")
    if not conv[0]:
        raise NonConvergedError(f"no convergence in {MAX_ITER} iterations")
    return model.canonical(theta[0])


def _propagate(model: ModelSpec, x, s, theta) -> np.ndarray:
    jac = model.jacobian(x, theta[:, None, :])
    inv = np.linalg.inv(jac)
    return np.sqrt(np.sum(inv**2 * (s**2)[:, None, :], axis=-1))


def parameter_uncertainties(model: ModelSpec, x_tuple, sigma_tuple, theta) -> np.ndarray:
    """Error bars of an exact M-point solution, propagated through the inverse Jacobian."""
    x = np.asarray(x_tuple, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    s = np.asarray(sigma_tuple, dtype=float).ravel()
    theta = np.asarray(theta, dtype=float)
    jac = model.jacobian(x[None], theta[None, None, :])[0]
    if not np.all(np.isfinite(jac)) or np.linalg.cond(jac) >= COND_LIMIT:
        raise DegenerateTupleError("singular Jacobian")
    return _propagate(model, x[None], s[None], theta[None])[0]


@dataclass(frozen=True)
class ParameterSolution:
    theta: np.ndarray
    sigma_theta: np.ndarray
    weight_theta: np.ndarray
    source_tuple: tuple[int, ...]


@dataclass
class ParameterEnsemble:
    """Exact solutions of M-point tuples, stored column-wise.

    ``tuples`` holds indices into the full data set. ``n_candidates`` counts
    the tuples attempted, so ``n_candidates - len(self)`` were dropped as
    degenerate.
    """

    theta: np.ndarray
    sigma_theta: np.ndarray
    weights: np.ndarray
    tuples: np.ndarray
    exhaustive: bool
    n_candidates: int

    def __len__(self):
        return self.theta.shape[0]

    @property
    def n_degenerate(self) -> int:
        return self.n_candidates - len(self)

    @property
    def solutions(self) -> list[ParameterSolution]:
        return [
            ParameterSolution(self.theta[i], self.sigma_theta[i], self.weights[i],
                              tuple(int(j) for j in self.tuples[i]))
            for i in range(len(self))
        ]

    def restrict(self, kept: np.ndarray) -> "ParameterEnsemble":
        """Solutions whose tuples lie entirely inside the ``kept`` mask."""
        sel = np.all(kept[self.tuples], axis=1)
        return ParameterEnsemble(self.theta[sel], self.sigma_theta[sel], self.weights[sel],
                                 self.tuples[sel], self.exhaustive, int(sel.sum()))

    def summary(self) -> dict:
        return {"size": len(self), "exhaustive": self.exhaustive, "degenerate": self.n_degenerate}


def _draw_tuples(rng, n: int, m: int, p: np.ndarray, count: int) -> np.ndarray:
    """``count`` distinct sorted m-subsets, points drawn without replacement in proportion to ``p``."""
    logp = np.log(p)
    found = np.empty((0, m), dtype=np.int64)
    for _ in range(1000):
        need = count - found.shape[0]
        if need <= 0:
            break
        keys = logp + rng.gumbel(size=(2 * need + 16, n))
        pick = np.sort(np.argpartition(-keys, m - 1, axis=1)[:, :m], axis=1)
        merged = np.concatenate([found, pick])
        _, first = np.unique(merged, axis=0, return_index=True)
        found = merged[np.sort(first)][:count]
    return found


def all_tuples(n: int, m: int) -> np.ndarray:
    """Every sorted m-subset of ``range(n)``, one per row."""
    return np.array(list(combinations(range(n), m)), dtype=np.int64).reshape(-1, m)


def fit_tuples(model: ModelSpec, data: DataSet, tuples: np.ndarray, exhaustive: bool) -> ParameterEnsemble:
    x, y, s = data.x[tuples], data.y[tuples], data.effective_sigma[tuples]
    with np.errstate(all="ignore"):
        theta0 = model.starting_point(x, y)
    theta, conv, _ = _gauss_newton_batch(model, x, y, s, theta0)
    ok = conv.copy()
    if np.any(ok):
        with np.errstate(all="ignore"):
            resid = np.abs(y[ok] - model.function(x[ok], theta[ok][:, None, :], model.pivot))
        scale = np.maximum(1.0, np.max(np.abs(y[ok]), axis=1))
        ok[ok] = np.all(resid <= TUPLE_RESIDUAL_TOL * scale[:, None], axis=1)
    sig = np.full(theta.shape, np.nan)
    if np.any(ok):
        with np.errstate(all="ignore"):
            sig[ok] = _propagate(model, x[ok], s[ok], theta[ok])
        ok &= np.all(np.isfinite(sig), axis=1) & np.all(sig > 0, axis=1)
        for j in model.log_weighted:
            ok &= theta[:, j] != 0
    theta = model.canonical(theta[ok]) if np.any(ok) else theta[ok]
    rel = np.ones_like(theta)
    for j in model.log_weighted:
        rel[:, j] = np.abs(theta[:, j])
    weights = (sig[ok] / rel) ** -2
    if model.prior is not None and np.any(ok):
        weights = weights * np.asarray(model.prior(theta), dtype=float)[:, None]
    return ParameterEnsemble(theta, sig[ok], weights, tuples[ok], exhaustive, int(tuples.shape[0]))


def enumerate_solutions(model: ModelSpec, data: DataSet, budget: int = DRAW_BUDGET, seed: int = 0,
                        index=None) -> ParameterEnsemble:
    """All M-tuple solutions, or ``budget`` weighted draws when there are too many tuples.

    ``index`` restricts the candidate points; tuple indices always refer to
    the full data set.
    """
    idx = np.arange(len(data)) if index is None else np.asarray(index, dtype=np.int64)
    m = model.n_params
    if idx.size < m:
        raise FitError(f"need at least {m} points to form a tuple")
    if math.comb(idx.size, m) <= budget:
        local = all_tuples(idx.size, m)
        exhaustive = True
    else:
        w = data.point_weights
        p = np.ones(idx.size) if w is None else w[idx]
        local = _draw_tuples(np.random.default_rng(seed), idx.size, m, p / p.sum(), budget)
        exhaustive = False
    ens = fit_tuples(model, data, idx[local], exhaustive)
    if len(ens) == 0:
        raise FitError("every tuple was degenerate")
    return ens


def _usable(ens: ParameterEnsemble) -> tuple[np.ndarray, np.ndarray]:
    keep = np.all(ens.weights > 0, axis=1) & np.all(np.isfinite(ens.weights), axis=1)
    if not np.any(keep):
        raise FitError("ensemble has zero total weight")
    return ens.theta[keep], ens.weights[keep]


def ensemble_median(ens: ParameterEnsemble) -> np.ndarray:
    theta, w = _usable(ens)
    return np.array([weighted_median(theta[:, j], w[:, j]) for j in range(theta.shape[1])])


def ensemble_mode(ens: ParameterEnsemble) -> np.ndarray:
    """Half-sample mode in parameter space.

    Cycles through the parameters, each time keeping the solutions inside
    the narrowest interval of that parameter holding half of its weight,
    until two or fewer solutions remain or a sweep stops shrinking the set.
    """
    theta, w = _usable(ens)
    m = theta.shape[1]
    while True:
        before = theta.shape[0]
        for j in range(m):
            if theta.shape[0] <= 2:
                break
            order = np.argsort(theta[:, j], kind="stable")
            col = theta[order, j]
            if col[-1] == col[0]:
                continue
            lo, hi = narrowest_half_window(col, w[order, j])
            sel = order[lo:hi]
            theta, w = theta[sel], w[sel]
        if theta.shape[0] <= 2 or theta.shape[0] == before:
            break
    if theta.shape[0] <= 2:
        return np.sum(w * theta, axis=0) / np.sum(w, axis=0)
    return np.array([weighted_median(theta[:, j], w[:, j]) for j in range(m)])


def ensemble_central_tendency(ens: ParameterEnsemble | None, kind: EnsembleKind | str,
                              model: ModelSpec | None = None, data: DataSet | None = None,
                              index=None, theta0=None) -> np.ndarray:
    """Parameter-space analogue of mean (MLE), median and mode."""
    kind = EnsembleKind(kind)
    if kind is EnsembleKind.MEDIAN:
        theta = ensemble_median(ens)
    elif kind is EnsembleKind.MODE:
        theta = ensemble_mode(ens)
    else:
        if model is None or data is None:
            raise ValueError("the MLE needs the model and the data")
        start = ensemble_median(ens) if theta0 is None else theta0
        return gauss_newton_fit(model, data, start, index)
    return model.canonical(theta) if model is not None else theta


class _EnsembleCache:
    """Ensembles over the kept points; exhaustive ones are enumerated once and filtered."""

    def __init__(self, model, data, budget, seed):
        self.model, self.data, self.budget, self.seed = model, data, budget, seed
        self.base: ParameterEnsemble | None = None
        self.draws = 0

    def get(self, kept: np.ndarray) -> ParameterEnsemble:
        n = int(kept.sum())
        if self.base is not None:
            ens = self.base.restrict(kept)
            if self.base.exhaustive or len(ens) >= self.budget // 2:
                if len(ens) == 0:
                    raise FitError("no nondegenerate tuples among the kept points")
                return ens
        exhaustive = math.comb(n, self.model.n_params) <= self.budget
        seed = np.random.SeedSequence(self.seed, spawn_key=(self.draws,))
        self.draws += 0 if exhaustive else 1
        self.base = enumerate_solutions(self.model, self.data, self.budget,
                                        int(seed.generate_state(1)[0]), np.flatnonzero(kept))
        return self.base


@dataclass
class FitResult:
    theta_best: np.ndarray
    kept_indices: np.ndarray
    rejected_indices: np.ndarray
    sigma: SigmaEstimate
    stage_log: list = field(default_factory=list)
    rejection_order: list = field(default_factory=list)
    initial: dict = field(default_factory=dict)
    ensemble: dict = field(default_factory=dict)
    final_ensemble: ParameterEnsemble | None = None
    pivot: object = None
    warnings: list = field(default_factory=list)
    plan: TechniquePlan | None = None

    @property
    def residual_sigma(self) -> float:
        return self.sigma.sigma if not self.sigma.asymmetric else max(self.sigma.minus, self.sigma.plus)


def scatter_ratio(x: np.ndarray, residuals: np.ndarray, min_per_bin: int = 20, max_bins: int = 10) -> float:
    """Largest over smallest residual RMS across x-quantile bins.

    Bins hold at least ``min_per_bin`` points so that chance alone rarely
    moves the ratio far from one; fewer than two bins gives 1.
    """
    bins = min(max_bins, x.size // min_per_bin)
    if bins < 2:
        return 1.0
    edges = np.quantile(x, np.linspace(0, 1, bins + 1))
    which = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, bins - 1)
    rms = [math.sqrt(np.mean(residuals[which == b] ** 2)) for b in range(bins) if np.any(which == b)]
    rms = [v for v in rms if v > 0]
    return max(rms) / min(rms) if len(rms) >= 2 else 1.0


def functional_rcr(model: ModelSpec, data: DataSet, assumption: DistributionAssumption | None = None,
                   table: CorrectionTable | None = None, bulk: bool = True, budget: int = DRAW_BUDGET,
                   seed: int = 0, plan: TechniquePlan | None = None) -> FitResult:
    """Robust rejection about a fitted model.

    Each stage's center is a parameter vector: the ensemble mode or median,
    or the maximum-likelihood fit in place of the mean. The returned
    ``theta_best`` is the maximum-likelihood fit to the kept points.
    """
    m = model.n_params
    if len(data) <= m:
        raise FitError(f"need more points ({len(data)}) than parameters ({m})")
    if model.uses_pivot and model.pivot is None:
        model = model.with_pivot(compute_pivot(data))
    plan = plan or select_plan(assumption or DistributionAssumption())
    table = table or load_table()
    cache = _EnsembleCache(model, data, budget, seed)
    x_all = data.x
    last: dict = {}

    def center(kept: np.ndarray, stage: Stage):
        ens = cache.get(kept)
        kind = _FROM_CENTER[stage.mu_kind]
        theta0 = last.get("theta") if kind is EnsembleKind.MLE else None
        theta = ensemble_central_tendency(ens, kind, model, data, np.flatnonzero(kept), theta0)
        last["theta"] = theta
        return [float(t) for t in theta], data.y - model.evaluate(x_all, theta)

    full = np.ones(len(data), dtype=bool)
    first = cache.get(full)
    initial = {k.value: ensemble_central_tendency(first, k, model, data) for k in EnsembleKind}
    ensemble_info = first.summary()

    kept = full.copy()
    try:
        _, sigma, log, order = run_plan(kept, plan, center, table_factors(table, m), data.point_weights,
                                        data.y, bulk, min_points=m + 1)
    except FitError as exc:
        raise RejectionError(str(exc)) from exc
    idx = np.flatnonzero(kept)
    start = last.get("theta", initial[EnsembleKind.MLE.value])
    theta_best = gauss_newton_fit(model, data, start, idx)
    notes = []
    ratio = scatter_ratio(x_all[idx, 0], data.y[idx] - model.evaluate(x_all[idx], theta_best))
    if ratio > SCATTER_RATIO:
        msg = f"residual scatter varies {ratio:.1f}x across x; constant scatter is assumed"
        warnings.warn(msg, ScatterWarning, stacklevel=2)
        notes.append(msg)
    return FitResult(
        theta_best=theta_best,
        kept_indices=idx,
        rejected_indices=np.flatnonzero(~kept),
        sigma=sigma,
        stage_log=log,
        rejection_order=order,
        initial=initial,
        ensemble=ensemble_info,
        final_ensemble=cache.get(kept),
        pivot=model.pivot,
        warnings=notes,
        plan=plan,
    )
