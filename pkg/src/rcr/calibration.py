"""Synthetic contaminated samples and Monte Carlo correction factors.

Correction factors make each deviation estimator unbiased, on average, for
uncontaminated Gaussian samples of size N. They are tabulated on an N grid
by :func:`build_correction_table`, written to a plain-text file, and
interpolated in log N at query time. Runtime code only ever loads the
shipped table; nothing is calibrated implicitly.
"""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import special, stats

from .models import DataSet
from .stats import (
    CentralTendency,
    Sidedness,
    Technique,
    sorted_deviation_set,
    central_tendency,
    estimate_sigma,
    sigma_technique1,
    sigma_technique2,
    sigma_technique3,
)

TABLE_FORMAT = "rcr-correction-table"
TABLE_VERSION = 1
MIN_TRIALS = 1000
ENV_TABLE = "RCR_CORRECTION_TABLE"

PERCENTILE_TECHNIQUES = (Technique.T68_1, Technique.T68_2, Technique.T68_3)
ROBUST_CENTERS = (CentralTendency.MEDIAN, CentralTendency.MODE)
# residuals about a least-squares fit; the reference for degree-of-freedom ratios
LSQ = "lsq"


class Shape(str, Enum):
    GAUSSIAN = "gaussian"
    PEAKED = "peaked"
    FLAT_TOPPED = "flat-topped"
    MILDLY_ASYMMETRIC = "mildly-asymmetric"


class ContaminantKind(str, Enum):
    TWO_SIDED = "two-sided"
    ONE_SIDED = "one-sided"
    IN_BETWEEN = "in-between"


class Mixing(str, Enum):
    REPLACE = "replace"
    ADD = "add"


# exponential-power exponents for the non-normal symmetric shapes
PEAKED_BETA = 1.0
FLAT_TOPPED_BETA = 10.0
ASYMMETRY_RATIO = 1.5


@dataclass(frozen=True)
class Scenario:
    """Recipe for a contaminated one-dimensional sample.

    Contaminants are drawn about ``mu`` with width ``contaminant_sigma``;
    one-sided ones come from the positive half. ``positive_fraction`` is the
    share of in-between contaminants that land on the positive side.
    """

    n_points: int
    contamination: float = 0.0
    shape: Shape = Shape.GAUSSIAN
    mu: float = 0.0
    sigma: float = 1.0
    contaminants: ContaminantKind = ContaminantKind.ONE_SIDED
    contaminant_sigma: float = 10.0
    positive_fraction: float = 0.75
    mixing: Mixing = Mixing.REPLACE
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be at least 1")
        if not 0 <= self.contamination < 1:
            raise ValueError("contamination fraction must lie in [0, 1)")
        if self.sigma <= 0 or self.contaminant_sigma <= 0:
            raise ValueError("widths must be positive")
        for name, kind in (("shape", Shape), ("contaminants", ContaminantKind), ("mixing", Mixing)):
            object.__setattr__(self, name, kind(getattr(self, name)))

    @property
    def n_contaminants(self) -> int:
        return int(round(self.contamination * self.n_points))


def draw_uncontaminated(rng: np.random.Generator, n: int, shape: Shape, mu=0.0, sigma=1.0) -> np.ndarray:
    """``n`` draws with mode ``mu`` and standard deviation ``sigma`` (per side for asymmetric)."""
    shape = Shape(shape)
    if shape is Shape.GAUSSIAN:
        return mu + sigma * rng.standard_normal(n)
    if shape is Shape.MILDLY_ASYMMETRIC:
        upper = rng.random(n) < ASYMMETRY_RATIO / (1 + ASYMMETRY_RATIO)
        mag = np.abs(rng.standard_normal(n))
        return mu + sigma * np.where(upper, ASYMMETRY_RATIO * mag, -mag)
    beta = PEAKED_BETA if shape is Shape.PEAKED else FLAT_TOPPED_BETA
    scale = sigma * math.sqrt(special.gamma(1 / beta) / special.gamma(3 / beta))
    return mu + stats.gennorm.rvs(beta, scale=scale, size=n, random_state=rng)


def draw_contaminants(rng, n, kind: ContaminantKind, width: float, positive_fraction=0.75) -> np.ndarray:
    kind = ContaminantKind(kind)
    draws = width * rng.standard_normal(n)
    if kind is ContaminantKind.TWO_SIDED:
        return draws
    sign = np.ones(n)
    if kind is ContaminantKind.IN_BETWEEN:
        sign = np.where(rng.random(n) < positive_fraction, 1.0, -1.0)
    return sign * np.abs(draws)


def generate_sample(scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Values and a boolean label per point (True marks a contaminant)."""
    rng = np.random.default_rng(scenario.seed)
    n, k = scenario.n_points, scenario.n_contaminants
    values = draw_uncontaminated(rng, n, scenario.shape, scenario.mu, scenario.sigma)
    labels = np.zeros(n, dtype=bool)
    if k:
        idx = np.sort(rng.choice(n, size=k, replace=False))
        labels[idx] = True
        extra = draw_contaminants(
            rng, k, scenario.contaminants, scenario.contaminant_sigma, scenario.positive_fraction
        )
        if scenario.mixing is Mixing.REPLACE:
            values[idx] = scenario.mu + extra
        else:
            values[idx] += extra
    return values, labels


def fig3_scenario(seed: int = 0, n_points: int = 1000, contamination: float = 0.85) -> Scenario:
    """Gaussian core with a majority of positive one-sided contaminants."""
    return Scenario(
        n_points=n_points,
        contamination=contamination,
        contaminants=ContaminantKind.ONE_SIDED,
        contaminant_sigma=10.0,
        mixing=Mixing.REPLACE,
        seed=seed,
    )


FIG4_TRUTH = (10.0, -1.0)
FIG4_PIVOT = 0.5


def fig4_dataset(seed: int = 0, n_points: int = 101, contamination: float = 0.5):
    """Exponential curve ``10 exp(-(x - 0.5))`` with unit noise and added one-sided contaminants.

    Returns ``(data, labels)``; error bars are all one.
    """
    if not 0 <= contamination < 1:
        raise ValueError("contamination fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, n_points)
    b, m = FIG4_TRUTH
    y = b * np.exp(m * (x - FIG4_PIVOT)) + rng.standard_normal(n_points)
    labels = np.zeros(n_points, dtype=bool)
    k = int(round(contamination * n_points))
    if k:
        idx = np.sort(rng.choice(n_points, size=k, replace=False))
        labels[idx] = True
        y[idx] += np.abs(10.0 * rng.standard_normal(k))
    return DataSet(x, y, error_bars=np.ones(n_points)), labels


# ---------------------------------------------------------------------------
# Monte Carlo calibration

DEFAULT_GRID = tuple(range(2, 21)) + tuple(
    int(v) for v in np.unique(np.round(np.logspace(math.log10(25), 5, 23)).astype(int))
)
DEFAULT_MAX_PARAMS = 6
DOF_MAX_N = 2500
SIDES = (Sidedness.TWO_SIDED, Sidedness.EACH, Sidedness.SMALLER)
_KIND_CODE = {CentralTendency.MEAN: 0, CentralTendency.MEDIAN: 1, CentralTendency.MODE: 2, LSQ: 3}


def trial_rng(seed: int, kind, n: int, trial: int, n_params: int = 1) -> np.random.Generator:
    """Independent stream for one trial, derived from the seed and trial index."""
    key = (_KIND_CODE[kind], n_params, n, trial)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


_ESTIMATORS = {
    Technique.T68_1: sigma_technique1,
    Technique.T68_2: sigma_technique2,
    Technique.T68_3: sigma_technique3,
}


def _percentile_estimates(y: np.ndarray, mu: float) -> dict:
    """All percentile techniques and sidedness modes from one set of sorts.

    Matches :func:`rcr.stats.estimate_sigma`; EACH is summarized by the mean
    of its two sides since both share one factor.
    """
    r = y - mu
    order = np.argsort(np.abs(r))
    dev, r = np.abs(r)[order], r[order]
    both = sorted_deviation_set(dev, mu)
    sides = [sorted_deviation_set(dev[m], mu) if m.any() else None for m in (r <= 0, r >= 0)]
    out = {}
    for technique, fn in _ESTIMATORS.items():
        lo, hi = (None if d is None else fn(d).plus for d in sides)
        lo = hi if lo is None else lo
        hi = lo if hi is None else hi
        out[technique, Sidedness.TWO_SIDED] = fn(both).plus
        out[technique, Sidedness.EACH] = 0.5 * (lo + hi)
        out[technique, Sidedness.SMALLER] = min(lo, hi)
    return out


def _check_trials(trials: int):
    if trials < MIN_TRIALS:
        raise ValueError(f"calibration needs at least {MIN_TRIALS} trials, got {trials}")


def simulate_cell_group(n: int, mu_kind, trials: int, seed: int) -> dict:
    """Uncorrected estimates over ``trials`` pure N(0, 1) samples of size ``n``.

    Returns ``{(technique, sidedness): array of per-trial estimates}`` for
    every technique that pairs with ``mu_kind``; techniques share the same
    draws.
    """
    mu_kind = CentralTendency(mu_kind)
    keys, rows = None, []
    for trial in range(trials):
        y = trial_rng(seed, mu_kind, n, trial).standard_normal(n)
        mu = central_tendency(y, mu_kind)
        if mu_kind is CentralTendency.MEAN:
            est = {(Technique.STDDEV, Sidedness.TWO_SIDED): estimate_sigma(y, mu, Technique.STDDEV).plus}
        else:
            est = _percentile_estimates(y, mu)
        keys = keys or list(est)
        rows.append([est[k] for k in keys])
    data = np.asarray(rows)
    return {k: data[:, i] for i, k in enumerate(keys)}


def _lsq_residuals(rng, n: int, n_params: int) -> np.ndarray:
    """Gaussian noise minus its least-squares polynomial fit with ``n_params`` terms."""
    x = np.sort(rng.uniform(0.0, 1.0, n))
    e = rng.standard_normal(n)
    basis = (x - x.mean())[:, None] ** np.arange(n_params)
    q, _ = np.linalg.qr(basis)
    return e - q @ (q.T @ e)


def simulate_lsq_group(n: int, n_params: int, trials: int, seed: int) -> dict:
    """Uncorrected estimates on residuals about an ``n_params`` least-squares fit."""
    if n <= n_params:
        raise ValueError("need more points than parameters")
    keys, rows = None, []
    for trial in range(trials):
        r = _lsq_residuals(trial_rng(seed, LSQ, n, trial, n_params), n, n_params)
        est = _percentile_estimates(r, 0.0)
        est[Technique.STDDEV, Sidedness.TWO_SIDED] = estimate_sigma(r, 0.0, Technique.STDDEV).plus
        keys = keys or list(est)
        rows.append([est[k] for k in keys])
    data = np.asarray(rows)
    return {k: data[:, i] for i, k in enumerate(keys)}


def _factor(samples: np.ndarray) -> tuple[float, float]:
    mean = float(np.mean(samples))
    if mean <= 0:
        raise ValueError("estimator has zero mean; no finite correction exists")
    se = float(np.std(samples, ddof=1) / math.sqrt(samples.size))
    return 1.0 / mean, se / mean**2


def _normalize(technique, mu_kind, sidedness):
    technique = Technique(technique)
    if technique is Technique.STDDEV:
        return technique, CentralTendency.MEAN, Sidedness.TWO_SIDED
    mu_kind = mu_kind if mu_kind == LSQ else CentralTendency(mu_kind)
    return technique, mu_kind, Sidedness(sidedness)


def calibrate_correction_factor(
    n: int,
    technique,
    mu_kind=CentralTendency.MEDIAN,
    sidedness=Sidedness.TWO_SIDED,
    trials: int = MIN_TRIALS,
    seed: int = 0,
) -> float:
    """``1 / mean`` of the uncorrected estimator over pure N(0, 1) samples of size ``n``."""
    _check_trials(trials)
    technique, mu_kind, sidedness = _normalize(technique, mu_kind, sidedness)
    if n < 2:
        raise ValueError("a correction factor needs n >= 2")
    group = simulate_cell_group(n, mu_kind, trials, seed)
    return _factor(group[technique, sidedness])[0]


def calibrate_dof_factor(n: int, n_params: int, technique, sidedness=Sidedness.TWO_SIDED,
                         trials: int = MIN_TRIALS, seed: int = 0) -> float:
    """Correction factor for residuals about an ``n_params`` least-squares fit."""
    _check_trials(trials)
    technique, _, sidedness = _normalize(technique, LSQ, sidedness)
    group = simulate_lsq_group(n, n_params, trials, seed)
    return _factor(group[technique, sidedness])[0]


def write_atomic(path, text: str) -> None:
    """Write through a temporary file and rename, with umask-default permissions."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class CorrectionTable:
    """Tabulated factors keyed by ``(technique, mu_kind, sidedness, n_params)``.

    Each key maps to ascending ``n`` values with factors and their standard
    errors. ``mu_kind == "lsq"`` rows hold least-squares residual factors used
    to form degree-of-freedom ratios.
    """

    cells: dict = field(default_factory=dict)
    trials: int = 0
    seed: int = 0
    version: int = TABLE_VERSION
    source: str = ""

    def add(self, technique, mu_kind, sidedness, n_params, n, factor, stderr=0.0):
        key = (*_normalize(technique, mu_kind, sidedness), int(n_params))
        ns, fs, ses = self.cells.setdefault(key, ([], [], []))
        ns.append(int(n))
        fs.append(float(factor))
        ses.append(float(stderr))

    def _finalize(self):
        for key, (ns, fs, ses) in list(self.cells.items()):
            order = np.argsort(ns)
            self.cells[key] = tuple(np.asarray(v)[order] for v in (ns, fs, ses))

    def grid(self, technique, mu_kind, sidedness, n_params=1) -> tuple[np.ndarray, np.ndarray]:
        key = (*_normalize(technique, mu_kind, sidedness), int(n_params))
        try:
            ns, fs, _ = self.cells[key]
        except KeyError:
            raise KeyError(f"no calibration for {_describe(key)}") from None
        return np.asarray(ns), np.asarray(fs)

    def factor(self, technique, mu_kind=CentralTendency.MEDIAN, sidedness=Sidedness.TWO_SIDED,
               n: int = 1, n_params: int = 1) -> float:
        """Log-N interpolated factor; clamped to the end values outside the grid."""
        ns, fs = self.grid(technique, mu_kind, sidedness, n_params)
        return float(np.interp(math.log(max(n, 1)), np.log(ns), fs))

    def dof_factor(self, technique, mu_kind, sidedness, n: int, n_params: int) -> float:
        """One-dimensional factor scaled for ``n_params`` fitted parameters.

        The scale is the ratio of least-squares residual factors with
        ``n_params`` and with one parameter; it tends to one as N grows, and
        is taken as exactly one above the calibrated range.
        """
        if n <= n_params:
            raise ValueError(f"need more points ({n}) than parameters ({n_params})")
        base = self.factor(technique, mu_kind, sidedness, n)
        if n_params == 1:
            return base
        ns, _ = self.grid(technique, LSQ, sidedness, n_params)
        if n > ns[-1]:
            return base
        ratio = self.factor(technique, LSQ, sidedness, n, n_params) / self.factor(
            technique, LSQ, sidedness, n, 1
        )
        return base * ratio

    # -- persistence -------------------------------------------------------

    def write(self, path):
        """Write atomically (temp file + rename)."""
        write_atomic(path, self.dumps())

    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {TABLE_FORMAT}\n# version: {self.version}\n")
        buf.write(f"# trials: {self.trials}\n# seed: {self.seed}\n")
        buf.write("# factor = 1 / mean uncorrected estimate on N(0,1) samples of size n;\n")
        buf.write("# mu_kind 'lsq' rows are residuals about an n_params least-squares polynomial\n")
        writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
        writer.writerow(["technique", "mu_kind", "sidedness", "n_params", "n", "factor", "stderr"])
        for key in sorted(self.cells, key=_sort_key):
            technique, mu_kind, sidedness, n_params = key
            for n, f, se in zip(*self.cells[key]):
                writer.writerow([technique.value, _kind_name(mu_kind), sidedness.value, n_params,
                                 int(n), repr(float(f)), repr(float(se))])
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str, source: str = "") -> "CorrectionTable":
        meta, body = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                k, _, v = line[1:].partition(":")
                if v:
                    meta[k.strip()] = v.strip()
            elif line.strip():
                body.append(line)
        if not body or not text.startswith(f"# {TABLE_FORMAT}"):
            raise ValueError(f"{source or 'text'} is not a correction table")
        table = cls(trials=int(meta.get("trials", 0)), seed=int(meta.get("seed", 0)),
                    version=int(meta.get("version", TABLE_VERSION)), source=source)
        for row in csv.DictReader(body, delimiter="\t"):
            mu_kind = row["mu_kind"] if row["mu_kind"] == LSQ else CentralTendency(row["mu_kind"])
            table.add(row["technique"], mu_kind, row["sidedness"], int(row["n_params"]),
                      int(row["n"]), float(row["factor"]), float(row["stderr"]))
        table._finalize()
        return table

    @classmethod
    def read(cls, path) -> "CorrectionTable":
        path = Path(path)
        return cls.loads(path.read_text(encoding="utf-8"), source=str(path))


def _kind_name(mu_kind) -> str:
    return mu_kind if mu_kind == LSQ else CentralTendency(mu_kind).value


def _sort_key(key):
    technique, mu_kind, sidedness, n_params = key
    return (_kind_name(mu_kind), technique.value, sidedness.value, n_params)


def _describe(key) -> str:
    technique, mu_kind, sidedness, n_params = key
    return f"{technique.value}/{_kind_name(mu_kind)}/{sidedness.value}/M={n_params}"


def build_correction_table(
    trials: int = 2000,
    seed: int = 0,
    grid=DEFAULT_GRID,
    max_params: int = DEFAULT_MAX_PARAMS,
    dof_max_n: int = DOF_MAX_N,
    progress=None,
    techniques=None,
) -> CorrectionTable:
    """Calibrate every (technique, center, sidedness) cell on ``grid``.

    ``techniques`` limits the output to a subset; centers that pair with none
    of them are not simulated.
    """
    _check_trials(trials)
    grid = sorted({int(n) for n in grid})
    if not grid or grid[0] < 2:
        raise ValueError("grid values must be at least 2")
    wanted = set(Technique) if techniques is None else {Technique(t) for t in techniques}
    kinds = [CentralTendency.MEAN] if Technique.STDDEV in wanted else []
    if wanted - {Technique.STDDEV}:
        kinds += ROBUST_CENTERS
    table = CorrectionTable(trials=trials, seed=seed)
    jobs = [(n, kind) for kind in kinds for n in grid]
    jobs += [(n, m) for m in range(1, max_params + 1) for n in grid if m < n <= dof_max_n]
    for i, (n, kind) in enumerate(jobs):
        if isinstance(kind, CentralTendency):
            group, mu_kind, n_params = simulate_cell_group(n, kind, trials, seed), kind, 1
        else:
            group, mu_kind, n_params = simulate_lsq_group(n, kind, trials, seed), LSQ, kind
        for (technique, side), samples in group.items():
            if technique not in wanted:
                continue
            table.add(technique, mu_kind, side, n_params, n, *_factor(samples))
        if progress is not None:
            progress(i + 1, len(jobs), n, mu_kind, n_params)
    table._finalize()
    return table


@lru_cache(maxsize=8)
def _load_cached(path: str, mtime: float) -> CorrectionTable:
    return CorrectionTable.read(path)


def packaged_table_path() -> Path:
    return Path(str(resources.files("rcr") / "data" / "correction_table.tsv"))


def load_table(path=None) -> CorrectionTable:
    """Load a correction table: explicit path, else ``$RCR_CORRECTION_TABLE``, else the shipped one."""
    path = Path(path or os.environ.get(ENV_TABLE) or packaged_table_path())
    return _load_cached(str(path), path.stat().st_mtime)


def dof_adjusted_factor(n: int, n_params: int, technique, mu_kind=CentralTendency.MEDIAN,
                        sidedness=Sidedness.TWO_SIDED, table: CorrectionTable | None = None) -> float:
    if n <= n_params:
        raise ValueError(f"need more points ({n}) than parameters ({n_params})")
    table = table or load_table()
    return table.dof_factor(technique, mu_kind, sidedness, n, n_params)
