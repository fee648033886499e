"""Model descriptions and data containers for functional rejection.

Model callables share the signature ``f(x, theta, pivot)`` and must
broadcast: ``x`` has shape ``(..., n_dims)``, ``theta`` has shape
``(..., M)`` and the result has the broadcast leading shape. Batched tuple
fits rely on this, evaluating thousands of small systems at once.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

ModelFn = Callable[[np.ndarray, np.ndarray, object], np.ndarray]


@dataclass(frozen=True)
class DataSet:
    """Points ``(x_i, y_i)`` with optional y error bars and weights.

    ``x`` is stored as an ``(N, n_dims)`` array; independent variables are
    taken to be exact.
    """

    x: np.ndarray
    y: np.ndarray
    error_bars: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != y.size:
            raise ValueError("x must have one row per y value")
        if y.size == 0:
            raise ValueError("data set is empty")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("x and y must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        for name in ("error_bars", "weights"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=float).ravel()
            if v.shape != y.shape or not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise ValueError(f"{name} must be positive, finite and one per point")
            object.__setattr__(self, name, v)

    def __len__(self):
        return self.y.size

    @property
    def n_dims(self) -> int:
        return self.x.shape[1]

    @property
    def sigma_y(self) -> np.ndarray:
        """Error bars, or unit error bars when none were given."""
        return np.ones_like(self.y) if self.error_bars is None else self.error_bars

    @property
    def point_weights(self) -> np.ndarray | None:
        """Inverse-variance weights times any explicit weights; None if neither is set."""
        if self.weights is None and self.error_bars is None:
            return None
        w = np.ones_like(self.y) if self.weights is None else self.weights
        return w * self.sigma_y**-2

    @property
    def effective_sigma(self) -> np.ndarray:
        """Error bars shrunk by explicit weights, ``sigma_y / sqrt(w)``."""
        return self.sigma_y if self.weights is None else self.sigma_y / np.sqrt(self.weights)

    def subset(self, index) -> "DataSet":
        take = lambda a: None if a is None else a[index]
        return DataSet(self.x[index], self.y[index], take(self.error_bars), take(self.weights))


@dataclass(frozen=True)
class ModelSpec:
    """An M-parameter model ``y(x | theta)`` with its first derivatives.

    ``initial_guess(x, y, pivot)`` receives a batch of M-point tuples,
    ``x`` of shape ``(K, M, n_dims)`` and ``y`` of shape ``(K, M)``, and
    returns starting parameters of shape ``(K, M)``. Without it the fits
    start from ``default_theta``.
    """

    name: str
    n_params: int
    function: ModelFn
    partials: Sequence[ModelFn]
    n_dims: int = 1
    param_names: tuple[str, ...] = ()
    default_theta: tuple[float, ...] | None = None
    initial_guess: Callable | None = None
    prior: Callable[[np.ndarray], np.ndarray] | None = None
    canonicalize: Callable[[np.ndarray], np.ndarray] | None = None
    pivot: object = None
    uses_pivot: bool = False
    # parameters whose ensemble weights use relative uncertainty, i.e. that of log|theta_j|
    log_weighted: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.partials) != self.n_params:
            raise ValueError("need one partial derivative per parameter")
        if not self.param_names:
            object.__setattr__(self, "param_names", tuple(f"p{j}" for j in range(self.n_params)))

    def evaluate(self, x, theta) -> np.ndarray:
        return self.function(np.asarray(x, float), np.asarray(theta, float), self.pivot)

    def jacobian(self, x, theta) -> np.ndarray:
        """Derivatives with respect to theta, stacked on a trailing axis."""
        x, theta = np.asarray(x, float), np.asarray(theta, float)
        cols = [np.broadcast_to(p(x, theta, self.pivot), np.shape(self.function(x, theta, self.pivot)))
                for p in self.partials]
        return np.stack(cols, axis=-1)

    def canonical(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return theta if self.canonicalize is None else self.canonicalize(theta)

    def starting_point(self, x_tuples, y_tuples) -> np.ndarray:
        k = y_tuples.shape[0]
        if self.initial_guess is not None:
            return np.asarray(self.initial_guess(x_tuples, y_tuples, self.pivot), dtype=float)
        base = self.default_theta or (1.0,) * self.n_params
        return np.tile(np.asarray(base, dtype=float), (k, 1))

    def with_pivot(self, pivot) -> "ModelSpec":
        return dataclasses.replace(self, pivot=pivot)

    def with_prior(self, prior) -> "ModelSpec":
        return dataclasses.replace(self, prior=prior)


def compute_pivot(data: DataSet):
    """Weighted mean of the independent variable(s).

    Returns a float for one-dimensional ``x``, else one value per dimension.
    """
    w = data.point_weights
    w = np.ones(len(data)) if w is None else w
    xbar = np.sum(w[:, None] * data.x, axis=0) / np.sum(w)
    return float(xbar[0]) if xbar.size == 1 else xbar


def _x(x):
    return x[..., 0]


def _pv(pivot, default=0.0):
    return default if pivot is None else float(np.ravel(pivot)[0])


def _shift(x, pivot):
    return _x(x) - _pv(pivot)


def _polynomial_guess(x, y, pivot):
    """Exact polynomial through each tuple, in powers of (x - pivot)."""
    u = _shift(x, pivot)
    m = y.shape[-1]
    vander = u[..., None] ** np.arange(m)
    guess = np.zeros(y.shape)
    ok = np.abs(np.linalg.det(vander)) > 1e-300
    if np.any(ok):
        guess[ok] = np.linalg.solve(vander[ok], y[ok][..., None])[..., 0]
    return guess


def linear(pivot=None) -> ModelSpec:
    """``y = a + b (x - pivot)``."""
    return ModelSpec(
        name="linear",
        n_params=2,
        function=lambda x, t, p: t[..., 0] + t[..., 1] * _shift(x, p),
        partials=(lambda x, t, p: np.ones_like(_x(x)), lambda x, t, p: _shift(x, p)),
        param_names=("a", "b"),
        initial_guess=_polynomial_guess,
        pivot=pivot,
        uses_pivot=True,
    )


def quadratic(pivot=None) -> ModelSpec:
    """``y = a + b (x - pivot) + c (x - pivot)**2``."""
    return ModelSpec(
        name="quadratic",
        n_params=3,
        function=lambda x, t, p: t[..., 0] + t[..., 1] * _shift(x, p) + t[..., 2] * _shift(x, p) ** 2,
        partials=(
            lambda x, t, p: np.ones_like(_x(x)),
            lambda x, t, p: _shift(x, p),
            lambda x, t, p: _shift(x, p) ** 2,
        ),
        param_names=("a", "b", "c"),
        initial_guess=_polynomial_guess,
        pivot=pivot,
        uses_pivot=True,
    )


def _log_linear_guess(u, y):
    # two-point solution of log|y| = log|b| + m u, sign carried by the first point
    u0, u1 = u[..., 0], u[..., 1]
    y0, y1 = y[..., 0], y[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        m = np.log(np.abs(y0) / np.abs(y1)) / (u0 - u1)
        b = y0 * np.exp(-m * u0)
    m = np.where(np.isfinite(m), m, 0.0)
    b = np.where(np.isfinite(b), b, np.mean(y, axis=-1))
    return b, m


def exponential(pivot=None) -> ModelSpec:
    """``y = b exp(m (x - pivot))``."""

    def f(x, t, p):
        return t[..., 0] * np.exp(t[..., 1] * _shift(x, p))

    def guess(x, y, p):
        b, m = _log_linear_guess(_shift(x, p), y)
        return np.stack([b, m], axis=-1)

    return ModelSpec(
        name="exponential",
        n_params=2,
        function=f,
        partials=(
            lambda x, t, p: np.exp(t[..., 1] * _shift(x, p)),
            lambda x, t, p: _shift(x, p) * f(x, t, p),
        ),
        param_names=("b", "m"),
        initial_guess=guess,
        pivot=pivot,
        uses_pivot=True,
        log_weighted=(0,),
    )


def power_law(pivot=None) -> ModelSpec:
    """``y = a (x / pivot)**b`` for positive x."""

    def ratio(x, p):
        return _x(x) / _pv(p, 1.0)

    def f(x, t, p):
        return t[..., 0] * ratio(x, p) ** t[..., 1]

    def guess(x, y, p):
        with np.errstate(divide="ignore", invalid="ignore"):
            a, b = _log_linear_guess(np.log(ratio(x, p)), y)
        return np.stack([a, b], axis=-1)

    return ModelSpec(
        name="power-law",
        n_params=2,
        function=f,
        partials=(
            lambda x, t, p: ratio(x, p) ** t[..., 1],
            lambda x, t, p: f(x, t, p) * np.log(ratio(x, p)),
        ),
        param_names=("a", "b"),
        initial_guess=guess,
        pivot=pivot,
        uses_pivot=True,
        log_weighted=(0,),
    )


def canonicalize_sinusoid(theta) -> np.ndarray:
    """Map ``(b, m, x0)`` of ``b sin(m (x - x0))`` to its simplest form.

    The result has ``m >= 0`` and ``m |x0| < pi``. Parameters with ``m == 0``
    are returned unchanged.
    """
    t = np.array(theta, dtype=float, copy=True)
    b, m, x0 = t[..., 0], t[..., 1], t[..., 2]
    flip = m < 0
    m = np.where(flip, -m, m)
    b = np.where(flip, -b, b)
    live = m != 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):  # tiny m gives an infinite period
        phase = m * np.abs(x0)
        period = np.where(live, 2 * np.pi / np.where(live, m, 1.0), 0.0)
        turns = np.floor(phase / (2 * np.pi))
        x0 = np.where(live & (phase >= 2 * np.pi), x0 - np.sign(x0) * period * turns, x0)
        for _ in range(2):  # second pass only absorbs rounding at the pi boundary
            half = live & (m * np.abs(x0) >= np.pi)
            x0 = np.where(half, x0 - np.sign(x0) * period / 2, x0)
            b = np.where(half, -b, b)
    t[..., 0], t[..., 1], t[..., 2] = b, m, x0
    return t


def sinusoid() -> ModelSpec:
    """``y = b sin(m (x - x0))`` with canonicalized solutions."""

    def arg(x, t):
        return t[..., 1] * (_x(x) - t[..., 2])

    def guess(x, y, p):
        k = y.shape[0]
        span = np.ptp(_x(x), axis=-1)
        m = np.where(span > 0, np.pi / np.where(span > 0, span, 1.0), 1.0)
        return np.stack([np.max(np.abs(y), axis=-1), m, np.zeros(k)], axis=-1)

    return ModelSpec(
        name="sinusoid",
        n_params=3,
        function=lambda x, t, p: t[..., 0] * np.sin(arg(x, t)),
        partials=(
            lambda x, t, p: np.sin(arg(x, t)),
            lambda x, t, p: t[..., 0] * (_x(x) - t[..., 2]) * np.cos(arg(x, t)),
            lambda x, t, p: -t[..., 0] * t[..., 1] * np.cos(arg(x, t)),
        ),
        param_names=("b", "m", "x0"),
        initial_guess=guess,
        canonicalize=canonicalize_sinusoid,
    )


BUILTIN_MODELS: dict[str, Callable[..., ModelSpec]] = {
    "linear": linear,
    "quadratic": quadratic,
    "power-law": power_law,
    "exponential": exponential,
    "sinusoid": sinusoid,
}


def get_model(name: str, pivot=None) -> ModelSpec:
    try:
        factory = BUILTIN_MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}") from None
    model = factory() if name == "sinusoid" else factory(pivot)
    return model


def gaussian_prior(means, sigmas) -> Callable[[np.ndarray], np.ndarray]:
    """Independent Gaussian priors; ``nan`` entries leave a parameter unconstrained."""
    mu = np.asarray(means, dtype=float)
    sd = np.asarray(sigmas, dtype=float)
    free = np.isnan(mu) | np.isnan(sd)
    mu, sd = np.where(free, 0.0, mu), np.where(free, 1.0, sd)

    def density(theta):
        z = (np.asarray(theta, float) - mu) / sd
        return np.exp(-0.5 * np.sum(np.where(free, 0.0, z * z), axis=-1))

    return density


def uniform_prior(lower, upper) -> Callable[[np.ndarray], np.ndarray]:
    """Flat prior on a box; ``nan`` bounds are open."""
    lo = np.nan_to_num(np.asarray(lower, dtype=float), nan=-math.inf)
    hi = np.nan_to_num(np.asarray(upper, dtype=float), nan=math.inf)

    def density(theta):
        t = np.asarray(theta, float)
        return np.all((t >= lo) & (t <= hi), axis=-1).astype(float)

    return density
