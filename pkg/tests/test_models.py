import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcr.models import (
    BUILTIN_MODELS,
    DataSet,
    canonicalize_sinusoid,
    compute_pivot,
    gaussian_prior,
    get_model,
    uniform_prior,
)

THETAS = {
    "linear": [1.5, -0.7],
    "quadratic": [0.3, 1.2, -0.8],
    "power-law": [2.0, 1.7],
    "exponential": [10.0, -1.0],
    "sinusoid": [1.3, 2.1, 0.4],
}


def test_dataset_validation():
    with pytest.raises(ValueError):
        DataSet([0, 1], [1.0])
    with pytest.raises(ValueError):
        DataSet([0, 1], [1.0, np.inf])
    with pytest.raises(ValueError):
        DataSet([0, 1], [1.0, 2.0], error_bars=[1.0, -1.0])
    with pytest.raises(ValueError):
        DataSet([], [])
    d = DataSet([[0, 1], [2, 3]], [1.0, 2.0])
    assert d.n_dims == 2 and d.point_weights is None


def test_point_weights_combine_error_bars_and_weights():
    d = DataSet([0, 1], [1.0, 2.0], error_bars=[2.0, 1.0], weights=[4.0, 1.0])
    assert d.point_weights.tolist() == [1.0, 1.0]
    assert d.effective_sigma.tolist() == [1.0, 1.0]


def test_pivot_examples():
    assert compute_pivot(DataSet([0, 1], [0, 0])) == 0.5
    assert compute_pivot(DataSet([2.5] * 4, [0, 1, 2, 3])) == 2.5
    assert compute_pivot(DataSet([0, 1], [0, 0], weights=[3, 1])) == 0.25
    assert compute_pivot(DataSet([[0, 2], [2, 4]], [0, 0])).tolist() == [1.0, 3.0]


@pytest.mark.parametrize("name", sorted(BUILTIN_MODELS))
def test_partials_match_finite_differences(name):
    model = get_model(name, 0.4 if name != "power-law" else 1.3)
    x = np.linspace(0.2, 2.0, 9)[:, None]
    theta = np.array(THETAS[name])
    jac = model.jacobian(x, theta)
    for j in range(model.n_params):
        h = 1e-6 * max(1.0, abs(theta[j]))
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        fd = (model.evaluate(x, up) - model.evaluate(x, down)) / (2 * h)
        np.testing.assert_allclose(jac[:, j], fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("name", sorted(BUILTIN_MODELS))
def test_initial_guess_shape(name):
    model = get_model(name, 0.5)
    x = np.random.default_rng(0).uniform(0.1, 1, (7, model.n_params, 1))
    y = model.evaluate(x, np.array(THETAS[name]))
    guess = model.starting_point(x, y)
    assert guess.shape == (7, model.n_params)


def test_unknown_model():
    with pytest.raises(ValueError):
        get_model("cubic")


def test_exponential_form():
    m = get_model("exponential", 0.5)
    assert m.evaluate(np.array([[0.5], [1.5]]), [10.0, -1.0]).tolist() == pytest.approx([10.0, 10 / math.e])


def test_sinusoid_negative_frequency():
    assert canonicalize_sinusoid([1.0, -2.0, 0.0]).tolist() == [-1.0, 2.0, 0.0]


def test_sinusoid_phase_reduction():
    b, m, x0 = canonicalize_sinusoid([1.0, 1.0, 2 * math.pi + 0.3])
    assert (b, m) == (1.0, 1.0)
    assert x0 == pytest.approx(0.3)


def test_sinusoid_zero_frequency_unchanged():
    assert canonicalize_sinusoid([2.0, 0.0, 5.0]).tolist() == [2.0, 0.0, 5.0]


def test_sinusoid_canonical_form_on_many_draws():
    rng = np.random.default_rng(1)
    theta = np.column_stack([rng.normal(0, 3, 100_000), rng.normal(0, 5, 100_000), rng.normal(0, 20, 100_000)])
    c = canonicalize_sinusoid(theta)
    assert np.all(c[:, 1] >= 0)
    assert np.all(c[:, 1] * np.abs(c[:, 2]) < math.pi)
    np.testing.assert_array_equal(canonicalize_sinusoid(c), c)
    x = np.linspace(-3, 3, 7)
    f = lambda t: t[:, None, 0] * np.sin(t[:, None, 1] * (x - t[:, None, 2]))
    np.testing.assert_allclose(f(c), f(theta), atol=1e-9 * np.abs(theta[:, :1]).max())


@settings(max_examples=100, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-100, 100))
def test_sinusoid_canonicalization_idempotent(b, m, x0):
    once = canonicalize_sinusoid([b, m, x0])
    np.testing.assert_array_equal(canonicalize_sinusoid(once), once)


def test_priors():
    g = gaussian_prior([1.0, np.nan], [2.0, np.nan])
    assert g(np.array([1.0, 50.0])) == 1.0
    assert g(np.array([3.0, 0.0])) == pytest.approx(math.exp(-0.5))
    u = uniform_prior([0, np.nan], [1, np.nan])
    assert u(np.array([[0.5, 1e9], [1.5, 0]])).tolist() == [1.0, 0.0]


def test_with_pivot_and_prior():
    m = get_model("linear")
    assert m.pivot is None and m.with_pivot(2.0).pivot == 2.0
    assert m.with_prior(uniform_prior([0, 0], [1, 1])).prior is not None
