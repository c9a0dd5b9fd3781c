import warnings

import numpy as np
import pytest

from fpesc.errors import OutOfRangeError, PathSingularityError
from fpesc.oracle import (
    diagonal_closed_form,
    evolve_gaussian,
    gaussian_w2,
    log_density,
    n_steps,
    score,
)
from helpers import MU0, MU_INF, SIGMA0, SIGMA_INF

STAMPS = [round(0.3 * k, 10) for k in range(11)]


@pytest.fixture(scope="module")
def path():
    return evolve_gaussian(MU0, SIGMA0, MU_INF, SIGMA_INF, 3.0, 1e-3)


def test_closed_form_at_stamps(path):
    for t in STAMPS:
        mean, var = diagonal_closed_form(MU0, np.diag(SIGMA0), MU_INF, np.diag(SIGMA_INF), t)
        np.testing.assert_allclose(path.mean(t), mean, atol=1e-8, rtol=0)
        np.testing.assert_allclose(path.sigma(t), np.diag(var), atol=1e-8, rtol=0)


def test_scalar_closed_form_values(path):
    np.testing.assert_allclose(path.mean(3.0), [4 - 8 * np.exp(-3 / 1.1), 4 - 8 * np.exp(-3 / 0.9)], atol=1e-8)
    # quoted four-digit values; the first is a rounding slip of 3.47682
    np.testing.assert_allclose(path.mean(3.0), [3.4766, 3.7146], atol=5e-4)
    np.testing.assert_allclose(np.diag(path.sigma(3.0)), [1.09829, 0.90051], atol=1e-5)


def test_score_and_density_examples(path):
    np.testing.assert_allclose(score(path, 0.0, MU0 + np.array([0.7, 0.0])), [-1.0, 0.0], atol=1e-12)
    t = 0.9
    mu, S = path.mean(t), path.sigma(t)
    np.testing.assert_allclose(score(path, t, mu), 0.0, atol=1e-12)
    want = -0.5 * np.log((2 * np.pi) ** 2 * np.linalg.det(S))
    assert log_density(path, t, mu) == pytest.approx(want, rel=1e-12)


def test_initial_data_verbatim(path):
    assert np.array_equal(path.mean(0.0), MU0)
    assert np.array_equal(path.sigma(0.0), SIGMA0)


def test_stationary_start_stays_put():
    p = evolve_gaussian(MU_INF, SIGMA_INF, MU_INF, SIGMA_INF, 1.0, 1e-2)
    np.testing.assert_allclose(p.mean(1.0), MU_INF, atol=1e-12)
    np.testing.assert_allclose(p.sigma(1.0), SIGMA_INF, atol=1e-12)


def test_off_grid_and_out_of_range(path):
    with pytest.raises(OutOfRangeError):
        path.mean(0.0005)
    with pytest.raises(OutOfRangeError):
        path.mean(3.5)
    with pytest.raises(ValueError):
        n_steps(1.0, 0.3)


def test_score_is_gradient_of_log_density(path):
    rng = np.random.default_rng(0)
    e = 1e-5
    for _ in range(5):
        t = STAMPS[rng.integers(11)]
        x = rng.normal(size=2) * 2
        fd = [(log_density(path, t, x + e * v) - log_density(path, t, x - e * v)) / (2 * e) for v in np.eye(2)]
        np.testing.assert_allclose(score(path, t, x), fd, atol=1e-6)


def test_log_density_normalised(path):
    # Riemann sum on a fine box
    a = np.linspace(-12, 12, 481)
    X = np.stack(np.meshgrid(a, a, indexing="ij"), -1).reshape(-1, 2)
    h = a[1] - a[0]
    for t in (0.0, 1.5, 3.0):
        assert np.exp(log_density(path, t, X)).sum() * h * h == pytest.approx(1.0, abs=1e-6)


def test_w2_examples():
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert gaussian_w2([1, 2], S, [1, 2], S) == pytest.approx(0.0, abs=1e-12)
    m = np.array([0.5, -2.0])
    assert gaussian_w2([0, 0], np.eye(2), m, np.eye(2)) == pytest.approx(m @ m)
    a, b = np.array([0.7, 1.3]), np.array([1.1, 0.9])
    want = np.sum((np.sqrt(a) - np.sqrt(b)) ** 2)
    assert gaussian_w2([0, 0], np.diag(a), [0, 0], np.diag(b)) == pytest.approx(want, rel=1e-12)
    with pytest.raises(ValueError):
        gaussian_w2([0, 0], -np.eye(2), [0, 0], np.eye(2))


def test_w2_contracts_to_equilibrium(path):
    d = [gaussian_w2(path.mean(t), path.sigma(t), MU_INF, SIGMA_INF) for t in STAMPS]
    assert all(b <= a + 1e-12 for a, b in zip(d, d[1:]))


def test_non_commuting_inputs_warn():
    S0 = np.array([[1.0, 0.4], [0.4, 1.0]])
    with pytest.warns(UserWarning):
        evolve_gaussian(MU0, S0, MU_INF, SIGMA_INF, 0.1, 1e-2)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        evolve_gaussian(MU0, SIGMA0, MU_INF, SIGMA_INF, 0.1, 1e-2)


def test_singular_factor_detected():
    with pytest.raises(PathSingularityError):
        evolve_gaussian([0.0, 0.0], np.diag([1e-30, 1.0]), [0.0, 0.0], np.eye(2), 1.0, 1e-2)
