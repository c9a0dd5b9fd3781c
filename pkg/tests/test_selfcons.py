import itertools

import numpy as np
import pytest

from fpesc.errors import DivergenceError, InvalidInitialError
from fpesc.evaluation import recover_log_density
from fpesc.fields import AffineField, MlpField, QuadraticPotential
from fpesc.selfcons import (
    AugmentedState,
    GaussianInitial,
    IntegratorSpec,
    estimate_R,
    init_state,
    layout,
    loss_integrand_g,
    residual,
    state_velocity,
    trajectory_loss,
    trajectory_nodes,
)
from helpers import MU0, SIGMA0, MU_INF, SIGMA_INF, random_field


def test_init_state_at_mean(init):
    s = init_state(MU0, init)
    np.testing.assert_array_equal(s.x, MU0)
    np.testing.assert_allclose(s.zeta1, 0.0, atol=1e-15)
    np.testing.assert_allclose(s.zeta2_full, np.diag([-1 / 0.7, -1 / 1.3]), rtol=1e-14)
    assert np.all(s.zeta3 == 0.0)
    assert s.running_loss == 0.0


def test_init_state_off_mean(init):
    s = init_state([-3.0, -4.0], init)
    np.testing.assert_allclose(s.zeta1, [-1 / 0.7, 0.0], rtol=1e-14, atol=1e-15)


def test_singular_initial_rejected():
    with pytest.raises(InvalidInitialError):
        GaussianInitial(MU0, np.diag([1.0, 0.0]))


def test_torus_init_state_matches_finite_differences():
    init = GaussianInitial([0.3, -0.2], np.diag([0.8, 1.5]), period=4.0)
    x0 = np.array([1.1, 0.7])
    s = init_state(x0, init)
    h = 1e-4
    lp = lambda x: float(init.log_density(np.asarray(x)[None])[0])
    fd = [(lp(x0 + h * e) - lp(x0 - h * e)) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(s.zeta1, fd, atol=1e-7)
    # the wrap makes zeta3 nonzero, unlike the free-space Gaussian
    assert np.abs(s.zeta3).max() > 0


def test_constant_field_keeps_zetas(pot, init):
    f = AffineField.constant([1.0, -2.0])
    s = init_state([-3.5, -4.5], init)
    v = state_velocity(f, pot, 0.0, s)
    np.testing.assert_allclose(v.x, [1.0, -2.0])
    for block in (v.zeta1, v.zeta2, v.zeta3):
        assert np.all(block == 0.0)


def test_contracting_field_grows_zeta1_exponentially(pot):
    f = AffineField(-np.eye(2), np.zeros(2))
    v0 = np.array([0.3, -0.7])
    s = AugmentedState.from_full([0.5, 0.5], v0, -np.eye(2), np.zeros((2, 2, 2)))
    v = state_velocity(f, pot, 0.0, s)
    np.testing.assert_allclose(v.zeta1, v0, rtol=1e-14)
    init = GaussianInitial([0.5, 0.5], np.eye(2))
    x0 = init.mu0 - v0  # zeta1(0) = -(x0 - mu0) = v0
    nodes = trajectory_nodes(f, pot, init, x0[None], IntegratorSpec(1e-2, 1.0))
    L = layout(2)
    z1 = nodes[-1, 0, L.slices()[1]]
    np.testing.assert_allclose(z1, np.e * v0, rtol=1e-9)


def test_oracle_consistency_along_trajectory(oracle_fine, path_fine, pot, init):
    spec = IntegratorSpec(1e-3, 3.0)
    x0s = np.array([MU0, [-3.2, -5.1], [-4.9, -2.8]])
    nodes = trajectory_nodes(oracle_fine, pot, init, x0s, spec)
    L = layout(2)
    sl = L.slices()
    worst = np.zeros(3)
    for k in range(0, spec.n_steps + 1, 50):
        t = k * spec.dt
        P, mu = path_fine.precision(t), path_fine.mean(t)
        for b in range(len(x0s)):
            y = nodes[k, b]
            x = y[sl[0]]
            worst[0] = max(worst[0], np.abs(y[sl[1]] + P @ (x - mu)).max())
            worst[1] = max(worst[1], np.abs(np.asarray(L.expand2(y[sl[2]])) + P).max())
            worst[2] = max(worst[2], np.abs(y[sl[3]]).max())
    assert worst[0] < 1e-6 and worst[1] < 1e-6 and worst[2] < 1e-8, worst


def test_symmetry_is_structural():
    # packed storage means symmetry cannot drift; the expanded tensors are exact
    L = layout(2)
    rng = np.random.default_rng(0)
    Z2 = np.asarray(L.expand2(rng.standard_normal(L.n2)))
    Z3 = np.asarray(L.expand3(rng.standard_normal(L.n3)))
    assert np.abs(Z2 - Z2.T).max() == 0.0
    for p in itertools.permutations(range(3)):
        assert np.abs(Z3 - Z3.transpose(p)).max() == 0.0


def test_state_velocity_is_symmetric_for_random_field(pot):
    f = random_field((3, 8, 8, 2), seed=3)
    rng = np.random.default_rng(5)
    A = rng.standard_normal((2, 2))
    T = rng.standard_normal((2, 2, 2))
    T = sum(T.transpose(p) for p in itertools.permutations(range(3))) / 6
    s = AugmentedState.from_full(rng.standard_normal(2), rng.standard_normal(2), A + A.T, T)
    v = state_velocity(f, pot, 0.4, s)
    assert np.abs(v.zeta2 - v.zeta2.T).max() < 1e-12
    for p in itertools.permutations(range(3)):
        assert np.abs(v.zeta3 - v.zeta3.transpose(p)).max() < 1e-12


def test_oracle_residual_vanishes(oracle_fine, init, pot):
    s = init_state([-3.0, -5.0], init)
    for d in residual(oracle_fine, pot, 0.0, s):
        assert np.abs(d).max() < 1e-12
    assert loss_integrand_g(oracle_fine, pot, 0.0, s) < 1e-24


def test_offset_oracle_residual_at_time_zero(path_fine, pot, init):
    from fpesc.fields import oracle_field

    c = np.array([0.6, -0.8])
    base = oracle_field(path_fine, pot)
    # f* at t=0 is affine; add c to its constant part
    P, H = path_fine.precision(0.0), pot.hessian
    shifted = AffineField(P - H, H @ MU_INF - P @ MU0 + c)
    s = init_state([-3.0, -5.0], init)
    d0, d1, d2 = residual(shifted, pot, 0.0, s)
    np.testing.assert_allclose(d0, c, atol=1e-12)
    assert np.abs(d1).max() < 1e-12 and np.abs(d2).max() < 1e-12
    np.testing.assert_allclose(
        np.asarray(residual(base, pot, 0.0, s)[0]) + c, d0, atol=1e-12
    )


def test_zero_field_residual_plug_in():
    pot = QuadraticPotential(MU0, SIGMA_INF)
    init = GaussianInitial(MU0, SIGMA0)
    s = init_state(MU0, init)
    d0, d1, d2 = residual(AffineField.constant([0.0, 0.0]), pot, 0.0, s)
    np.testing.assert_allclose(d0, 0.0, atol=1e-15)
    np.testing.assert_allclose(d1, np.linalg.inv(SIGMA_INF) - np.linalg.inv(SIGMA0), rtol=1e-13)
    assert np.all(d2 == 0.0)


def test_g_examples(pot, init):
    s = init_state(MU0, init)
    P, H = init.precision, pot.hessian
    # delta0 = (3, 4) with the other blocks zero
    f = AffineField(P - H, H @ MU_INF - P @ MU0 + np.array([3.0, 4.0]))
    assert loss_integrand_g(f, pot, 0.0, s) == pytest.approx(25.0, rel=1e-12)
    # delta1 = I
    f = AffineField(P - H + np.eye(2), H @ MU_INF - P @ MU0 - MU0)
    assert loss_integrand_g(f, pot, 0.0, s) == pytest.approx(2.0, rel=1e-12)


def test_zero_horizon(oracle_fine, pot, init):
    loss, final = trajectory_loss(oracle_fine, pot, init, [-3.0, -3.0], IntegratorSpec(1e-3, 0.0))
    assert loss == 0.0
    np.testing.assert_array_equal(final.x, [-3.0, -3.0])


def test_oracle_trajectory_loss_small(oracle_fine, pot, init):
    loss, _ = trajectory_loss(oracle_fine, pot, init, [-3.5, -4.8], IntegratorSpec(1e-3, 3.0))
    assert 0.0 <= loss < 1e-6


def test_running_loss_monotone(pot, init):
    f = random_field((3, 8, 2), seed=11)
    nodes = trajectory_nodes(f, pot, init, np.array([MU0, [-3.0, -4.5]]), IntegratorSpec(1e-2, 1.0))
    run = nodes[:, :, -1]
    assert np.all(run >= 0) and np.all(np.diff(run, axis=0) >= 0)


def test_stationary_offset_is_reproducible():
    pot = QuadraticPotential(MU_INF, SIGMA_INF)
    init = GaussianInitial(MU_INF, SIGMA_INF)
    # stationary problem: f* = 0, so f* + c is the constant field c
    f = AffineField.constant([0.6, 0.8])
    s = init_state(MU_INF + 0.3, init)
    assert loss_integrand_g(f, pot, 0.0, s) == pytest.approx(1.0, rel=1e-13)
    spec = IntegratorSpec(1e-3, 3.0)
    a = trajectory_loss(f, pot, init, MU_INF + 0.3, spec)[0]
    b = trajectory_loss(f, pot, init, MU_INF + 0.3, spec)[0]
    assert a > 0 and a == b


def test_estimate_R_oracle_and_determinism(oracle_coarse, pot, init):
    spec = IntegratorSpec(1e-2, 3.0)
    m1, se1 = estimate_R(oracle_coarse, pot, init, 64, 7, spec)
    m2, se2 = estimate_R(oracle_coarse, pot, init, 64, 7, spec)
    assert m1 < 1e-6
    assert m1 == m2 and se1 == se2


def test_estimate_R_single_sample_has_no_se(pot, init):
    f = random_field((3, 8, 2), seed=2)
    mean, se = estimate_R(f, pot, init, 1, 0, IntegratorSpec(1e-2, 0.5))
    assert se is None and mean > 0
    with pytest.raises(ValueError):
        estimate_R(f, pot, init, 0, 0, IntegratorSpec(1e-2, 0.5))


def test_divergence_reports_time_and_sample(pot, init):
    # a huge linear rate overflows well before T
    f = AffineField(1e4 * np.eye(2), np.zeros(2))
    with pytest.raises(DivergenceError) as exc:
        trajectory_nodes(f, pot, init, np.array([MU0, MU0]), IntegratorSpec(1e-2, 3.0))
    assert 0 < exc.value.time <= 3.0
    assert exc.value.sample == 0


def test_zeta1_matches_recovered_log_density_gradient(pot, init):
    f = random_field((3, 8, 8, 2), seed=21, bias_scale=0.3)
    spec = IntegratorSpec(1e-2, 0.5)
    x0 = np.array([-3.6, -4.3])
    _, final = trajectory_loss(f, pot, init, x0, spec)
    h = 1e-4
    fd = []
    for e in np.eye(2):
        hi = recover_log_density(f, init, 0.5, final.x + h * e, spec)
        lo = recover_log_density(f, init, 0.5, final.x - h * e, spec)
        fd.append((hi - lo) / (2 * h))
    np.testing.assert_allclose(final.zeta1, fd, atol=1e-4)
