import math

import numpy as np
import pytest

from fpesc.errors import ModeMismatchError
from fpesc.evaluation import (
    EvalGrid,
    EvalReport,
    density_error_ld,
    density_error_stamps,
    evaluate,
    flow,
    lemma1_check,
    recover_log_density,
    recover_log_density_batch,
    score_error_ls,
    score_error_stamps,
)
from fpesc.fields import AffineField, MlpField, VelocityField
from fpesc.oracle import log_density, score
from fpesc.selfcons import GaussianInitial, IntegratorSpec
from helpers import MU_INF


def _density(path):
    return lambda t, xs: np.exp(log_density(path, t, xs))


def test_grid_shape():
    g = EvalGrid(0.1)
    assert g.n_axis == 201 and g.points().shape == (40401, 2)
    assert EvalGrid(0.4).n_axis == 51
    assert len(g.stamps) == 11 and g.stamps[-1] == 3.0
    with pytest.raises(ValueError):
        EvalGrid(0.3)


def test_zero_field_recovers_initial_law(init):
    f = AffineField.constant([0.0, 0.0])
    xs = np.array([[-4.0, -4.0], [-3.1, -5.2], [0.0, 1.0]])
    got = recover_log_density_batch(f, init, 0.6, xs, IntegratorSpec(1e-2, 0.6))
    np.testing.assert_allclose(got, init.log_density(xs), rtol=1e-14)


def test_rotation_only_transports(init):
    f = AffineField(np.array([[0.0, -1.0], [1.0, 0.0]]), np.zeros(2))
    x = np.array([-3.0, -4.5])
    spec = IntegratorSpec(1e-2, 1.0)
    x0 = flow(f, 1.0, 0.0, x[None], spec.dt)[0]
    assert recover_log_density(f, init, 1.0, x, spec) == pytest.approx(float(init.log_density(x0[None])[0]), abs=1e-12)


def test_oracle_recovery_matches_analytic(oracle_coarse, path_coarse, init):
    spec = IntegratorSpec(1e-2, 3.0)
    a = np.linspace(-10, 10, 21)
    xs = np.stack(np.meshgrid(a, a, indexing="ij"), -1).reshape(-1, 2)
    for t in (0.0, 0.9, 3.0):
        got = recover_log_density_batch(oracle_coarse, init, t, xs, spec)
        assert np.abs(got - log_density(path_coarse, t, xs)).max() < 1e-4


def test_score_error_of_oracle_and_offset(oracle_coarse, path_coarse, pot):
    grid = EvalGrid(0.4)
    assert score_error_ls(oracle_coarse, path_coarse, pot, grid) < 1e-10
    c = np.array([0.3, -1.2])
    # f* + c: score error is |c|^2 at every point
    shifted = _OffsetField(oracle_coarse, c)
    assert score_error_ls(shifted, path_coarse, pot, grid) == pytest.approx(c @ c, abs=1e-12)


class _OffsetField(VelocityField):
    """A base field plus a constant vector."""

    def __init__(self, base, c):
        self.base = base
        self.c = np.asarray(c, dtype=float)
        self.dim = base.dim

    @property
    def params(self):
        return (self.base.params, self.c)

    def structure(self):
        return ("offset",) + self.base.structure()

    def kernel(self):
        inner = self.base.kernel()

        def kernel(params, t, x, K):
            return inner(params[0], t, x, K).at[:, 0].add(params[1])

        return kernel

    def check_time(self, t):
        self.base.check_time(t)


def test_zero_field_score_error_against_monte_carlo(path_coarse, pot):
    f = AffineField.constant([0.0, 0.0])
    ls = score_error_ls(f, path_coarse, pot, EvalGrid(0.1))
    rng = np.random.default_rng(0)
    n = 10**6
    xs = rng.uniform(-10, 10, (n, 2))
    k = rng.integers(0, 11, n)
    vals = np.empty(n)
    for j in range(11):
        m = k == j
        r = score(path_coarse, round(0.3 * j, 10), xs[m]) + (xs[m] - MU_INF) @ pot.hessian.T
        vals[m] = np.sum(r * r, axis=1)
    se = vals.std() / math.sqrt(n)
    assert abs(ls - vals.mean()) < 3 * se


def test_grid_refinement_consistency(oracle_coarse, path_coarse, pot):
    f = AffineField.constant([0.0, 0.0])
    a = score_error_ls(f, path_coarse, pot, EvalGrid(0.2))
    b = score_error_ls(f, path_coarse, pot, EvalGrid(0.1))
    assert abs(a - b) < 0.02 * b
    a = score_error_ls(oracle_coarse, path_coarse, pot, EvalGrid(0.2))
    b = score_error_ls(oracle_coarse, path_coarse, pot, EvalGrid(0.1))
    assert abs(a - b) < 1e-12


def _box_mass(mu, var, half=10.0):
    out = 1.0
    for m, v in zip(mu, var):
        s = math.sqrt(2 * v)
        out *= 0.5 * (math.erf((half - m) / s) - math.erf((-half - m) / s))
    return out


def test_density_error_reference_values(path_coarse):
    grid = EvalGrid(0.4)
    zero = lambda t, xs: np.zeros(len(xs))
    double = lambda t, xs: 2 * np.exp(log_density(path_coarse, t, xs))
    e0, _ = density_error_stamps(zero, path_coarse, grid)
    e2, _ = density_error_stamps(double, path_coarse, grid)
    np.testing.assert_allclose(e0, e2, rtol=1e-14)
    # the grid mean of alpha is the box mass over (points * cell area)
    n = grid.n_axis**2
    for t, e in zip(grid.stamps, e0):
        S = path_coarse.sigma(t)
        want = _box_mass(path_coarse.mean(t), np.diag(S)) / (n * grid.cell_area)
        assert e == pytest.approx(want, rel=1e-6)
    assert density_error_ld(_density(path_coarse), path_coarse, grid) == 0.0


def test_oracle_density_error_and_mass(oracle_coarse, path_coarse, pot, init):
    grid = EvalGrid(0.4)
    spec = IntegratorSpec(1e-2, 3.0)
    report = evaluate(oracle_coarse, path_coarse, pot, init, grid, spec, checkpoint="oracle")
    agg = report.aggregate
    assert agg["ls"] < 1e-10 and agg["ld"] < 1e-4
    for s in report.stamps:
        assert 0.98 <= s["mass"] <= 1.01
    assert agg["ld"] == pytest.approx(np.mean([s["ld"] for s in report.stamps]))


def test_report_files(tmp_path):
    r = EvalReport({"checkpoint": "x", "grid_h": 0.4, "dt": 0.01, "T": 3.0})
    r.stamps.append({"t": 0.0, "ls": 1.0, "ld": 0.5, "mass": 1.0})
    r.stamps.append({"t": 0.3, "ls": 3.0, "ld": 0.1, "mass": 0.99})
    r.write_json(tmp_path / "r.json")
    r.write_csv(tmp_path / "r.csv")
    import json

    doc = json.loads((tmp_path / "r.json").read_text())
    assert set(doc) == {"meta", "stamps", "aggregate"}
    assert doc["aggregate"]["ls"] == 2.0
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "t,ls,ld,mass"


def test_metrics_invariant_under_traversal_order(path_coarse, pot):
    f = AffineField(np.array([[0.1, 0.3], [-0.2, 0.05]]), np.array([0.5, -0.4]))
    grid = EvalGrid(0.4)
    a = score_error_stamps(f, path_coarse, pot, grid)
    # same points visited in a shuffled order
    pts = grid.points()
    perm = np.random.default_rng(0).permutation(len(pts))
    b = []
    for t in grid.stamps:
        x = pts[perm]
        v = f.A @ x.T
        r = (v.T + f.b) + score(path_coarse, t, x) + (x - MU_INF) @ pot.hessian.T
        b.append(np.mean(np.sum(r * r, axis=1)))
    np.testing.assert_allclose(a, b, rtol=1e-12)


# ---------------------------------------------------------------------------
# push-forward identity on the torus


def _torus_setup():
    l = 8.0
    init = GaussianInitial([0.5, -0.5], np.diag([0.8, 1.2]), period=l)
    f = MlpField.init((5, 8, 2), embedding=l, seed=0, bias_scale=0.5)
    return l, init, f


def test_lemma1_constant_test_function():
    l, init, f = _torus_setup()
    lhs, rhs, z = lemma1_check(f, lambda x: np.ones(len(x)), init, 0.5, 200, seed=0)
    assert rhs == 1.0
    assert lhs == pytest.approx(1.0, abs=1e-3)
    assert math.isnan(z)


def test_lemma1_cosine_at_time_zero():
    l, init, f = _torus_setup()
    g = lambda x: np.cos(2 * np.pi * x[:, 0] / l)
    lhs, rhs, z = lemma1_check(f, g, init, 0.0, 10_000, seed=1)
    assert abs(z) <= 3


def test_lemma1_requires_torus(init):
    f = MlpField.init((3, 4, 2), seed=0)
    with pytest.raises(ModeMismatchError):
        lemma1_check(f, lambda x: np.ones(len(x)), init, 0.5, 10, seed=0)
