"""Grid metrics against the Gaussian ground truth, density recovery and the
push-forward (change of variables) identity check.

A field is turned into a density by integrating the characteristic back to
time 0 while accumulating ``div f``:

    log rho(t, x) = log alpha0(x(0)) - int_0^t div f(s, x(s)) ds.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np

from .domain import wrap_array
from .errors import DivergenceError, ModeMismatchError
from .fields import QuadraticPotential, VelocityField, cached_jit, div_from_derivs, eval_jet
from .oracle import GaussianPath, log_density, n_steps, score
from .selfcons import GaussianInitial, IntegratorSpec, chunked_map, draw_initial_points

EVAL_CHUNK = 4096  # grid points per recovery batch


@dataclass(frozen=True)
class EvalGrid:
    """Square box ``[-half, half]^2`` sampled every ``h`` plus the time stamps.

    Both weights are uniform, so every metric is a plain double average.
    """

    h: float = 0.4
    half: float = 10.0
    stamps: tuple = tuple(round(0.3 * k, 10) for k in range(11))

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"grid increment must be positive, got {self.h}")
        m = 2.0 * self.half / self.h
        if abs(m - round(m)) > 1e-9:
            raise ValueError(f"h={self.h} does not divide the box side {2 * self.half}")

    @property
    def n_axis(self) -> int:
        return int(round(2.0 * self.half / self.h)) + 1

    @property
    def axis(self) -> np.ndarray:
        return -self.half + self.h * np.arange(self.n_axis)

    def points(self) -> np.ndarray:
        """All grid points, ``x1`` varying slowest; shape ``(n_axis**2, 2)``."""
        a = self.axis
        X1, X2 = np.meshgrid(a, a, indexing="ij")
        return np.stack([X1.ravel(), X2.ravel()], axis=-1)

    @property
    def cell_area(self) -> float:
        return self.h * self.h


# ---------------------------------------------------------------------------
# characteristic flows


def _flow_builder(field: VelocityField, dt: float, backward: bool, with_div: bool):
    kernel = field.kernel()
    d = field.dim
    K = 1 if with_div else 0
    sign = -1.0 if backward else 1.0

    def build():
        def rhs1(params, t, y):
            derivs = kernel(params, t, y[:d], K)
            v = derivs[:, 0]
            if with_div:
                v = jnp.concatenate([v, div_from_derivs(derivs, d, K)[:1]])
            return v

        rhs = jax.vmap(rhs1, in_axes=(None, None, 0))

        def run(params, t_start, y0, n):
            # trip count is traced, so every horizon shares one compilation
            h = sign * dt

            def body(k, carry):
                y, first_bad = carry
                t = t_start + h * k
                k1 = rhs(params, t, y)
                k2 = rhs(params, t + 0.5 * h, y + 0.5 * h * k1)
                k3 = rhs(params, t + 0.5 * h, y + 0.5 * h * k2)
                k4 = rhs(params, t + h, y + h * k3)
                y = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                bad = ~jnp.all(jnp.isfinite(y))
                return y, jnp.where(bad & (first_bad < 0), k, first_bad)

            return jax.lax.fori_loop(0, n, body, (y0, jnp.int32(-1)))

        return run

    return build


def flow(field: VelocityField, t_start: float, t_end: float, xs, dt: float, with_div: bool = False):
    """RK4 characteristics of ``field`` from ``t_start`` to ``t_end`` (either direction).

    Returns the end points, and with ``with_div`` also ``int div f ds`` taken
    in the direction of travel.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    span = abs(t_end - t_start)
    n = n_steps(span, dt)
    if n == 0:
        return (xs.copy(), np.zeros(len(xs))) if with_div else xs.copy()
    field.check_times(dt, max(t_start, t_end))
    backward = t_end < t_start
    key = ("flow", field.structure(), float(dt), backward, with_div)
    fn = cached_jit(key, _flow_builder(field, float(dt), backward, with_div))
    y0 = np.concatenate([xs, np.zeros((len(xs), 1))], axis=1) if with_div else xs
    y, first_bad = fn(field.params, float(t_start), jnp.asarray(y0), n)
    first_bad = int(first_bad)
    if first_bad >= 0:
        sgn = -1.0 if backward else 1.0
        raise DivergenceError(t_start + sgn * (first_bad + 1) * dt, where="flow")
    y = np.asarray(y)
    if with_div:
        return y[:, : field.dim], y[:, field.dim]
    return y


def recover_log_density_batch(field: VelocityField, init: GaussianInitial, t: float, xs, spec: IntegratorSpec) -> np.ndarray:
    """``log rho(t, x)`` at many points (one backward characteristic per point)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    lp = jax.jit(jax.vmap(init.log_density_fn()))

    def run(batch, _offset):
        x0, acc = flow(field, t, 0.0, batch, spec.dt, with_div=True)
        # acc integrates div f from t down to 0, i.e. it equals -int_0^t div f
        return np.asarray(lp(jnp.asarray(x0))) + acc

    return np.concatenate(chunked_map(run, xs, EVAL_CHUNK))


def recover_log_density(field: VelocityField, init: GaussianInitial, t: float, x, spec: IntegratorSpec) -> float:
    """Recovered log-density at a single ``(t, x)``; ``t`` must be a multiple of ``spec.dt``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (init.dim,):
        raise ValueError(f"x must have shape ({init.dim},)")
    return float(recover_log_density_batch(field, init, t, x[None], spec)[0])


def recovered_density(field, init, spec) -> Callable:
    """``rho(t, xs)`` evaluator for ``density_error_ld``."""
    return lambda t, xs: np.exp(recover_log_density_batch(field, init, t, xs, spec))


# ---------------------------------------------------------------------------
# metrics


def _field_values(field: VelocityField, t, xs):
    return eval_jet(field, t, xs, 0).derivs[..., 0]


def _analytic_density(path: GaussianPath, t, xs) -> np.ndarray:
    return np.exp(log_density(path, t, xs))


def score_error_stamps(field: VelocityField, path: GaussianPath, pot: QuadraticPotential, grid: EvalGrid) -> np.ndarray:
    xs = grid.points()
    gradV = (xs - pot.mu_inf) @ pot.hessian.T
    out = []
    for t in grid.stamps:
        r = _field_values(field, t, xs) + score(path, t, xs) + gradV
        out.append(float(np.mean(np.sum(r * r, axis=-1))))
    return np.array(out)


def score_error_ls(field: VelocityField, path: GaussianPath, pot: QuadraticPotential, grid: EvalGrid) -> float:
    """Grid average over points and stamps of ``|f + grad log alpha + grad V|^2``."""
    return float(np.mean(score_error_stamps(field, path, pot, grid)))


def density_error_stamps(rho: Callable, path: GaussianPath, grid: EvalGrid):
    """Per-stamp ``mean |alpha - rho|`` and the recovered mass ``sum rho h^2``."""
    xs = grid.points()
    errs, masses = [], []
    for t in grid.stamps:
        r = np.asarray(rho(t, xs), dtype=float)
        errs.append(float(np.mean(np.abs(_analytic_density(path, t, xs) - r))))
        masses.append(float(np.sum(r) * grid.cell_area))
    return np.array(errs), np.array(masses)


def density_error_ld(rho: Callable, path: GaussianPath, grid: EvalGrid) -> float:
    """Grid average of ``|alpha - rho|``; ``rho(t, xs)`` returns densities at points ``xs``."""
    return float(np.mean(density_error_stamps(rho, path, grid)[0]))


# ---------------------------------------------------------------------------
# push-forward identity


def torus_grid(l: float, m: int) -> np.ndarray:
    a = -0.5 * l + (l / m) * np.arange(m)
    X1, X2 = np.meshgrid(a, a, indexing="ij")
    return np.stack([X1.ravel(), X2.ravel()], axis=-1)


def lemma1_check(field: VelocityField, g: Callable, init: GaussianInitial, t: float, n: int, seed: int,
                 spec: Optional[IntegratorSpec] = None, m: int = 64):
    """Compare ``int g d(X_t # alpha0)`` two ways on the torus.

    lhs: periodic rectangle rule (``m`` points per axis) of ``g`` against the
    recovered density.  rhs: Monte Carlo mean of ``g(wrap(X(t, x0)))`` over
    ``n`` draws.  Returns ``(lhs, rhs, z)`` with ``z = (lhs - rhs) / se``;
    ``z`` is NaN when the sample standard error is exactly zero.
    """
    if init.period is None:
        raise ModeMismatchError("the push-forward identity check needs a torus problem")
    if n < 2:
        raise ValueError("need at least two samples for a standard error")
    l = init.period
    spec = spec or IntegratorSpec(1e-2, t)
    n_steps(t, spec.dt)
    pts = torus_grid(l, m)
    rho = np.exp(recover_log_density_batch(field, init, t, pts, spec))
    lhs = float(np.sum(np.asarray(g(pts)) * rho) * (l / m) ** 2)

    x0s = draw_initial_points(init, n, seed)
    xt = np.concatenate(chunked_map(lambda b, _o: flow(field, 0.0, t, b, spec.dt), x0s, EVAL_CHUNK))
    vals = np.asarray(g(wrap_array(xt, l)), dtype=float)
    rhs = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(n))
    z = (lhs - rhs) / se if se > 0 else float("nan")
    return lhs, rhs, z


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    meta: dict
    stamps: list = dc_field(default_factory=list)  # dicts t, ls, ld, mass

    @property
    def aggregate(self) -> dict:
        return {
            "ls": float(np.mean([s["ls"] for s in self.stamps])),
            "ld": float(np.mean([s["ld"] for s in self.stamps])),
        }

    def to_dict(self) -> dict:
        return {"meta": self.meta, "stamps": self.stamps, "aggregate": self.aggregate}

    def write_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "ls", "ld", "mass"])
            for s in self.stamps:
                w.writerow([repr(s["t"]), repr(s["ls"]), repr(s["ld"]), repr(s["mass"])])


def evaluate(field: VelocityField, path: GaussianPath, pot: QuadraticPotential, init: GaussianInitial,
             grid: EvalGrid, spec: IntegratorSpec, checkpoint: str = "") -> EvalReport:
    ls = score_error_stamps(field, path, pot, grid)
    ld, mass = density_error_stamps(recovered_density(field, init, spec), path, grid)
    report = EvalReport({"checkpoint": checkpoint, "grid_h": grid.h, "dt": spec.dt, "T": spec.T})
    for t, a, b, c in zip(grid.stamps, ls, ld, mass):
        report.stamps.append({"t": float(t), "ls": float(a), "ld": float(b), "mass": float(c)})
    return report
