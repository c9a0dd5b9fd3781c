"""Self-consistency loss along particle trajectories.

A particle carries ``s = [x, zeta1, zeta2, zeta3]`` where ``zeta_k`` is the
k-th derivative tensor of ``log rho`` (the density transported by ``f``) at
the particle position.  ``zeta2``/``zeta3`` are stored by their unique
multi-index entries (same order as the degree-2/3 block of the jet tables),
so symmetry holds by construction.  The residual

    delta0 = f + grad V + zeta1
    delta1 = Df + grad^2 V + zeta2
    delta2 = D^2 f + grad^3 V + zeta3

vanishes identically for the true drift, and ``g = |delta0|^2 + |delta1|_F^2
+ |delta2|_F^2`` is integrated along the trajectory jointly with ``s``.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np

from . import jets
from .domain import wrap_array
from .errors import DivergenceError, InvalidInitialError
from .fields import QuadraticPotential, VelocityField, cached_jit, div_from_derivs, full_div_tensor, full_tensor
from .oracle import n_steps, spd_sqrt

PSI_ORDER = 4  # zeta3 dynamics read d^3 div f, i.e. 4th partials of f


# ---------------------------------------------------------------------------
# state layout


@dataclass(frozen=True)
class Layout:
    dim: int
    n2: int
    n3: int
    plan2: np.ndarray  # (d, d) -> unique slot
    plan3: np.ndarray  # (d, d, d) -> unique slot
    canon2: np.ndarray  # unique slot -> flat index of its sorted tuple
    canon3: np.ndarray

    @property
    def size(self) -> int:
        return 2 * self.dim + self.n2 + self.n3

    def slices(self):
        d, n2 = self.dim, self.n2
        return (
            slice(0, d),
            slice(d, 2 * d),
            slice(2 * d, 2 * d + n2),
            slice(2 * d + n2, self.size),
        )

    def split(self, y):
        sx, s1, s2, s3 = self.slices()
        return y[..., sx], y[..., s1], y[..., s2], y[..., s3]

    def expand2(self, u):
        return jets.select(u, self.plan2)

    def expand3(self, u):
        return jets.select(u, self.plan3)

    def compress2(self, Z):
        return jets.select(Z.reshape(Z.shape[:-2] + (-1,)), self.canon2)

    def compress3(self, Z):
        return jets.select(Z.reshape(Z.shape[:-3] + (-1,)), self.canon3)

    def place2(self, u):
        """Unique entries at their canonical (sorted-tuple) positions, zeros elsewhere."""
        return _place(u, self.canon2, (self.dim,) * 2)

    def place3(self, u):
        return _place(u, self.canon3, (self.dim,) * 3)

    def orbit_sum2(self, Z):
        """Sum of a full tensor over each permutation orbit (transpose of expand2)."""
        return _orbit_sum(Z, self.plan2, self.n2)

    def orbit_sum3(self, Z):
        return _orbit_sum(Z, self.plan3, self.n3)


def _place(u, canon, shape):
    m = np.zeros((len(canon), math.prod(shape)))
    m[np.arange(len(canon)), canon] = 1.0
    return (u @ m).reshape(u.shape[:-1] + shape)


def _orbit_sum(Z, plan, n):
    m = np.zeros((plan.size, n))
    m[np.arange(plan.size), plan.ravel()] = 1.0
    return Z.reshape(Z.shape[: Z.ndim - plan.ndim] + (-1,)) @ m


@lru_cache(maxsize=None)
def layout(d: int) -> Layout:
    def block(k):
        offset = jets.n_coeffs(d, k - 1)
        count = jets.n_coeffs(d, k) - offset
        plan = np.empty((d,) * k, dtype=int)
        canon = np.empty(count, dtype=int)
        for tup in np.ndindex(*((d,) * k)):
            a = [0] * d
            for j in tup:
                a[j] += 1
            plan[tup] = jets.index_of(d, k, a) - offset
        for tup in np.ndindex(*((d,) * k)):
            if list(tup) == sorted(tup):
                canon[plan[tup]] = np.ravel_multi_index(tup, (d,) * k)
        return count, plan, canon

    n2, p2, c2 = block(2)
    n3, p3, c3 = block(3)
    return Layout(d, n2, n3, p2, p3, c2, c3)


# ---------------------------------------------------------------------------
# problem data


@dataclass(frozen=True, eq=False)
class GaussianInitial:
    """Initial law ``N(mu0, sigma0)``; with ``period`` set, its l-periodic wrap."""

    mu0: np.ndarray
    sigma0: np.ndarray
    period: Optional[float] = None

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        S = np.atleast_2d(np.asarray(self.sigma0, dtype=float))
        if S.shape != (mu.size, mu.size):
            raise InvalidInitialError(f"sigma0 shape {S.shape} does not match mu0 of length {mu.size}")
        if not np.allclose(S, S.T, atol=1e-12) or np.linalg.eigvalsh(0.5 * (S + S.T)).min() <= 0:
            raise InvalidInitialError("sigma0 must be symmetric positive definite")
        object.__setattr__(self, "mu0", mu)
        object.__setattr__(self, "sigma0", S)

    @property
    def dim(self):
        return self.mu0.shape[0]

    @property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.sigma0)

    @property
    def factor(self) -> np.ndarray:
        """Symmetric square root ``Gamma0`` of ``sigma0``."""
        return spd_sqrt(self.sigma0)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.dim)
        x = self.mu0 + self.factor.T @ z
        return x if self.period is None else wrap_array(x, self.period)

    def log_density_fn(self, images: int = 3):
        """Pure jnp ``x -> log alpha0(x)`` (wrapped over ``2*images+1`` copies per axis on a torus)."""
        mu = jnp.asarray(self.mu0)
        P = jnp.asarray(self.precision)
        d = self.dim
        logz = -0.5 * (d * math.log(2 * math.pi) + float(np.linalg.slogdet(self.sigma0)[1]))
        if self.period is None:

            def logpdf(x):
                r = x - mu
                return logz - 0.5 * r @ P @ r

            return logpdf
        l = self.period
        shifts = jnp.asarray(
            np.array(list(np.ndindex(*((2 * images + 1,) * d))), dtype=float) - images
        ) * l

        def logpdf_wrapped(x):
            r = wrap_array(x, l) - mu + shifts
            q = -0.5 * jnp.einsum("ni,ij,nj->n", r, P, r)
            return logz + jax.scipy.special.logsumexp(q)

        return logpdf_wrapped

    def log_density(self, x) -> np.ndarray:
        x = jnp.asarray(x, dtype=float)
        fn = jax.vmap(self.log_density_fn())
        return np.asarray(fn(x.reshape(-1, self.dim))).reshape(x.shape[:-1])


@dataclass(frozen=True)
class IntegratorSpec:
    """Fixed-step classical RK4 on ``[0, T]``; ``T`` must be a multiple of ``dt``."""

    dt: float
    T: float

    def __post_init__(self):
        n_steps(self.T, self.dt)

    @property
    def n_steps(self) -> int:
        return n_steps(self.T, self.dt)


@dataclass(frozen=True)
class AugmentedState:
    """Particle state; ``zeta2``/``zeta3`` hold unique symmetric entries."""

    x: np.ndarray
    zeta1: np.ndarray
    zeta2: np.ndarray
    zeta3: np.ndarray
    running_loss: float = 0.0

    @property
    def dim(self):
        return self.x.shape[-1]

    @property
    def zeta2_full(self):
        return np.asarray(layout(self.dim).expand2(np.asarray(self.zeta2)))

    @property
    def zeta3_full(self):
        return np.asarray(layout(self.dim).expand3(np.asarray(self.zeta3)))

    @classmethod
    def from_full(cls, x, zeta1, zeta2, zeta3, running_loss=0.0) -> "AugmentedState":
        x = np.asarray(x, dtype=float)
        L = layout(x.shape[-1])
        Z2, Z3 = np.asarray(zeta2, dtype=float), np.asarray(zeta3, dtype=float)
        if not np.allclose(Z2, np.swapaxes(Z2, -1, -2)):
            raise ValueError("zeta2 must be symmetric")
        for perm in ((1, 0, 2), (0, 2, 1), (2, 1, 0)):
            if not np.allclose(Z3, np.transpose(Z3, perm)):
                raise ValueError("zeta3 must be fully symmetric")
        return cls(x, np.asarray(zeta1, dtype=float), np.asarray(L.compress2(Z2)), np.asarray(L.compress3(Z3)), running_loss)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.zeta1, self.zeta2, self.zeta3, [self.running_loss]])

    @classmethod
    def from_vector(cls, y, d: int) -> "AugmentedState":
        y = np.asarray(y, dtype=float)
        L = layout(d)
        x, z1, z2, z3 = L.split(y[: L.size])
        return cls(x, z1, z2, z3, float(y[L.size]))


class StateVelocity(NamedTuple):
    x: np.ndarray
    zeta1: np.ndarray
    zeta2: np.ndarray
    zeta3: np.ndarray


# ---------------------------------------------------------------------------
# pure single-point kernels (traceable)


class Terms(NamedTuple):
    """Field quantities at one point: ``tensors[k]`` is the order-k derivative
    tensor of f (``[m, j1..jk]``), ``divs[k]`` the order-k tensor of div f partials."""

    tensors: tuple
    divs: tuple


def field_terms(derivs, d: int, K: int) -> Terms:
    tensors = (derivs[:, 0],) + tuple(full_tensor(derivs, d, K, k) for k in range(1, K + 1))
    div = div_from_derivs(derivs, d, K)
    divs = (div[0],) + tuple(full_div_tensor(div, d, K, k) for k in range(1, K))
    return Terms(tensors, divs)


def shift_terms(terms: Terms, l: int) -> Terms:
    """Terms for ``d/dx_l`` of every entry (drops the top order)."""
    tensors = tuple(T[..., l] for T in terms.tensors[1:])
    divs = tuple(D[..., l] for D in terms.divs[1:])
    return Terms(tensors, divs)


def psi_full(terms: Terms, z1, Z2, Z3):
    """Time derivatives of ``(x, zeta1, zeta2, zeta3)`` as full tensors."""
    f, J, H, T3 = terms.tensors[:4]
    _, D1, D2, D3 = terms.divs[:4]
    dz1 = -D1 - J.T @ z1
    ZJ = Z2 @ J
    dZ2 = -D2 - ZJ - ZJ.T - jnp.einsum("kij,k->ij", H, z1)
    dZ3 = (
        -D3
        - jnp.einsum("ijm,mk->ijk", Z3, J)
        - jnp.einsum("ikm,mj->ijk", Z3, J)
        - jnp.einsum("jkm,mi->ijk", Z3, J)
        - jnp.einsum("im,mjk->ijk", Z2, H)
        - jnp.einsum("jm,mik->ijk", Z2, H)
        - jnp.einsum("km,mij->ijk", Z2, H)
        - jnp.einsum("m,mijk->ijk", z1, T3)
    )
    return f, dz1, dZ2, dZ3


def residual_full(terms: Terms, vgrads, z1, Z2, Z3):
    f, J, H = terms.tensors[:3]
    return f + vgrads[0] + z1, J + vgrads[1] + Z2, H + vgrads[2] + Z3


def g_from_residual(d0, d1, d2):
    return jnp.sum(d0**2) + jnp.sum(d1**2) + jnp.sum(d2**2)


def make_rhs(field_kernel, pot_kernel, d: int):
    """Single-point RHS of the packed state ``[x, z1, z2u, z3u, loss]``."""
    L = layout(d)

    def rhs(fparams, pparams, t, y):
        x, z1, z2u, z3u = L.split(y[: L.size])
        derivs = field_kernel(fparams, t, x, PSI_ORDER)
        terms = field_terms(derivs, d, PSI_ORDER)
        vgrads = pot_kernel(pparams, x, 3)
        Z2, Z3 = L.expand2(z2u), L.expand3(z3u)
        f, dz1, dZ2, dZ3 = psi_full(terms, z1, Z2, Z3)
        g = g_from_residual(*residual_full(terms, vgrads, z1, Z2, Z3))
        return jnp.concatenate([f, dz1, L.compress2(dZ2), L.compress3(dZ3), g[None]])

    return rhs


def rk4_step(rhs, t, y, dt):
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = rhs(t + dt, y + dt * k3)
    return y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), k1


def _forward_builder(field: VelocityField, pot: QuadraticPotential, n: int, dt: float):
    rhs1 = make_rhs(field.kernel(), pot.kernel(), field.dim)

    def build():
        rhs = jax.vmap(rhs1, in_axes=(None, None, None, 0))

        def run(fparams, pparams, y0):
            f = lambda t, y: rhs(fparams, pparams, t, y)

            def body(y, k):
                t = k * dt
                y_new, k1 = rk4_step(f, t, y, dt)
                ok = jnp.all(jnp.isfinite(y_new), axis=-1)
                return y_new, (y_new, k1, ok)

            yT, (ys, k1s, oks) = jax.lax.scan(body, y0, jnp.arange(n))
            kT = f(n * dt, yT)
            nodes = jnp.concatenate([y0[None], ys], axis=0)
            slopes = jnp.concatenate([k1s, kT[None]], axis=0)
            return nodes, slopes, oks

        return run

    return build


def forward_pass(field, pot, y0, spec: IntegratorSpec, sample_offset: int = 0):
    """Integrate a batch of packed states; returns ``(nodes, slopes)`` of shape
    ``(N+1, B, size+1)`` (slopes are the RHS at the nodes)."""
    field.check_times(spec.dt, spec.T)
    n = spec.n_steps
    y0 = jnp.asarray(y0, dtype=float)
    if n == 0:
        return np.asarray(y0)[None], None
    key = ("forward", field.structure(), pot.structure(), n, float(spec.dt))
    fn = cached_jit(key, _forward_builder(field, pot, n, float(spec.dt)))
    nodes, slopes, oks = fn(field.params, pot.params, y0)
    oks = np.asarray(oks)
    if not oks.all():
        step, b = np.argwhere(~oks)[0]  # row-major: earliest step first
        raise DivergenceError((step + 1) * spec.dt, sample=sample_offset + int(b))
    return np.asarray(nodes), np.asarray(slopes)


# ---------------------------------------------------------------------------
# public operations


def init_state(x0, init: GaussianInitial) -> AugmentedState:
    """State at time 0: the log-density derivatives of the initial law at ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (init.dim,):
        raise ValueError(f"x0 must have shape ({init.dim},)")
    L = layout(init.dim)
    if init.period is None:
        try:
            P = np.linalg.inv(init.sigma0)
        except np.linalg.LinAlgError as exc:
            raise InvalidInitialError("singular sigma0") from exc
        z1 = -P @ (x0 - init.mu0)
        Z2 = -P
        Z3 = np.zeros((init.dim,) * 3)
    else:
        # wrapped Gaussian has no closed-form log-derivatives; differentiate exactly
        lp = init.log_density_fn()
        z1 = np.asarray(jax.grad(lp)(jnp.asarray(x0)))
        Z2 = np.asarray(jax.hessian(lp)(jnp.asarray(x0)))
        Z3 = np.asarray(jax.jacfwd(jax.hessian(lp))(jnp.asarray(x0)))
    return AugmentedState(x0.copy(), z1, np.asarray(L.compress2(Z2)), np.asarray(L.compress3(Z3)), 0.0)


def initial_vectors(x0s, init: GaussianInitial) -> np.ndarray:
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    if init.period is None:
        d = init.dim
        L = layout(d)
        P = init.precision
        z1 = -(x0s - init.mu0) @ P.T
        z2 = np.broadcast_to(np.asarray(L.compress2(-P)), (len(x0s), L.n2))
        z3 = np.zeros((len(x0s), L.n3))
        return np.concatenate([x0s, z1, z2, z3, np.zeros((len(x0s), 1))], axis=1)
    return np.stack([init_state(x, init).to_vector() for x in x0s])


def _single_point(field, t, s: AugmentedState):
    field.check_time(t)
    return jnp.asarray(s.to_vector())


def state_velocity(field: VelocityField, pot: QuadraticPotential, t, s: AugmentedState) -> StateVelocity:
    """``ds/dt``; zeta blocks are returned as full symmetric tensors."""
    y = _single_point(field, t, s)
    d = field.dim
    L = layout(d)
    fn = cached_jit(("rhs", field.structure(), pot.structure()), lambda: make_rhs(field.kernel(), pot.kernel(), d))
    out = np.asarray(fn(field.params, pot.params, float(t), y))
    x, z1, z2, z3 = L.split(out[: L.size])
    return StateVelocity(x, z1, np.asarray(L.expand2(z2)), np.asarray(L.expand3(z3)))


def residual(field: VelocityField, pot: QuadraticPotential, t, s: AugmentedState):
    """``(delta0, delta1, delta2)`` at the particle position, as full tensors."""
    _single_point(field, t, s)
    d = field.dim
    L = layout(d)
    fk, pk = field.kernel(), pot.kernel()

    def build():
        def res(fparams, pparams, t, x, z1, z2u, z3u):
            terms = field_terms(fk(fparams, t, x, 2), d, 2)
            return residual_full(terms, pk(pparams, x, 3), z1, L.expand2(z2u), L.expand3(z3u))

        return res

    fn = cached_jit(("residual", field.structure(), pot.structure()), build)
    out = fn(field.params, pot.params, float(t), *(jnp.asarray(v) for v in (s.x, s.zeta1, s.zeta2, s.zeta3)))
    return tuple(np.asarray(v) for v in out)


def loss_integrand_g(field: VelocityField, pot: QuadraticPotential, t, s: AugmentedState) -> float:
    return float(g_from_residual(*residual(field, pot, t, s)))


def trajectory_loss(field, pot, init: GaussianInitial, x0, spec: IntegratorSpec):
    """``(R(f; x0), s(T))`` with the running loss integrated alongside the state."""
    s0 = init_state(x0, init)
    nodes, _ = forward_pass(field, pot, s0.to_vector()[None], spec)
    final = AugmentedState.from_vector(nodes[-1, 0], field.dim)
    return final.running_loss, final


def trajectory_nodes(field, pot, init: GaussianInitial, x0s, spec: IntegratorSpec) -> np.ndarray:
    """All node states ``(N+1, B, size+1)`` for a batch of starting points."""
    nodes, _ = forward_pass(field, pot, initial_vectors(x0s, init), spec)
    return nodes


def sample_stream(seed: int, index: int) -> np.random.Generator:
    """Independent RNG stream for sample ``index`` under ``seed``."""
    return np.random.default_rng([int(seed) & (2**63 - 1), int(index)])


def draw_initial_points(init: GaussianInitial, n: int, seed: int) -> np.ndarray:
    return np.stack([init.sample(sample_stream(seed, i)) for i in range(n)])


def worker_count() -> int:
    """Worker cap from ``FPESC_THREADS`` (0 or unset = one per CPU)."""
    raw = os.environ.get("FPESC_THREADS", "0").strip() or "0"
    n = int(raw)
    return n if n > 0 else (os.cpu_count() or 1)


CHUNK = 16


def chunked_map(fn, items, chunk: int = CHUNK):
    """Apply ``fn(batch, offset)`` to fixed-size chunks of ``items``, in order.

    Chunk boundaries depend only on ``len(items)``, never on the worker count,
    so results are identical for any ``FPESC_THREADS``.
    """
    starts = list(range(0, len(items), chunk))
    jobs = [(items[s : s + chunk], s) for s in starts]
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [fn(b, s) for b, s in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def sample_losses(field, pot, init, x0s, spec: IntegratorSpec) -> np.ndarray:
    L = layout(field.dim)

    def run(batch, offset):
        nodes, _ = forward_pass(field, pot, initial_vectors(batch, init), spec, sample_offset=offset)
        return nodes[-1, :, L.size]

    return np.concatenate(chunked_map(run, np.asarray(x0s)))


def estimate_R(field, pot, init: GaussianInitial, n: int, rng_seed: int, spec: IntegratorSpec):
    """Monte Carlo mean of the trajectory loss and its standard error.

    The standard error is ``None`` when ``n == 1``.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    x0s = draw_initial_points(init, n, rng_seed)
    losses = sample_losses(field, pot, init, x0s, spec)
    mean = float(np.mean(losses))
    se = float(np.std(losses, ddof=1) / math.sqrt(n)) if n > 1 else None
    return mean, se
