"""Velocity fields and potentials, evaluated together with their spatial jets.

Every field exposes a pure single-point kernel ``kernel()(params, t, x, K)``
returning an array ``(d, C_K)`` of partial derivatives, ``[i, n]`` being
``d^{a_n} f_i(t, x)`` for the n-th graded-lex multi-index.  The kernel depends
only on ``field.structure()`` (hashable), so jitted pipelines are cached by
structure and receive ``field.params`` as a traced argument.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import jax
import jax.numpy as jnp
import numpy as np

from . import jets
from .domain import wrap_array
from .errors import InvalidFieldError, NotTrainableError, OutOfRangeError, UnsupportedOrderError
from .oracle import GaussianPath, check_spd

ACTIVATIONS = ("tanh", "exp", "sin", "cos")


# ---------------------------------------------------------------------------
# index bookkeeping


@lru_cache(maxsize=None)
def _div_plan(d: int, K: int) -> np.ndarray:
    """``plan[n, i]`` = slot of ``a_n + e_i`` in the order-K table, for ``|a_n| <= K-1``."""
    lower = jets.multi_indices(d, K - 1)
    plan = np.empty((len(lower), d), dtype=int)
    for n, a in enumerate(lower):
        for i in range(d):
            b = tuple(v + (1 if j == i else 0) for j, v in enumerate(a))
            plan[n, i] = jets.index_of(d, K, b)
    return plan


@lru_cache(maxsize=None)
def tensor_plan(d: int, K: int, k: int) -> np.ndarray:
    """Slots in the order-K table for every ordered index tuple of length ``k``."""
    out = np.empty((d,) * k, dtype=int)
    for tup in np.ndindex(*((d,) * k)):
        a = [0] * d
        for j in tup:
            a[j] += 1
        out[tup] = jets.index_of(d, K, a)
    return out


def div_from_derivs(derivs, d: int, K: int):
    """``div[a] = sum_i d^{a + e_i} f_i`` for ``|a| <= K - 1``."""
    if K == 0:
        return jnp.zeros(derivs.shape[:-2] + (0,))
    plan = _div_plan(d, K)
    return sum(jets.select(derivs[..., i, :], plan[:, i]) for i in range(d))


def full_tensor(derivs, d: int, K: int, k: int):
    """Order-k derivative tensor ``T[..., m, j1, ..., jk] = d_{j1..jk} f_m``."""
    return jets.select(derivs, tensor_plan(d, K, k))


def full_div_tensor(div, d: int, K: int, k: int):
    """Order-k tensor of ``div f`` partials (needs ``k <= K - 1``)."""
    return jets.select(div, tensor_plan(d, K - 1, k))


# ---------------------------------------------------------------------------
# jet containers


@dataclass(frozen=True)
class FieldJet:
    """Value and spatial partials of a field at one (or a batch of) points.

    ``derivs[..., i, n]`` is the partial of component ``i`` for multi-index
    ``n``; ``div[..., n]`` the partial of ``div f`` (orders ``0..K-1``).
    """

    order: int
    dim: int
    derivs: object
    div: object

    @property
    def value(self):
        return self.derivs[..., 0]

    def partial(self, i: int, a):
        return self.derivs[..., i, jets.index_of(self.dim, self.order, a)]

    def div_partial(self, a):
        return self.div[..., jets.index_of(self.dim, self.order - 1, a)]

    def tensor(self, k: int):
        return full_tensor(self.derivs, self.dim, self.order, k)

    def div_tensor(self, k: int):
        return full_div_tensor(self.div, self.dim, self.order, k)


@dataclass(frozen=True)
class FieldJetGrad:
    """Parameter gradients of every FieldJet entry; trailing axis runs over theta."""

    order: int
    dim: int
    derivs: object
    div: object

    @property
    def value(self):
        return self.derivs[..., 0, :]

    def partial(self, i: int, a):
        return self.derivs[i, jets.index_of(self.dim, self.order, a)]

    def div_partial(self, a):
        return self.div[jets.index_of(self.dim, self.order - 1, a)]


# ---------------------------------------------------------------------------
# fields


class VelocityField:
    """Interface shared by all velocity fields."""

    dim: int
    trainable = False

    def structure(self) -> tuple:
        raise NotImplementedError

    @property
    def params(self):
        raise NotImplementedError

    def kernel(self):
        raise NotImplementedError

    def check_times(self, dt: float, T: float):
        """Raise if the field cannot be evaluated at RK4 nodes/midpoints of the grid."""

    def check_time(self, t: float):
        """Raise if the field cannot be evaluated at time ``t``."""

    def __call__(self, t, x):
        return eval_jet(self, t, x, 0).value


def _mlp_unflatten(theta, layer_sizes):
    out, off = [], 0
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        W = theta[off : off + n_in * n_out].reshape(n_out, n_in)
        off += n_in * n_out
        b = theta[off : off + n_out]
        off += n_out
        out.append((W, b))
    return out


def mlp_param_count(layer_sizes) -> int:
    return sum(i * o + o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))


@dataclass(frozen=True, eq=False)
class MlpField(VelocityField):
    """Smooth MLP ``f_theta(t, x)``; time is appended as one raw input scalar.

    ``embedding`` is ``None`` (input width ``d + 1``) or a torus side length
    ``l`` (input ``[sin(2 pi x/l), cos(2 pi x/l), t]``, width ``2d + 1``).
    ``theta`` is the flat parameter vector: per layer, ``W`` (out x in,
    row-major) followed by ``b``.
    """

    layer_sizes: tuple
    theta: np.ndarray
    activation: str = "tanh"
    embedding: Optional[float] = None
    trainable = True

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if self.activation not in ACTIVATIONS:
            raise InvalidFieldError(
                f"activation {self.activation!r} is not smooth enough; choose from {ACTIVATIONS}"
            )
        if len(sizes) < 2:
            raise InvalidFieldError("need at least input and output layer sizes")
        d = sizes[-1]
        want = 2 * d + 1 if self.embedding is not None else d + 1
        if sizes[0] != want:
            raise InvalidFieldError(f"input width {sizes[0]} != {want} for dim={d}")
        if self.embedding is not None and not self.embedding > 0:
            raise InvalidFieldError("periodic embedding needs a positive side length")
        theta = np.asarray(self.theta, dtype=float).ravel()
        if theta.shape[0] != mlp_param_count(sizes):
            raise InvalidFieldError(
                f"theta has {theta.shape[0]} entries, layer sizes need {mlp_param_count(sizes)}"
            )
        object.__setattr__(self, "theta", theta)

    @classmethod
    def init(cls, layer_sizes=(3, 64, 64, 2), activation="tanh", embedding=None, seed=0, bias_scale=0.0):
        """Glorot-normal weights; biases ``N(0, bias_scale^2)``."""
        rng = np.random.default_rng(seed)
        parts = []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            parts.append(rng.normal(0.0, math.sqrt(2.0 / (n_in + n_out)), size=n_in * n_out))
            parts.append(rng.normal(0.0, bias_scale, size=n_out) if bias_scale else np.zeros(n_out))
        return cls(tuple(layer_sizes), np.concatenate(parts), activation, embedding)

    @property
    def dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return self.theta.shape[0]

    @property
    def params(self):
        return jnp.asarray(self.theta)

    def layers(self):
        return [(np.asarray(W), np.asarray(b)) for W, b in _mlp_unflatten(self.theta, self.layer_sizes)]

    def with_params(self, theta) -> "MlpField":
        return MlpField(self.layer_sizes, np.asarray(theta, dtype=float), self.activation, self.embedding)

    def structure(self) -> tuple:
        return ("mlp", self.layer_sizes, self.activation, self.embedding)

    def kernel(self):
        return _mlp_kernel(self.layer_sizes, self.activation, self.embedding)


@lru_cache(maxsize=None)
def _mlp_kernel(layer_sizes, act, l):
    d = layer_sizes[-1]

    def kernel(theta, t, x, K):
        # hidden jets are (coefficients, units): each coefficient slice is a
        # contiguous row, which keeps both the products and their VJPs cheap
        e0 = jets._unit(jets.n_coeffs(d, K))[:, None]
        layers = _mlp_unflatten(theta, layer_sizes)
        (W1, b1), rest = layers[0], layers[1:]
        if l is None:
            u0 = W1[:, :d] @ x + W1[:, d] * t + b1
            h = jets.compose_linear_coeffs(act, u0, W1[:, :d], d, K).T
        else:
            w = 2.0 * jnp.pi / l
            xw = wrap_array(x, l)
            lin = w * jnp.eye(d)
            s = jets.compose_linear_coeffs("sin", w * xw, lin, d, K)
            c = jets.compose_linear_coeffs("cos", w * xw, lin, d, K)
            feats = jnp.concatenate([s, c], axis=0).T
            u = feats @ W1[:, : 2 * d].T + (W1[:, 2 * d] * t + b1) * e0
            h = jets.compose_coeffs_lead(act, u, d, K)
        for W, b in rest[:-1]:
            h = jets.compose_coeffs_lead(act, h @ W.T + b * e0, d, K)
        out = h if not rest else h @ rest[-1][0].T + rest[-1][1] * e0
        return out.T * jets.tables(d, K).factorials

    return kernel


@dataclass(frozen=True, eq=False)
class AffineField(VelocityField):
    """``f(t, x) = A x + b`` (constant in time)."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if A.shape != (b.shape[0], b.shape[0]):
            raise InvalidFieldError(f"A has shape {A.shape}, b has length {b.shape[0]}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def constant(cls, c) -> "AffineField":
        c = np.atleast_1d(np.asarray(c, dtype=float))
        return cls(np.zeros((c.size, c.size)), c)

    @property
    def dim(self):
        return self.b.shape[0]

    @property
    def params(self):
        return (jnp.asarray(self.A), jnp.asarray(self.b))

    def structure(self):
        return ("affine", self.dim)

    def kernel(self):
        return _affine_kernel(self.dim)


@lru_cache(maxsize=None)
def _affine_kernel(d):
    def kernel(params, t, x, K):
        A, b = params
        out = jnp.zeros((d, jets.n_coeffs(d, K)))
        out = out.at[:, 0].set(A @ x + b)
        if K >= 1:
            out = out.at[:, 1 : d + 1].set(A)
        return out

    return kernel


@dataclass(frozen=True, eq=False)
class QuadraticPotential:
    """``V(x) = c (x - mu_inf)^T S_inf^{-1} (x - mu_inf)``, ``c = 1/2`` by default."""

    mu_inf: np.ndarray
    sigma_inf: np.ndarray
    half_factor: bool = True

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu_inf, dtype=float))
        S = check_spd(self.sigma_inf, "sigma_inf")
        if S.shape != (mu.size, mu.size):
            raise ValueError("sigma_inf shape does not match mu_inf")
        object.__setattr__(self, "mu_inf", mu)
        object.__setattr__(self, "sigma_inf", S)

    @property
    def dim(self):
        return self.mu_inf.shape[0]

    @property
    def hessian(self) -> np.ndarray:
        P = np.linalg.inv(self.sigma_inf)
        return P if self.half_factor else 2.0 * P

    @property
    def params(self):
        return (jnp.asarray(self.mu_inf), jnp.asarray(self.hessian))

    def structure(self):
        return ("quadratic", self.dim)

    def kernel(self):
        return _quadratic_kernel(self.dim)

    def value(self, x):
        x = np.asarray(x, dtype=float) - self.mu_inf
        return 0.5 * np.einsum("...i,ij,...j->...", x, self.hessian, x)


@lru_cache(maxsize=None)
def _quadratic_kernel(d):
    def kernel(params, x, K):
        """Tuple ``(grad V, grad^2 V, ..., grad^K V)`` as full tensors."""
        mu, H = params
        out = [H @ (x - mu)]
        if K >= 2:
            out.append(H)
        for k in range(3, K + 1):
            out.append(jnp.zeros((d,) * k))
        return tuple(out)

    return kernel


def eval_potential_jet(pot: QuadraticPotential, x, K: int):
    """``(grad V, grad^2 V, ..., grad^K V)`` at ``x``; arrays carry x's batch shape."""
    if K < 1:
        raise UnsupportedOrderError("potential jet needs K >= 1")
    x = jnp.asarray(x, dtype=float)
    fn = jax.vmap(lambda y: pot.kernel()(pot.params, y, K))
    flat = fn(x.reshape(-1, pot.dim))
    return tuple(np.asarray(v).reshape(x.shape[:-1] + v.shape[1:]) for v in flat)


@dataclass(frozen=True, eq=False)
class OracleField(VelocityField):
    """Ground-truth ``f*(t, x) = -grad V(x) - grad log alpha_t(x)`` for a Gaussian path.

    Evaluation times must lie on the path grid; integrators stepping by ``dt``
    evaluate at ``dt/2`` offsets, so build the path with half their step.
    """

    path: GaussianPath
    pot: QuadraticPotential

    def __post_init__(self):
        if not (np.allclose(self.path.mu_inf, self.pot.mu_inf) and np.allclose(self.path.sigma_inf, self.pot.sigma_inf)):
            raise ValueError("path and potential disagree on mu_inf / sigma_inf")
        if not self.pot.half_factor:
            raise ValueError("the Gaussian path solves the dynamics only for the half-factor potential")
        object.__setattr__(self, "_precisions", self.path.precisions())

    @property
    def dim(self):
        return self.path.dim

    @property
    def params(self):
        return (
            jnp.asarray(self.path.mus),
            jnp.asarray(self._precisions),
            jnp.asarray(self.pot.mu_inf),
            jnp.asarray(self.pot.hessian),
        )

    def structure(self):
        return ("oracle", self.dim, self.path.dt, len(self.path.times))

    def kernel(self):
        return _oracle_kernel(self.dim, self.path.dt, len(self.path.times))

    def check_times(self, dt, T):
        half = 0.5 * dt
        ratio = half / self.path.dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise OutOfRangeError(
                f"integrator step {dt} needs path stamps every {half}; path has dt={self.path.dt}"
            )
        if T > self.path.T + 1e-9:
            raise OutOfRangeError(f"horizon {T} beyond path range [0, {self.path.T}]")

    def check_time(self, t):
        self.path.index(t)


@lru_cache(maxsize=None)
def _oracle_kernel(d, h, n):
    def kernel(params, t, x, K):
        mus, precs, mu_inf, H = params
        k = jnp.clip(jnp.round(t / h).astype(jnp.int32), 0, n - 1)
        P = precs[k]
        out = jnp.zeros((d, jets.n_coeffs(d, K)))
        out = out.at[:, 0].set(-H @ (x - mu_inf) + P @ (x - mus[k]))
        if K >= 1:
            out = out.at[:, 1 : d + 1].set(P - H)
        return out

    return kernel


def oracle_field(path: GaussianPath, pot: QuadraticPotential) -> OracleField:
    return OracleField(path, pot)


# ---------------------------------------------------------------------------
# evaluation entry points

_JIT_CACHE: dict = {}


def cached_jit(key, build):
    fn = _JIT_CACHE.get(key)
    if fn is None:
        fn = _JIT_CACHE[key] = jax.jit(build())
    return fn


def _check_order(K, limit=jets.MAX_ORDER):
    if not 0 <= int(K) <= limit:
        raise UnsupportedOrderError(f"jet order {K} not supported (0..{limit})")


def _check_finite(field):
    leaves = jax.tree_util.tree_leaves(field.params)
    if not all(bool(np.all(np.isfinite(np.asarray(v)))) for v in leaves):
        raise InvalidFieldError("field parameters contain non-finite values")


def _batched_points(field, t, x):
    field.check_time(t)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != field.dim:
        raise ValueError(f"point has dimension {x.shape[-1]}, field has {field.dim}")
    return x, x.reshape(-1, field.dim)


def eval_jet(field: VelocityField, t, x, K: int) -> FieldJet:
    """Value, partials up to order K and div-partials up to K-1 at ``(t, x)``.

    ``x`` may carry leading batch axes.
    """
    _check_order(K)
    _check_finite(field)
    x, flat = _batched_points(field, t, x)
    d = field.dim
    kernel = field.kernel()

    def build():
        def one(params, t, y):
            derivs = kernel(params, t, y, K)
            return derivs, div_from_derivs(derivs, d, K)

        return jax.vmap(one, in_axes=(None, None, 0))

    fn = cached_jit(("eval_jet", field.structure(), K), build)
    derivs, div = fn(field.params, float(t), jnp.asarray(flat))
    lead = x.shape[:-1]
    return FieldJet(
        K, d, np.asarray(derivs).reshape(lead + derivs.shape[1:]), np.asarray(div).reshape(lead + div.shape[1:])
    )


def param_grad_jet(field: VelocityField, t, x, K: int) -> FieldJetGrad:
    """Exact gradient with respect to theta of every jet entry at a single point."""
    if not getattr(field, "trainable", False):
        raise NotTrainableError(f"{type(field).__name__} has no trainable parameters")
    _check_order(K)
    _check_finite(field)
    x = np.asarray(x, dtype=float)
    if x.shape != (field.dim,):
        raise ValueError("param_grad_jet takes a single point")
    d = field.dim
    kernel = field.kernel()

    def build():
        def entries(theta, t, y):
            derivs = kernel(theta, t, y, K)
            return derivs, div_from_derivs(derivs, d, K)

        return jax.jacrev(entries)

    fn = cached_jit(("param_grad_jet", field.structure(), K), build)
    dd, dv = fn(field.params, float(t), jnp.asarray(x))
    return FieldJetGrad(K, d, np.asarray(dd), np.asarray(dv))


# ---------------------------------------------------------------------------
# checkpoints


def field_to_dict(field: MlpField) -> dict:
    return {
        "layer_sizes": list(field.layer_sizes),
        "activation": field.activation,
        "time_mode": "append",
        "embedding": {"kind": "none"} if field.embedding is None else {"kind": "periodic", "l": field.embedding},
        "weights": [W.tolist() for W, _ in field.layers()],
        "biases": [b.tolist() for _, b in field.layers()],
    }


def field_from_dict(doc: dict) -> MlpField:
    try:
        sizes = tuple(int(s) for s in doc["layer_sizes"])
        if doc.get("time_mode", "append") != "append":
            raise InvalidFieldError(f"unsupported time_mode {doc['time_mode']!r}")
        emb = doc.get("embedding", {"kind": "none"})
        l = None if emb.get("kind", "none") == "none" else float(emb["l"])
        parts = []
        for W, b in zip(doc["weights"], doc["biases"]):
            parts.append(np.asarray(W, dtype=float).ravel())
            parts.append(np.asarray(b, dtype=float).ravel())
    except (KeyError, TypeError) as exc:
        raise InvalidFieldError(f"malformed checkpoint: {exc}") from exc
    return MlpField(sizes, np.concatenate(parts), doc.get("activation", "tanh"), l)


def save_checkpoint(field: MlpField, path, meta: Optional[dict] = None) -> Path:
    """Write ``field`` as JSON; Python's float repr round-trips every double exactly."""
    doc = field_to_dict(field)
    if meta:
        doc["meta"] = meta
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> MlpField:
    return field_from_dict(json.loads(Path(path).read_text()))
