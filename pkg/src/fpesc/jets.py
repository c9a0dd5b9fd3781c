"""Truncated multivariate Taylor arithmetic (Taylor-mode forward differentiation).

A :class:`TruncatedTaylor` holds the coefficients of a polynomial in ``dim``
expansion variables truncated at total degree ``degree``.  Coefficients are
stored densely along the last array axis in graded-lexicographic order, so any
leading axes act as a batch.  Coefficient ``a`` equals ``d^a phi(x0) / a!``.

All kernels are written against ``jax.numpy`` so they can be traced inside
``jax.jit``; the index tables are plain Python/NumPy and therefore static.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache, partial

import jax
import jax.numpy as jnp
import numpy as np

from .errors import JetMismatchError, OrderExceededError, SingularityError

MAX_ORDER = 5
SERIES_TAGS = ("tanh", "exp", "sin", "cos", "reciprocal")


@lru_cache(maxsize=None)
def multi_indices(dim: int, degree: int) -> tuple[tuple[int, ...], ...]:
    """All multi-indices with total degree <= ``degree``, graded-lex order.

    Within one total degree the tuples are sorted in descending lexicographic
    order, so for ``dim=2`` the layout is ``1, x, y, x^2, xy, y^2, ...``.
    """
    if dim < 1 or degree < 0:
        raise ValueError(f"need dim >= 1 and degree >= 0, got {dim}, {degree}")
    out = []
    for k in range(degree + 1):
        level = [a for a in itertools.product(range(k + 1), repeat=dim) if sum(a) == k]
        out.extend(sorted(level, reverse=True))
    return tuple(out)


def n_coeffs(dim: int, degree: int) -> int:
    return math.comb(degree + dim, dim)


@dataclass(frozen=True)
class _Tables:
    dim: int
    degree: int
    index: dict
    degrees: np.ndarray
    factorials: np.ndarray
    multinomials: np.ndarray
    mul_terms: tuple  # per output slot: tuple of (i, j) input slots


@lru_cache(maxsize=None)
def tables(dim: int, degree: int) -> _Tables:
    idx = multi_indices(dim, degree)
    index = {a: n for n, a in enumerate(idx)}
    degrees = np.array([sum(a) for a in idx], dtype=int)
    factorials = np.array([math.prod(math.factorial(k) for k in a) for a in idx], dtype=float)
    multinomials = np.array(
        [math.factorial(sum(a)) / f for a, f in zip(idx, factorials)], dtype=float
    )
    terms = [[] for _ in idx]
    for i, a in enumerate(idx):
        for j, b in enumerate(idx):
            c = tuple(p + q for p, q in zip(a, b))
            if sum(c) <= degree:
                terms[index[c]].append((i, j))
    return _Tables(
        dim, degree, index, degrees, factorials, multinomials, tuple(tuple(t) for t in terms)
    )


def index_of(dim: int, degree: int, a) -> int:
    a = tuple(int(k) for k in a)
    if len(a) != dim:
        raise ValueError(f"multi-index {a} has wrong length for dim={dim}")
    if sum(a) > degree:
        raise OrderExceededError(f"multi-index {a} exceeds truncation degree {degree}")
    return tables(dim, degree).index[a]


# ---------------------------------------------------------------------------
# array kernels: coefficient axis is the last axis


@lru_cache(maxsize=None)
def _pair_groups(dim: int, degree: int):
    """Product pairs grouped by output slot, and the transposed groupings
    used for the cotangents of the left and right factors."""
    fwd = tables(dim, degree).mul_terms
    left = [[] for _ in fwd]
    right = [[] for _ in fwd]
    for n, pairs in enumerate(fwd):
        for i, j in pairs:
            left[i].append((n, j))
            right[j].append((n, i))
    return fwd, tuple(map(tuple, left)), tuple(map(tuple, right))


def _grouped_products(a, b, groups, axis):
    take = (lambda x, i: x[..., i]) if axis == -1 else (lambda x, i: x[i])
    shape = jnp.broadcast_shapes(a.shape, b.shape)
    shape = shape[:-1] if axis == -1 else shape[1:]
    cols = []
    for pairs in groups:
        acc = jnp.zeros(shape)
        for i, j in pairs:
            acc = acc + take(a, i) * take(b, j)
        cols.append(acc)
    return jnp.stack(cols, axis=axis)


@partial(jax.custom_vjp, nondiff_argnums=(2, 3, 4))
def _mul(a, b, dim, degree, axis):
    return _grouped_products(a, b, _pair_groups(dim, degree)[0], axis)


def _mul_fwd(a, b, dim, degree, axis):
    return _mul(a, b, dim, degree, axis), (a, b)


def _mul_bwd(dim, degree, axis, res, g):
    # the autodiff transpose of many strided slices is a scatter per slice;
    # regrouping keeps the cotangents as plain slices and one stack
    a, b = res
    _, left, right = _pair_groups(dim, degree)
    ga = _grouped_products(g, b, left, axis)
    gb = _grouped_products(g, a, right, axis)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _unbroadcast(x, shape):
    extra = x.ndim - len(shape)
    if extra:
        x = x.sum(axis=tuple(range(extra)))
    axes = tuple(k for k, (n, m) in enumerate(zip(x.shape, shape)) if m == 1 and n != 1)
    return x.sum(axis=axes, keepdims=True) if axes else x


_mul.defvjp(_mul_fwd, _mul_bwd)


def mul_coeffs(a, b, dim: int, degree: int):
    """Truncated Cauchy product of two coefficient arrays (coefficients on the last axis)."""
    return _mul(a, b, dim, degree, -1)


def mul_coeffs_lead(a, b, dim: int, degree: int):
    """As ``mul_coeffs`` with coefficients on the first axis (contiguous slices)."""
    return _mul(a, b, dim, degree, 0)



def _unit(n: int):
    e = np.zeros(n)
    e[0] = 1.0
    return e


def select(x, idx):
    """``x[..., idx]`` for a constant integer array ``idx``, as a one-hot matmul.

    Differentiates into another matmul instead of a scatter-add.
    """
    idx = np.asarray(idx, dtype=int)
    onehot = np.zeros((x.shape[-1], idx.size))
    onehot[idx.ravel(), np.arange(idx.size)] = 1.0
    return (x @ onehot).reshape(x.shape[:-1] + idx.shape)


def series_coeffs(tag: str, u0, order: int):
    """Univariate Taylor coefficients of ``tag`` at ``u0`` up to ``order``.

    Returns an array of shape ``u0.shape + (order + 1,)`` holding
    ``phi^(k)(u0) / k!``.
    """
    u0 = jnp.asarray(u0)
    if tag == "exp":
        e = jnp.exp(u0)
        cs = [e / math.factorial(k) for k in range(order + 1)]
    elif tag in ("sin", "cos"):
        s, c = jnp.sin(u0), jnp.cos(u0)
        cycle = (s, c, -s, -c) if tag == "sin" else (c, -s, -c, s)
        cs = [cycle[k % 4] / math.factorial(k) for k in range(order + 1)]
    elif tag == "reciprocal":
        r = 1.0 / u0
        cs = [r]
        for _ in range(order):
            cs.append(-cs[-1] * r)
    elif tag == "tanh":
        # y' = 1 - y^2  =>  (k+1) y_{k+1} = [k == 0] - sum_{i<=k} y_i y_{k-i}
        cs = [jnp.tanh(u0)]
        for k in range(order):
            conv = sum(cs[i] * cs[k - i] for i in range(k + 1))
            cs.append(((1.0 if k == 0 else 0.0) - conv) / (k + 1))
    else:
        raise ValueError(f"unsupported series tag {tag!r}; choose from {SERIES_TAGS}")
    return jnp.stack(cs, axis=-1)


def compose_coeffs(tag: str, u, dim: int, degree: int):
    """Coefficients of ``tag(u)`` for a general jet ``u`` (Horner in u - u0)."""
    u0 = u[..., 0]
    c = series_coeffs(tag, u0, degree)
    if degree == 0:
        return c[..., :1]
    e0 = _unit(u.shape[-1])
    v = u * (1.0 - e0)
    out = c[..., degree, None] * v
    for k in range(degree - 1, 0, -1):
        out = out + c[..., k, None] * e0
        out = mul_coeffs(v, out, dim, degree)
    return out + c[..., 0, None] * e0


def compose_coeffs_lead(tag: str, u, dim: int, degree: int):
    """``compose_coeffs`` for coefficients on the first axis."""
    c = jnp.moveaxis(series_coeffs(tag, u[0], degree), -1, 0)
    if degree == 0:
        return c[:1]
    e0 = _unit(u.shape[0]).reshape((-1,) + (1,) * (u.ndim - 1))
    v = u * (1.0 - e0)
    out = c[degree][None] * v
    for k in range(degree - 1, 0, -1):
        out = out + c[k][None] * e0
        out = mul_coeffs_lead(v, out, dim, degree)
    return out + c[0][None] * e0


def compose_linear_coeffs(tag: str, u0, lin, dim: int, degree: int):
    """Coefficients of ``tag(u0 + lin . dx)`` for an affine inner function.

    Uses the multinomial expansion directly, so no truncated products are
    needed; ``lin`` has shape ``u0.shape + (dim,)``.
    """
    tab = tables(dim, degree)
    c = series_coeffs(tag, u0, degree)
    powers = [jnp.ones_like(lin)]
    for _ in range(degree):
        powers.append(powers[-1] * lin)
    cols = []
    for n, a in enumerate(multi_indices(dim, degree)):
        mono = None
        for j, p in enumerate(a):
            if p:
                term = powers[p][..., j]
                mono = term if mono is None else mono * term
        k = int(tab.degrees[n])
        col = c[..., k] * tab.multinomials[n]
        cols.append(col if mono is None else col * mono)
    return jnp.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# value type


@dataclass(frozen=True)
class TruncatedTaylor:
    dim: int
    degree: int
    coeffs: object

    def __post_init__(self):
        c = jnp.asarray(self.coeffs)
        expected = n_coeffs(self.dim, self.degree)
        if c.shape[-1:] != (expected,):
            raise JetMismatchError(
                f"coefficient axis has length {c.shape[-1:]} but dim={self.dim}, "
                f"degree={self.degree} needs {expected}"
            )
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def constant(cls, value, dim: int, degree: int) -> "TruncatedTaylor":
        value = jnp.asarray(value, dtype=float)
        c = jnp.zeros(value.shape + (n_coeffs(dim, degree),))
        return cls(dim, degree, c.at[..., 0].set(value))

    @property
    def value(self):
        return self.coeffs[..., 0]

    def coeff(self, a):
        return self.coeffs[..., index_of(self.dim, self.degree, a)]

    def _check(self, other: "TruncatedTaylor"):
        if not isinstance(other, TruncatedTaylor):
            raise TypeError(f"expected TruncatedTaylor, got {type(other).__name__}")
        if (self.dim, self.degree) != (other.dim, other.degree):
            raise JetMismatchError(
                f"operands differ: (dim={self.dim}, degree={self.degree}) vs "
                f"(dim={other.dim}, degree={other.degree})"
            )

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return TruncatedTaylor(self.dim, self.degree, self.coeffs.at[..., 0].add(other))
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return self + (-other)
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__


def seed_variable(i: int, x0_i, dim: int, degree: int) -> TruncatedTaylor:
    """The coordinate function ``x -> x_i`` expanded at a point with ``x_i = x0_i``."""
    if not 0 <= i < dim:
        raise ValueError(f"coordinate index {i} out of range for dim={dim}")
    t = TruncatedTaylor.constant(x0_i, dim, degree)
    if degree == 0:
        return t
    e = tuple(1 if k == i else 0 for k in range(dim))
    return TruncatedTaylor(dim, degree, t.coeffs.at[..., index_of(dim, degree, e)].set(1.0))


def add(a: TruncatedTaylor, b: TruncatedTaylor) -> TruncatedTaylor:
    a._check(b)
    return TruncatedTaylor(a.dim, a.degree, a.coeffs + b.coeffs)


def scale(a: TruncatedTaylor, s) -> TruncatedTaylor:
    return TruncatedTaylor(a.dim, a.degree, a.coeffs * jnp.asarray(s)[..., None])


def mul(a: TruncatedTaylor, b: TruncatedTaylor) -> TruncatedTaylor:
    a._check(b)
    return TruncatedTaylor(a.dim, a.degree, mul_coeffs(a.coeffs, b.coeffs, a.dim, a.degree))


def compose_univariate(tag: str, u: TruncatedTaylor) -> TruncatedTaylor:
    """Degree-K truncation of ``tag(u)``.

    ``tag`` is one of ``tanh``, ``exp``, ``sin``, ``cos``, ``reciprocal``.
    """
    if tag not in SERIES_TAGS:
        raise ValueError(f"unsupported series tag {tag!r}; choose from {SERIES_TAGS}")
    if tag == "reciprocal" and bool(jnp.any(u.value == 0)):
        raise SingularityError("reciprocal of a jet whose constant term is zero")
    return TruncatedTaylor(u.dim, u.degree, compose_coeffs(tag, u.coeffs, u.dim, u.degree))


def extract_partial(t: TruncatedTaylor, a):
    """The partial derivative ``d^a phi(x0) = a! * coeff[a]``."""
    a = tuple(int(k) for k in a)
    if sum(a) > t.degree:
        raise OrderExceededError(f"|{a}| = {sum(a)} exceeds truncation degree {t.degree}")
    n = index_of(t.dim, t.degree, a)
    return t.coeffs[..., n] * tables(t.dim, t.degree).factorials[n]
