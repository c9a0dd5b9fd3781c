"""Spatial domain: the centred box/torus of side ``l``, or free space."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import jax.numpy as jnp
import numpy as np

from .errors import ModeMismatchError


@dataclass(frozen=True)
class DomainMode:
    """Either a d-dimensional torus ``[-l/2, l/2)^d`` (``l`` set) or free space."""

    dim: int
    l: Optional[float] = None

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.l is not None and not self.l > 0:
            raise ValueError(f"torus side length must be positive, got {self.l}")

    @classmethod
    def torus(cls, l: float, dim: int = 2) -> "DomainMode":
        return cls(dim=dim, l=float(l))

    @classmethod
    def free(cls, dim: int = 2) -> "DomainMode":
        return cls(dim=dim)

    @property
    def is_torus(self) -> bool:
        return self.l is not None

    @property
    def name(self) -> str:
        return "torus" if self.is_torus else "free"


def _require_torus(mode: DomainMode, op: str):
    if not mode.is_torus:
        raise ModeMismatchError(f"{op} needs a torus domain, got free space")


def wrap_array(x, l):
    """Reduce ``x`` into ``[-l/2, l/2)`` componentwise; works on numpy and jax arrays."""
    xp = np if isinstance(x, (np.ndarray, float, int)) else jnp
    half = 0.5 * l
    y = (x + half) % l - half
    # fp rounding can land exactly on +l/2; fold it back to -l/2
    return xp.where(y >= half, y - l, y)


def wrap(mode: DomainMode, x) -> np.ndarray:
    _require_torus(mode, "wrap")
    return wrap_array(np.asarray(x, dtype=float), mode.l)


def embed_periodic(mode: DomainMode, x) -> np.ndarray:
    """``[sin(2 pi x / l); cos(2 pi x / l)]`` along the last axis (input wrapped first)."""
    _require_torus(mode, "embed_periodic")
    w = 2.0 * np.pi * wrap(mode, x) / mode.l
    return np.concatenate([np.sin(w), np.cos(w)], axis=-1)


def min_displacement(mode: DomainMode, x, y) -> np.ndarray:
    diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    if not mode.is_torus:
        return diff
    return wrap(mode, diff)
