"""Analytic Gaussian (Ornstein-Uhlenbeck) ground truth for a quadratic potential.

With ``V(x) = 1/2 (x - mu_inf)^T S_inf^{-1} (x - mu_inf)`` and unit diffusion,
a Gaussian initial law stays Gaussian, ``N(mu_t, G_t^T G_t)``, with

    d mu / dt = S_inf^{-1} (mu_inf - mu)
    d G / dt  = -S_inf^{-1} G + G^{-T},      G_0 = S_0^{1/2}.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import OutOfRangeError, PathSingularityError

COND_LIMIT = 1e12


def n_steps(T: float, dt: float) -> int:
    """Number of steps of size ``dt`` covering ``[0, T]``; ``T`` must be a multiple."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if T < 0:
        raise ValueError(f"horizon must be nonnegative, got {T}")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"T={T} is not an integer multiple of dt={dt}")
    return n


def spd_sqrt(S) -> np.ndarray:
    """Principal square root of a symmetric positive definite matrix."""
    S = np.asarray(S, dtype=float)
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    if w.min() <= 0:
        raise ValueError("matrix is not positive definite")
    return (V * np.sqrt(w)) @ V.T


def check_spd(S, name="matrix") -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1] or not np.allclose(S, S.T, rtol=0, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise ValueError(f"{name} must be a symmetric square matrix")
    if np.linalg.eigvalsh(S).min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    return S


@dataclass(frozen=True)
class GaussianPath:
    mu0: np.ndarray
    sigma0: np.ndarray
    mu_inf: np.ndarray
    sigma_inf: np.ndarray
    dt: float
    times: np.ndarray
    mus: np.ndarray
    gammas: np.ndarray

    @property
    def dim(self) -> int:
        return self.mu0.shape[0]

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def index(self, t: float) -> int:
        """Grid index of ``t``; off-grid or out-of-range times are errors."""
        k = int(round(float(t) / self.dt))
        if abs(k * self.dt - float(t)) > 1e-9 * max(1.0, abs(float(t))):
            raise OutOfRangeError(f"t={t} is not on the path grid (dt={self.dt})")
        if not 0 <= k < len(self.times):
            raise OutOfRangeError(f"t={t} outside path range [0, {self.T}]")
        return k

    def mean(self, t) -> np.ndarray:
        return self.mus[self.index(t)]

    def sigma(self, t) -> np.ndarray:
        k = self.index(t)
        if k == 0:
            return self.sigma0.copy()  # the input itself, not its square root squared
        G = self.gammas[k]
        return G.T @ G

    def sigmas(self) -> np.ndarray:
        return np.einsum("nki,nkj->nij", self.gammas, self.gammas)

    def precision(self, t) -> np.ndarray:
        S = self.sigma(t)
        return np.linalg.inv(S)

    def precisions(self) -> np.ndarray:
        return np.linalg.inv(self.sigmas())


def evolve_gaussian(mu0, sigma0, mu_inf, sigma_inf, T: float, dt: float) -> GaussianPath:
    """RK4-integrate the mean and factor ODEs on the grid ``0, dt, ..., T``."""
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    mu_inf = np.atleast_1d(np.asarray(mu_inf, dtype=float))
    sigma0 = check_spd(sigma0, "sigma0")
    sigma_inf = check_spd(sigma_inf, "sigma_inf")
    d = mu0.shape[0]
    if sigma0.shape != (d, d) or sigma_inf.shape != (d, d) or mu_inf.shape != (d,):
        raise ValueError("inconsistent dimensions in Gaussian problem data")
    if not np.allclose(sigma_inf @ sigma0, sigma0 @ sigma_inf, atol=1e-12):
        warnings.warn(
            "sigma_inf and sigma0 do not commute; the factor ODE then differs from the "
            "covariance ODE and the path is not validated against a closed form",
            stacklevel=2,
        )
    n = n_steps(T, dt)
    P = np.linalg.inv(sigma_inf)

    def rhs(mu, G):
        return P @ (mu_inf - mu), -P @ G + np.linalg.inv(G).T

    mus = np.empty((n + 1, d))
    gammas = np.empty((n + 1, d, d))
    mu, G = mu0.copy(), spd_sqrt(sigma0)
    mus[0], gammas[0] = mu, G
    for k in range(n):
        a1, b1 = rhs(mu, G)
        a2, b2 = rhs(mu + 0.5 * dt * a1, G + 0.5 * dt * b1)
        a3, b3 = rhs(mu + 0.5 * dt * a2, G + 0.5 * dt * b2)
        a4, b4 = rhs(mu + dt * a3, G + dt * b3)
        mu = mu + dt / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
        G = G + dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
        cond = np.linalg.cond(G)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise PathSingularityError(f"factor ill-conditioned (cond={cond:.3g}) at t={(k + 1) * dt:.6g}")
        mus[k + 1], gammas[k + 1] = mu, G
    times = np.arange(n + 1) * dt
    return GaussianPath(mu0, sigma0, mu_inf, sigma_inf, float(dt), times, mus, gammas)


def diagonal_closed_form(mu0, var0, mu_inf, var_inf, t):
    """Per-coordinate mean and variance for diagonal covariances.

    mu_i(t) = mu_inf_i + (mu0_i - mu_inf_i) exp(-t / s_i),
    var_i(t) = s_i + (var0_i - s_i) exp(-2 t / s_i),  with s_i = var_inf_i.
    """
    mu0, var0, mu_inf, s = (np.asarray(v, dtype=float) for v in (mu0, var0, mu_inf, var_inf))
    t = np.asarray(t, dtype=float)[..., None]
    mean = mu_inf + (mu0 - mu_inf) * np.exp(-t / s)
    var = s + (var0 - s) * np.exp(-2.0 * t / s)
    return mean, var


def gaussian_log_density(x, mu, sigma) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    d = mu.shape[0]
    L = np.linalg.cholesky(sigma)
    z = np.linalg.solve(L, (x - mu).reshape(-1, d).T).T
    logdet = 2.0 * np.log(np.diag(L)).sum()
    out = -0.5 * (z**2).sum(-1) - 0.5 * (d * math.log(2 * math.pi) + logdet)
    return out.reshape(x.shape[:-1])


def log_density(path: GaussianPath, t: float, x) -> np.ndarray:
    k = path.index(t)
    G = path.gammas[k]
    return gaussian_log_density(x, path.mus[k], G.T @ G)


def score(path: GaussianPath, t: float, x) -> np.ndarray:
    """``grad log alpha_t(x) = -S_t^{-1} (x - mu_t)``."""
    k = path.index(t)
    G = path.gammas[k]
    P = np.linalg.inv(G.T @ G)
    return -(np.asarray(x, dtype=float) - path.mus[k]) @ P.T


def gaussian_w2(mu1, S1, mu2, S2) -> float:
    """Squared 2-Wasserstein distance between two Gaussians (Bures form)."""
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    S1, S2 = check_spd(S1, "S1"), check_spd(S2, "S2")
    r2 = spd_sqrt(S2)
    cross = spd_sqrt(r2 @ S1 @ r2)
    w2 = float(np.sum((mu1 - mu2) ** 2) + np.trace(S1 + S2 - 2.0 * cross))
    return max(w2, 0.0)
