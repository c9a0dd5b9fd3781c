"""Stochastic minimisation of the self-consistency potential over MLP parameters."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np

from .adjoint import _require_trainable, grad_estimate_R
from .errors import ConfigError, DivergenceError
from .fields import MlpField, save_checkpoint
from .selfcons import GaussianInitial, IntegratorSpec

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")
LOG_HEADER = ("step", "loss_mean", "loss_se", "grad_norm", "ms")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    spec: IntegratorSpec = IntegratorSpec(1e-2, 3.0)
    log_every: int = 1
    checkpoint_every: int = 100
    out_dir: Optional[Path] = None

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        # lr = 0 is allowed as a degenerate no-op optimiser; negative is not
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr must be a nonnegative finite number, got {self.lr}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam needs 0 <= beta1, beta2 < 1 and eps > 0")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("log_every and checkpoint_every must be >= 1")


@dataclass
class TrainLog:
    """Rows ``(step, loss_mean, loss_se, grad_norm, ms)``; ``step`` counts from 1 and
    the loss/gradient in row k are evaluated at the parameters before update k."""

    rows: list = dc_field(default_factory=list)
    dt: Optional[float] = None

    def append(self, step, loss_mean, loss_se, grad_norm, ms):
        if self.rows and step <= self.rows[-1][0]:
            raise ValueError("log steps must be strictly increasing")
        self.rows.append((int(step), float(loss_mean), float(loss_se), float(grad_norm), float(ms)))

    @property
    def steps(self) -> np.ndarray:
        return np.array([r[0] for r in self.rows], dtype=int)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_HEADER)
            for r in self.rows:
                w.writerow([r[0], repr(r[1]), repr(r[2]), repr(r[3]), f"{r[4]:.3f}"])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        out = cls()
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != LOG_HEADER:
                raise ValueError(f"unexpected log header {header}")
            for r in reader:
                out.append(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]))
        return out


def sample_initial(init: GaussianInitial, rng: np.random.Generator) -> np.ndarray:
    """One draw ``mu0 + Gamma0^T z`` from ``rng``."""
    return init.sample(rng)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & (2**63 - 1), int(step)])


def draw_batch(init: GaussianInitial, batch: int, seed: int, step: int) -> np.ndarray:
    rng = step_rng(seed, step)
    return np.stack([sample_initial(init, rng) for _ in range(batch)])


class Adam:
    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.k = 0

    def update(self, theta, grad):
        self.k += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad * grad
        mhat = self.m / (1.0 - self.b1**self.k)
        vhat = self.v / (1.0 - self.b2**self.k)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, n, lr, **_):
        self.lr = lr

    def update(self, theta, grad):
        return theta - self.lr * grad


def make_optimizer(cfg: TrainConfig, n: int):
    if cfg.optimizer == "adam":
        return Adam(n, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return SGD(n, cfg.lr)


def checkpoint_path(out_dir, step) -> Path:
    return Path(out_dir) / "checkpoints" / f"step_{step:06d}.json"


def train(field: MlpField, pot, init: GaussianInitial, cfg: TrainConfig, progress=None):
    """Run ``cfg.steps`` optimiser steps; returns ``(trained field, TrainLog)``.

    With ``cfg.out_dir`` set, the log goes to ``train_log.csv``, scheduled
    checkpoints to ``checkpoints/`` and the result to ``final.json``.  On a
    non-finite loss or gradient the run stops, the last parameters whose
    evaluation was finite are written to ``last_good.json``, and the
    ``DivergenceError`` is re-raised with ``step`` and ``log`` attached.
    """
    _require_trainable(field)
    theta = np.array(field.theta, dtype=float)
    opt = make_optimizer(cfg, theta.size)
    tlog = TrainLog(dt=cfg.spec.dt)
    out = Path(cfg.out_dir) if cfg.out_dir is not None else None
    meta = {"dt": cfg.spec.dt, "T": cfg.spec.T, "seed": cfg.seed}

    def flush_log():
        if out is not None:
            tlog.write_csv(out / "train_log.csv")

    last_good = None
    for step in range(1, cfg.steps + 1):
        current = field.with_params(theta)
        x0s = draw_batch(init, cfg.batch, cfg.seed, step)
        t0 = time.perf_counter()
        try:
            loss, grad, losses = grad_estimate_R(current, pot, init, cfg.batch, cfg.seed, cfg.spec, x0s=x0s)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise DivergenceError(cfg.spec.T, where="gradient")
        except DivergenceError as exc:
            exc.step = step
            exc.log = tlog
            flush_log()
            if out is not None and last_good is not None:
                save_checkpoint(last_good, out / "last_good.json", {**meta, "step": step - 1})
            log.error("step %d diverged: %s", step, exc)
            raise
        ms = 1e3 * (time.perf_counter() - t0)
        last_good = current
        se = float(np.std(losses, ddof=1) / math.sqrt(len(losses))) if len(losses) > 1 else float("nan")
        gnorm = float(np.linalg.norm(grad))
        if step % cfg.log_every == 0 or step == 1 or step == cfg.steps:
            tlog.append(step, loss, se, gnorm, ms)
            flush_log()
        if progress is not None:
            progress(step, loss, se, gnorm, ms)
        log.info("step %d loss %.6g se %.3g |g| %.3g (%.0f ms)", step, loss, se, gnorm, ms)
        theta = opt.update(theta, grad)
        if out is not None and step % cfg.checkpoint_every == 0:
            save_checkpoint(field.with_params(theta), checkpoint_path(out, step), {**meta, "step": step})
    trained = field.with_params(theta)
    flush_log()
    if out is not None:
        save_checkpoint(trained, out / "final.json", {**meta, "step": cfg.steps})
    return trained, tlog
