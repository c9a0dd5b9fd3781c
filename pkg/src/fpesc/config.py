"""JSON run configuration shared by the CLI, training and evaluation.

Every key is optional; missing keys fall back to the Gaussian benchmark
problem below.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .domain import DomainMode
from .errors import ConfigError
from .fields import MlpField, QuadraticPotential
from .selfcons import GaussianInitial, IntegratorSpec

DEFAULTS = {
    "domain": {"mode": "free", "dim": 2, "l": None},
    "problem": {
        "mu0": [-4.0, -4.0],
        "sigma0": [[0.7, 0.0], [0.0, 1.3]],
        "mu_inf": [4.0, 4.0],
        "sigma_inf": [[1.1, 0.0], [0.0, 0.9]],
        "half_factor": True,
    },
    "integrator": {"dt": 1e-2, "T": 3.0},
    "loss": {"n_samples": 64},
    "seed": 0,
    "model": {"hidden": [64, 64], "activation": "tanh", "init_seed": None},
    "train": {
        "steps": 500,
        "batch": 32,
        "lr": 1e-3,
        "optimizer": "adam",
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "log_every": 1,
        "checkpoint_every": 100,
    },
    "eval": {"grid_h": 0.4, "dt": 1e-2},
    "out_dir": "run",
}


def _merge(base: dict, over: dict, where="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    source: Optional[Path] = None

    @classmethod
    def from_dict(cls, doc: dict, source=None) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls(_merge(DEFAULTS, doc), Path(source) if source else None)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc, path)

    @classmethod
    def default(cls) -> "RunConfig":
        return cls.from_dict({})

    def __getitem__(self, key):
        return self.raw[key]

    def validate(self):
        # building each object runs its own checks
        self.domain()
        self.initial()
        self.potential()
        self.spec()
        self.train_config()
        if int(self.raw["loss"]["n_samples"]) < 1:
            raise ConfigError("loss.n_samples must be >= 1")
        if not float(self.raw["eval"]["grid_h"]) > 0:
            raise ConfigError("eval.grid_h must be positive")

    def domain(self) -> DomainMode:
        dom = self.raw["domain"]
        try:
            if dom["mode"] == "torus":
                if dom.get("l") is None:
                    raise ConfigError("domain.l is required for a torus")
                return DomainMode.torus(float(dom["l"]), int(dom["dim"]))
            if dom["mode"] == "free":
                return DomainMode.free(int(dom["dim"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        raise ConfigError(f"domain.mode must be 'torus' or 'free', got {dom['mode']!r}")

    def initial(self) -> GaussianInitial:
        p = self.raw["problem"]
        dom = self.domain()
        try:
            init = GaussianInitial(np.asarray(p["mu0"], float), np.asarray(p["sigma0"], float), dom.l)
        except ValueError as exc:
            raise ConfigError(f"problem.sigma0/mu0: {exc}") from exc
        if init.dim != dom.dim:
            raise ConfigError(f"problem.mu0 has dimension {init.dim}, domain.dim is {dom.dim}")
        return init

    def potential(self) -> QuadraticPotential:
        p = self.raw["problem"]
        try:
            return QuadraticPotential(
                np.asarray(p["mu_inf"], float), np.asarray(p["sigma_inf"], float), bool(p["half_factor"])
            )
        except ValueError as exc:
            raise ConfigError(f"problem.sigma_inf/mu_inf: {exc}") from exc

    def spec(self) -> IntegratorSpec:
        it = self.raw["integrator"]
        try:
            return IntegratorSpec(float(it["dt"]), float(it["T"]))
        except ValueError as exc:
            raise ConfigError(f"integrator: {exc}") from exc

    def eval_spec(self) -> IntegratorSpec:
        try:
            return IntegratorSpec(float(self.raw["eval"]["dt"]), float(self.raw["integrator"]["T"]))
        except ValueError as exc:
            raise ConfigError(f"eval.dt: {exc}") from exc

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def layer_sizes(self) -> tuple:
        dom = self.domain()
        d = dom.dim
        width_in = 2 * d + 1 if dom.is_torus else d + 1
        return (width_in, *(int(h) for h in self.raw["model"]["hidden"]), d)

    def field(self) -> MlpField:
        m = self.raw["model"]
        seed = self.seed if m.get("init_seed") is None else int(m["init_seed"])
        try:
            return MlpField.init(self.layer_sizes(), m["activation"], self.domain().l, seed=seed)
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc

    def train_config(self):
        from .training import TrainConfig

        t = self.raw["train"]
        try:
            return TrainConfig(
                steps=int(t["steps"]),
                batch=int(t["batch"]),
                lr=float(t["lr"]),
                optimizer=str(t["optimizer"]),
                beta1=float(t["beta1"]),
                beta2=float(t["beta2"]),
                eps=float(t["eps"]),
                seed=self.seed,
                spec=self.spec(),
                log_every=int(t["log_every"]),
                checkpoint_every=int(t["checkpoint_every"]),
                out_dir=self.out_dir(),
            )
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc

    def out_dir(self) -> Path:
        out = Path(self.raw["out_dir"])
        if not out.is_absolute() and self.source is not None:
            out = self.source.parent / out
        return out
