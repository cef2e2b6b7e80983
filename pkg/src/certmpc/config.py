"""Strict YAML run configuration.

Unknown keys are rejected at every level.  Angles may be written as numbers
or as multiples of pi (``"2pi"``, ``"-0.5*pi"``).
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .dataset import GridSpec
from .errors import ConfigError
from .mlp import TrainConfig
from .model import PendulumParams, pendulum_model
from .ocp import OcpSpec

# per-stage seeds are master_seed + offset
SEED_OFFSETS = {"data": 0, "train": 0, "validation": 1000, "disturbance": 2000,
                "certify": 3000}

DEFAULTS = {
    "seed": 0,
    "out": "runs/pendulum",
    "model": {"m": 1.0, "g": 9.81, "l": 1.0, "h": 0.1},
    "ocp": {"N": 20, "Q": [[10.0, 0.0], [0.0, 1.0]], "R": [[0.1]],
            "P": [[10.0, 0.0], [0.0, 1.0]],
            "state_lower": ["-2pi", -1.0], "state_upper": ["2pi", 1.0],
            "input_lower": [-15.0], "input_upper": [15.0],
            "tol": 1e-8, "max_iter": 100},
    "grid": {"lower": ["-2pi", -1.0], "upper": ["2pi", 1.0], "counts": [25, 14]},
    "validation": {"n": 500},
    "train": {"hidden": [10, 10], "lr": 1e-3, "epochs": 2000, "batch_size": 32,
              "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8,
              "target_epsilon_d": None,
              "nominal": {"lambdas": [1.0, 0.0, 0.0]},
              "sensreg": {"lambdas": [1.0, 3.0, 0.05]}},
    "certify": {"epsilon": 2.5, "probe_factor": 4, "safety_factor": 1.5,
                "nn_samples": 2000},
    "simulate": {"x0": ["pi", 0.0], "steps": 45, "disturbance_epsilon": 0.5},
}

_PI = re.compile(r"^\s*([+-]?(?:\d+(?:\.\d*)?|\.\d+)?)\s*\*?\s*pi\s*$")
VARIANTS = ("nominal", "sensreg")


def _number(v, where):
    if isinstance(v, bool):
        raise ConfigError(f"{where}: expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        m = _PI.match(v)
        if m:
            coef = m.group(1)
            c = 1.0 if coef in ("", "+") else -1.0 if coef == "-" else float(coef)
            return c * math.pi
    raise ConfigError(f"{where}: expected a number or a multiple of pi, got {v!r}")


def _vector(v, where, n=None):
    if not isinstance(v, list):
        raise ConfigError(f"{where}: expected a list")
    out = np.array([_number(x, f"{where}[{i}]") for i, x in enumerate(v)])
    if n is not None and out.size != n:
        raise ConfigError(f"{where}: expected {n} entries, got {out.size}")
    return out


def _matrix(v, where):
    if not isinstance(v, list) or not all(isinstance(r, list) for r in v):
        raise ConfigError(f"{where}: expected a list of rows")
    return np.array([[_number(x, f"{where}[{i}][{j}]") for j, x in enumerate(r)]
                     for i, r in enumerate(v)])


def _int(v, where, minimum=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where}: expected an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{where}: must be >= {minimum}")
    return v


def _merge(base, override, where="config"):
    if not isinstance(override, dict):
        raise ConfigError(f"{where}: expected a mapping")
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if isinstance(base[key], dict):
            out[key] = _merge(base[key], val or {}, f"{where}.{key}")
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def stage_seed(self, stage: str) -> int:
        return self.seed + SEED_OFFSETS[stage]

    @property
    def out(self) -> Path:
        return Path(self.raw["out"])

    def hash(self) -> str:
        """Digest of the canonical config, excluding the output location."""
        doc = {k: v for k, v in self.raw.items() if k != "out"}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def section_hash(self, *keys) -> str:
        doc = {k: self.raw[k] for k in keys}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    # typed views

    def ocp_spec(self) -> OcpSpec:
        m, o = self.raw["model"], self.raw["ocp"]
        params = PendulumParams(_number(m["m"], "model.m"), _number(m["g"], "model.g"),
                                _number(m["l"], "model.l"))
        model = pendulum_model(params, _number(m["h"], "model.h"))
        try:
            return OcpSpec(model, N=_int(o["N"], "ocp.N", 1),
                           Q=_matrix(o["Q"], "ocp.Q"), R=_matrix(o["R"], "ocp.R"),
                           P=_matrix(o["P"], "ocp.P"),
                           state_lower=_vector(o["state_lower"], "ocp.state_lower"),
                           state_upper=_vector(o["state_upper"], "ocp.state_upper"),
                           input_lower=_vector(o["input_lower"], "ocp.input_lower"),
                           input_upper=_vector(o["input_upper"], "ocp.input_upper"),
                           tol=_number(o["tol"], "ocp.tol"),
                           max_iter=_int(o["max_iter"], "ocp.max_iter", 1))
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"ocp: {exc}") from None

    def grid(self) -> GridSpec:
        g = self.raw["grid"]
        counts = g["counts"]
        if not isinstance(counts, list):
            raise ConfigError("grid.counts: expected a list")
        try:
            return GridSpec(_vector(g["lower"], "grid.lower"), _vector(g["upper"], "grid.upper"),
                            tuple(_int(c, "grid.counts", 2) for c in counts))
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"grid: {exc}") from None

    def validation_size(self) -> int:
        return _int(self.raw["validation"]["n"], "validation.n", 1)

    def train_config(self, variant: str) -> TrainConfig:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        t = self.raw["train"]
        lambdas = list(_vector(t[variant]["lambdas"], f"train.{variant}.lambdas", 3))
        if variant == "nominal":
            lambdas[1] = 0.0
        bs = t["batch_size"]
        target = t["target_epsilon_d"]
        try:
            return TrainConfig(lambdas=tuple(lambdas), lr=_number(t["lr"], "train.lr"),
                               epochs=_int(t["epochs"], "train.epochs", 1),
                               batch_size=None if bs is None else _int(bs, "train.batch_size", 1),
                               seed=self.stage_seed("train"),
                               beta1=_number(t["beta1"], "train.beta1"),
                               beta2=_number(t["beta2"], "train.beta2"),
                               adam_eps=_number(t["adam_eps"], "train.adam_eps"),
                               hidden=tuple(_int(h, "train.hidden", 1) for h in t["hidden"]),
                               target_epsilon_d=None if target is None
                               else _number(target, "train.target_epsilon_d"))
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from None

    def certify_options(self) -> dict:
        c = self.raw["certify"]
        return {"epsilon": _number(c["epsilon"], "certify.epsilon"),
                "probe_factor": _int(c["probe_factor"], "certify.probe_factor", 1),
                "safety_factor": _number(c["safety_factor"], "certify.safety_factor"),
                "nn_samples": _int(c["nn_samples"], "certify.nn_samples", 1)}

    def simulate_options(self) -> dict:
        s = self.raw["simulate"]
        return {"x0": _vector(s["x0"], "simulate.x0"),
                "steps": _int(s["steps"], "simulate.steps", 1),
                "disturbance_epsilon": _number(s["disturbance_epsilon"],
                                               "simulate.disturbance_epsilon")}

    def validate(self) -> "RunConfig":
        _int(self.raw["seed"], "seed", 0)
        if not isinstance(self.raw["out"], str):
            raise ConfigError("out: expected a path string")
        spec = self.ocp_spec()
        grid = self.grid()
        if grid.lower.size != spec.n_x:
            raise ConfigError("grid: dimension does not match the model state")
        self.validation_size()
        for v in VARIANTS:
            self.train_config(v)
        self.certify_options()
        if self.simulate_options()["x0"].size != spec.n_x:
            raise ConfigError("simulate.x0: dimension does not match the model state")
        return self


def from_dict(doc: dict | None) -> RunConfig:
    return RunConfig(_merge(DEFAULTS, doc or {})).validate()


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return from_dict(doc)
