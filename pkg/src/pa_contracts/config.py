"""Experiment configuration: JSON schema, defaults and model construction."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Any

import jsonschema
import numpy as np

from .model import CaraParams, ControlSet, CostFunction, LinearModel, TimeGrid, constant, quadratic_cost
from .numerics import McConfig

CONFIG_VERSION = 1
MODES = ("riccati", "contract", "verify-agent", "principal", "first-best", "mfg", "cara-check")


class ConfigError(ValueError):
    """The configuration does not parse or does not validate."""


_number = {"type": "number"}
_coefficient = {
    "oneOf": [
        _number,
        {"type": "object", "properties": {"constant": _number}, "required": ["constant"],
         "additionalProperties": False},
        {"type": "object", "properties": {"linear": {"type": "array", "items": _number,
                                                     "minItems": 2, "maxItems": 2}},
         "required": ["linear"], "additionalProperties": False},
        {"type": "object",
         "properties": {"table": {"type": "object",
                                  "properties": {"t": {"type": "array", "items": _number, "minItems": 2},
                                                 "values": {"type": "array", "items": _number, "minItems": 2}},
                                  "required": ["t", "values"], "additionalProperties": False}},
         "required": ["table"], "additionalProperties": False},
    ]
}


def _block(props: dict, required: list[str] = ()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _block({
    "version": {"const": CONFIG_VERSION},
    "mode": {"enum": list(MODES)},
    "model": _block({"eta": _coefficient, "h": _coefficient, "sigma": _coefficient,
                     "m0": _number, "V0": _number}),
    "cost": _block({"kind": {"const": "quadratic"}, "kappa": {"type": "number", "exclusiveMinimum": 0}}),
    "controls": _block({"lo": _number, "hi": _number}, ["lo", "hi"]),
    "grid": _block({"T": {"type": "number", "exclusiveMinimum": 0},
                    "N": {"type": "integer", "minimum": 1}}, ["T", "N"]),
    "mc": _block({"n_paths": {"type": "integer", "minimum": 1},
                  "master_seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1}}),
    "R": _number,
    "cara": _block({"risk_aversion": {"type": "number", "exclusiveMinimum": 0},
                    "Z": _number, "Y0": _number}, ["risk_aversion"]),
    "verify": _block({"epsilons": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                                   "minItems": 1},
                      "probe_shift": _number}),
    "output": _block({"paths_csv": {"type": "integer", "minimum": 0}}),
}, ["version", "mode", "grid"])

DEFAULTS: dict[str, Any] = {
    "model": {"eta": 0.0, "h": 1.0, "sigma": 1.0, "m0": 1.0, "V0": 1.0},
    "cost": {"kind": "quadratic", "kappa": 1.0},
    "controls": {"lo": 0.0, "hi": 3.0},
    "mc": {"n_paths": 10_000, "master_seed": 0},
    "R": 0.0,
    "cara": {"Z": 1.0, "Y0": 0.0},
    "verify": {"epsilons": [0.1, 0.05, 0.025], "probe_shift": -0.3},
    "output": {"paths_csv": 100},
}


def _reject_constant(name):
    raise ConfigError(f"non-finite number {name} in config")


def parse_config(text: str) -> dict:
    try:
        raw = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return raw


def apply_overrides(raw: dict, seed: int | None = None, paths: int | None = None,
                    grid_steps: int | None = None) -> dict:
    cfg = json.loads(json.dumps(raw))
    if seed is not None:
        cfg.setdefault("mc", {})["master_seed"] = seed
    if paths is not None:
        cfg.setdefault("mc", {})["n_paths"] = paths
    if grid_steps is not None:
        cfg.setdefault("grid", {})["N"] = grid_steps
    return cfg


def validate(cfg: dict) -> dict:
    """Schema check plus cross-field rules; returns the config with defaults filled in."""
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    full = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULTS.items()}
    for key, value in cfg.items():
        full[key] = {**full[key], **value} if isinstance(full.get(key), dict) else value
    c = full["controls"]
    if c["lo"] > c["hi"]:
        raise ConfigError(f"controls: lo={c['lo']} exceeds hi={c['hi']}")
    for name in ("eta", "h", "sigma"):
        spec = full["model"][name]
        if isinstance(spec, dict) and "table" in spec:
            t, v = spec["table"]["t"], spec["table"]["values"]
            if len(t) != len(v):
                raise ConfigError(f"model/{name}: table t and values differ in length")
            if any(b <= a for a, b in zip(t, t[1:])):
                raise ConfigError(f"model/{name}: table t must be strictly increasing")
            if t[0] > 0 or t[-1] < full["grid"]["T"]:
                raise ConfigError(f"model/{name}: table must cover [0, T]")
    if full["mode"] == "cara-check" and "cara" not in cfg:
        raise ConfigError("mode cara-check needs a cara block")
    return full


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def coefficient(spec):
    """Callable coefficient from a number, ``{"constant"}``, ``{"linear": [a, b]}`` or ``{"table"}``."""
    if not isinstance(spec, dict):
        return constant(float(spec))
    if "constant" in spec:
        return constant(float(spec["constant"]))
    if "linear" in spec:
        a, b = (float(x) for x in spec["linear"])

        def line(t):
            return a + b * np.asarray(t, dtype=float) if np.ndim(t) else a + b * float(t)

        return line
    tt = np.asarray(spec["table"]["t"], dtype=float)
    vv = np.asarray(spec["table"]["values"], dtype=float)

    def f(t):
        out = np.interp(t, tt, vv)
        return float(out) if np.ndim(out) == 0 else out

    return f


@dataclass(frozen=True)
class Experiment:
    """Validated configuration turned into library objects."""

    config: dict
    mode: str
    model: LinearModel
    cost: CostFunction
    controls: ControlSet
    grid: TimeGrid
    mc: McConfig
    R: float

    @classmethod
    def from_config(cls, full: dict) -> "Experiment":
        m = full["model"]
        model = LinearModel(coefficient(m["eta"]), coefficient(m["h"]), coefficient(m["sigma"]),
                            float(m["m0"]), float(m["V0"]))
        grid = TimeGrid(float(full["grid"]["T"]), int(full["grid"]["N"]))
        mc = McConfig(int(full["mc"]["n_paths"]), int(full["mc"]["master_seed"]))
        for v in (m["m0"], m["V0"], full["R"]):
            if not math.isfinite(v):
                raise ConfigError("non-finite number in config")
        return cls(full, full["mode"], model, quadratic_cost(float(full["cost"]["kappa"])),
                   ControlSet(float(full["controls"]["lo"]), float(full["controls"]["hi"])),
                   grid, mc, float(full["R"]))

    @property
    def cara(self) -> CaraParams:
        return CaraParams(float(self.config["cara"]["risk_aversion"]))


def load_experiment(text: str, seed: int | None = None, paths: int | None = None,
                    grid_steps: int | None = None) -> Experiment:
    cfg = apply_overrides(parse_config(text), seed, paths, grid_steps)
    full = validate(cfg)
    try:
        return Experiment.from_config(full)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
