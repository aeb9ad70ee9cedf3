"""Experiment configuration: TOML files and built-in presets."""

from __future__ import annotations

import importlib
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .models import MODELS, TEST_FUNCTIONS, TestFunction
from .schemes import SchemeSpec

__all__ = ["ConfigError", "ExperimentConfig", "PRESETS", "load_config", "resolve_phi"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: str
    schemes: list[SchemeSpec]
    phis: list[str]
    h_ladder: list[float]
    M: int
    h_ref: float
    M_ref: int
    seed: int = 100
    output_dir: str = "results"
    initial_state: Any = None
    model_params: dict = field(default_factory=dict)
    tolerance: dict = field(default_factory=dict)
    batch_size: int = 1024
    probe_h: float = 2.0**-10
    name: str = "custom"

    def validate(self, require_reference: bool = True) -> None:
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; known: {sorted(MODELS)}")
        if not self.schemes:
            raise ConfigError("schemes must be nonempty")
        if not self.phis:
            raise ConfigError("phis must be nonempty")
        for label in self.phis:
            resolve_phi(label)
        if self.M < 1:
            raise ConfigError("M must be a positive integer")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be a positive integer")
        if not 0 <= self.seed < 2**32:
            raise ConfigError("seed must be a 32-bit unsigned integer")
        horizon = self.problem().horizon
        steps = list(self.h_ladder)
        if require_reference:
            if self.M_ref < 1:
                raise ConfigError("M_ref must be a positive integer")
            steps.append(self.h_ref)
        else:
            steps = [self.probe_h]
        if not self.h_ladder and require_reference:
            raise ConfigError("h_ladder must be nonempty")
        for h in steps:
            if not h > 0:
                raise ConfigError(f"step sizes must be positive, got {h}")
            n = round(horizon / h)
            if n < 1 or not math.isclose(n * h, horizon, rel_tol=1e-12):
                raise ConfigError(f"step size {h} does not divide the horizon {horizon}")
        if require_reference:
            for h in self.h_ladder:
                if h < 4 * self.h_ref * (1 - 1e-12):
                    raise ConfigError(f"h={h} is not at least 4x the reference step {self.h_ref}")

    def problem(self):
        from .models import make_model

        try:
            return make_model(self.model, initial_state=self.initial_state, **self.model_params)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def resolve_phi(label: str) -> TestFunction:
    """Built-in id, or ``module:function`` for a user hook taking the full state."""
    if label in TEST_FUNCTIONS:
        return TEST_FUNCTIONS[label]
    if ":" in label:
        module, _, attr = label.partition(":")
        try:
            fn = getattr(importlib.import_module(module), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"cannot load test function {label!r}: {exc}") from None
        return TestFunction(label, fn)
    raise ConfigError(f"unknown test function {label!r}; known: {sorted(TEST_FUNCTIONS)}")


_KNOWN_KEYS = {
    "model", "schemes", "phis", "h_ladder", "ladder_k", "M", "h_ref", "ref_k", "M_ref", "seed",
    "output_dir", "initial_state", "model_params", "scheme_params", "tolerance", "batch_size",
    "probe_h", "probe_k", "name",
}


def _ladder(raw: dict, h_key: str, k_key: str):
    if h_key in raw and k_key in raw:
        raise ConfigError(f"give either {h_key} or {k_key}, not both")
    if k_key in raw:
        ks = raw[k_key]
        return [2.0 ** -int(k) for k in ks] if isinstance(ks, list) else 2.0 ** -int(ks)
    return raw.get(h_key)


def from_dict(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        scheme_params = raw.get("scheme_params", {})
        schemes = [SchemeSpec.from_id(s, **scheme_params.get(s, {})) for s in raw.get("schemes", [])]
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    h_ladder = _ladder(raw, "h_ladder", "ladder_k") or []
    h_ref = _ladder(raw, "h_ref", "ref_k")
    probe_h = _ladder(raw, "probe_h", "probe_k")
    M = int(raw.get("M", 0))
    try:
        cfg = ExperimentConfig(
            model=raw.get("model", ""),
            schemes=schemes,
            phis=list(raw.get("phis", [])),
            h_ladder=[float(h) for h in h_ladder],
            M=M,
            h_ref=float(h_ref) if h_ref is not None else 2.0**-12,
            M_ref=int(raw.get("M_ref", M)),
            seed=int(raw.get("seed", 100)),
            output_dir=str(raw.get("output_dir", "results")),
            initial_state=raw.get("initial_state"),
            model_params=dict(raw.get("model_params", {})),
            tolerance={str(k): float(v) for k, v in raw.get("tolerance", {}).items()},
            batch_size=int(raw.get("batch_size", 1024)),
            probe_h=float(probe_h) if probe_h is not None else 2.0**-10,
            name=str(raw.get("name", "custom")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


_QUINTIC_SCHEMES = ["mes", "bs", "bem", "fte1", "fte2", "bts"]
_FHN_SCHEMES = ["mes", "dte", "bs", "bem", "fte1", "fte2"]


def _preset(model, schemes, phis, ks, M, ref_k, M_ref, **extra):
    return dict(model=model, schemes=schemes, phis=phis, ladder_k=ks, M=M, ref_k=ref_k, M_ref=M_ref, **extra)


PRESETS: dict[str, dict] = {
    "paper-fig1": _preset("quintic", _QUINTIC_SCHEMES, ["identity", "square"], [6, 7, 8, 9, 10],
                          3_000_000, 14, 3_000_000, initial_state=2.0),
    "paper-fig2": _preset("quintic", _QUINTIC_SCHEMES, ["cos", "exp_neg_sq"], [6, 7, 8, 9, 10],
                          3_000_000, 14, 3_000_000, initial_state=2.0),
    "paper-fig3": _preset("fhn", _FHN_SCHEMES, ["identity", "square"], [7, 8, 9, 10, 11],
                          1_000_000, 14, 1_000_000),
    "paper-fig4": _preset("fhn", _FHN_SCHEMES, ["cos", "exp_neg_sq"], [7, 8, 9, 10, 11],
                          1_000_000, 14, 1_000_000),
    "desk-fig1": _preset("quintic", _QUINTIC_SCHEMES, ["identity", "square"], [4, 5, 6, 7, 8],
                         100_000, 12, 100_000, initial_state=2.0),
    "desk-fig2": _preset("quintic", _QUINTIC_SCHEMES, ["cos", "exp_neg_sq"], [4, 5, 6, 7, 8],
                         100_000, 12, 100_000, initial_state=2.0),
    "desk-fig3": _preset("fhn", _FHN_SCHEMES, ["identity", "square"], [5, 6, 7, 8, 9],
                         100_000, 12, 100_000),
    "desk-fig4": _preset("fhn", _FHN_SCHEMES, ["cos", "exp_neg_sq"], [5, 6, 7, 8, 9],
                         100_000, 12, 100_000),
    "explode-quintic": dict(model="quintic", schemes=["em", "bem"], phis=["identity"], M=10_000,
                            probe_k=10, initial_state=8.0),
}


def load_config(source: str | Path) -> ExperimentConfig:
    """Load a preset by name or a TOML file by path."""
    name = str(source)
    if name in PRESETS:
        raw = dict(PRESETS[name])
        raw.setdefault("name", name)
        return from_dict(raw)
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"{source!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raw.setdefault("name", path.stem)
    return from_dict(raw)
