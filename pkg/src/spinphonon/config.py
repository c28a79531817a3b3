"""Run configuration: one YAML file, units spelled out in key names."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .constants import G_E
from .spin import SpinSystem

DEFAULTS = {
    "preset": None,
    "paths": {
        "phonons": None,
        "couplings": None,
        "geometry": None,
        "index_map": None,
        "surrogate": None,
        "training_data": None,
        "output_dir": "spinphonon_out",
    },
    "spin": {
        "spin_S": 1.0,
        "D_cm1": 0.092,
        "E_cm1": 0.0,
        "D_tensor_cm1": None,
        "g": G_E,
        "g_tensor": None,
        "B_field_mT": [0.0, 0.0, 1.0],
        "initial_ms": 1.0,
        "monitor_ms": 0.0,
    },
    "evaluator": {"kind": "surrogate", "seed": 0, "scale": 0.1},
    "numerics": {
        "eta_cm1": 1.0,
        "smearing": "gaussian",
        "omega_min_cm1": 1.0,
        "cutoff_cm1": None,
        "r4_epsilon_cm1": 0.1,
        "time_decades": 6.0,
        "grid_step_A": 0.01,
        "second_order": True,
        "second_window_cm1": None,
        "balanced_occupations": True,
        "two_phonon_channels": "raman",
    },
    "sweep": {"temperatures_K": [300.0]},
    "toggles": {
        "enable_R2_1ph": False,
        "enable_R2_2ph": True,
        "enable_R4": False,
        "compute_T2": True,
        "eta_check": True,
        "per_mechanism": True,
    },
    "training": {
        "n_train": None,
        "n_val": None,
        "hidden_layer_sizes": [128, 64, 16],
        "l2_lambda": 1e-6,
        "learning_rate": 1e-3,
        "batch_size": 32,
        "max_epochs": 2000,
        "patience": 200,
        "n_jobs": 1,
    },
    "analysis": {
        "grid_min_cm1": 0.0,
        "grid_max_cm1": 1500.0,
        "grid_points": 3001,
        "cutoffs_cm1": [],
        "scan_temperature_K": 300.0,
        "initial_e1_cm1": None,
        "initial_e2_cm1": None,
        "loss": "log",
    },
    "seed": 0,
}


class ConfigError(ValueError):
    pass


def _merge(base, override, where=""):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if key not in base:
            raise ConfigError(f"unknown configuration key '{where}{key}'")
        if isinstance(base[key], dict) and key != "preset":
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}{key}' must be a mapping")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def apply_override(raw: dict, assignment: str) -> dict:
    """Apply ``section.key=value`` (value parsed as YAML) to a raw config dict."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, value = assignment.split("=", 1)
    node = raw
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = yaml.safe_load(value)
    return raw


@dataclass
class RunConfig:
    data: dict
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, raw: dict | None, base_dir=".") -> "RunConfig":
        return cls(_merge(DEFAULTS, raw or {}), Path(base_dir))

    @classmethod
    def load(cls, path, overrides=()) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"configuration file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        for item in overrides:
            apply_override(raw, item)
        return cls.from_dict(raw, path.parent)

    def __getitem__(self, key):
        return self.data[key]

    def path(self, key) -> Path | None:
        value = self.data["paths"][key]
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def require_path(self, key) -> Path:
        p = self.path(key)
        if p is None:
            raise ConfigError(f"paths.{key} is required for this command")
        if not p.exists():
            raise FileNotFoundError(f"paths.{key}: file not found: {p}")
        return p

    @property
    def output_dir(self) -> Path:
        return self.path("output_dir")

    def temperatures(self) -> np.ndarray:
        spec = self.data["sweep"]["temperatures_K"]
        if isinstance(spec, dict):
            try:
                temps = np.linspace(float(spec["start"]), float(spec["stop"]), int(spec["num"]))
            except KeyError as exc:
                raise ConfigError(f"sweep.temperatures_K needs start/stop/num, missing {exc}") from None
        else:
            temps = np.atleast_1d(np.asarray(spec if spec is not None else [], dtype=float))
        if temps.size == 0:
            raise ConfigError("sweep.temperatures_K is empty")
        if np.any(temps < 0) or np.any(np.diff(temps) <= 0):
            raise ConfigError("sweep.temperatures_K must be non-negative and strictly ascending")
        return temps

    def spin_system(self) -> SpinSystem:
        s = self.data["spin"]
        B = np.asarray(s["B_field_mT"], dtype=float) * 1e-3
        g = s["g_tensor"] if s["g_tensor"] is not None else s["g"]
        try:
            if s["D_tensor_cm1"] is not None:
                g_t = np.asarray(g, dtype=float)
                g_t = g_t * np.eye(3) if g_t.ndim == 0 else g_t
                return SpinSystem(float(s["spin_S"]), np.asarray(s["D_tensor_cm1"], dtype=float), g_t, B)
            return SpinSystem.from_axial(float(s["spin_S"]), float(s["D_cm1"]), float(s["E_cm1"]), g, B)
        except ValueError as exc:
            raise ConfigError(f"spin: {exc}") from None

    def validate(self, needed=()) -> None:
        """Check that the ``needed`` files exist and numeric settings are sane."""
        for key in needed:
            self.require_path(key)
        num = self.data["numerics"]
        if float(num["eta_cm1"]) <= 0:
            raise ConfigError("numerics.eta_cm1 must be positive")
        if float(num["omega_min_cm1"]) <= 0:
            raise ConfigError("numerics.omega_min_cm1 must be positive")
        if num["smearing"] not in ("gaussian", "lorentzian"):
            raise ConfigError("numerics.smearing must be gaussian or lorentzian")
        self.temperatures()
        self.spin_system()
