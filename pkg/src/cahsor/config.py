"""One TOML file configures the whole stack.

Sections: terrain (registry + layout), camera, sim, tron, kd, planner,
course, collect, service. Unknown sections or keys are rejected so typos
fail loudly. Every section is optional; missing values fall back to the desk
defaults below.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .kinodyn import KdConfig
from .planner import ConstraintLimits, MppiConfig
from .sensing import CameraModel
from .terrain import DEFAULT_TERRAIN_TYPES, SimConfig, TerrainType
from .tron import TronConfig


class ConfigError(ValueError):
    pass


DEFAULT_WAYPOINTS = [
    [2.0, 2.5],
    [9.0, 2.0],
    [9.5, 7.0],
    [9.0, 12.5],
    [2.0, 12.0],
    [1.5, 7.0],
]

DEFAULTS: dict = {
    "terrain": {
        "width": 60,
        "height": 60,
        "cell_size": 0.25,
        "seed": 7,
        "layout": "bands",
        "band_axis": "x",
        "bands": ["pavement", "grass", "rocks"],
        "types": ["pavement", "grass", "rocks"],
        "board": ["pavement", "grass"],
        "tile": 8,
        "base": "pavement",
        "cells": [],
        "registry": {
            name: {
                "mu": t.mu,
                "rough": t.rough,
                "c_slip": t.c_slip,
                "c_roll": t.c_roll,
                "color": list(t.color),
            }
            for name, t in DEFAULT_TERRAIN_TYPES.items()
        },
    },
    "camera": {
        "height": 0.3,
        "mount_pitch": 0.35,
        "focal": 110.0,
        "image_w": 128,
        "image_h": 96,
    },
    "sim": {
        "dt": 0.1,
        "wheelbase": 0.55,
        "a_max_long": 3.0,
        "g": 9.81,
        "noise_scale": 0.15,
        "v_max": 4.8,
        "steer_max": 0.5,
    },
    "tron": {
        "dim_v": 64,
        "dim_s": 64,
        "dim_i": 64,
        "dim_vs": 64,
        "dim_rho": 128,
        "conv_channels": [8, 16, 16, 16],
        "gamma": 5e-3,
        "batch_size": 32,
        "epochs": 30,
        "lr": 1e-3,
        "aug_brightness": 0.2,
        "aug_noise": 0.02,
    },
    "kd": {
        "lr": 1e-3,
        "batch_size": 64,
        "max_epochs": 200,
        "patience": 20,
    },
    "planner": {
        "horizon": 8,
        "samples": 550,
        "dt": 0.1,
        "temperature": 0.01,
        "noise_v": 0.8,
        "noise_steer": 0.15,
        "noise_corr": 0.75,
        "violation_penalty": 1e6,
        "w_goal": 1.0,
        "w_speed": 0.3,
        "w_cmd": 0.1,
        "v_min": -4.8,
        "margin": 0.0,
        "max_sliding": 0.6,
        "max_roll": 0.12,
        "max_bumpiness": 0.06,
    },
    "course": {
        "waypoints": DEFAULT_WAYPOINTS,
        "arrival_radius": 0.75,
        "laps": 3,
        "step_budget": 600,
        "slow_factor": 0.625,
        "noise_scale": 0.0,
    },
    "collect": {
        "records": 2000,
        "views_per_record": 2,
        "ou_theta_v": 0.4,
        "ou_mu_v": 2.6,
        "ou_sigma_v": 1.2,
        "ou_sigma_steer": 0.22,
        "patrol_hold_steps": 60,
        "noise_floor": 0.02,
    },
    "service": {
        "host": "127.0.0.1",
        "port": 8765,
        "cahsor_enabled": True,
        "command_timeout_s": 0.5,
        "control_hz": 10.0,
        "telemetry_hz": 20.0,
    },
}


def _check_keys(section: str, given: dict, allowed: dict) -> None:
    for key, value in given.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        if section == "terrain" and key == "registry":
            for name, entry in value.items():
                if not isinstance(entry, dict):
                    raise ConfigError(f"registry entry {name!r} must be a table")
                bad = set(entry) - {"mu", "rough", "c_slip", "c_roll", "color"}
                if bad:
                    raise ConfigError(f"unknown registry keys {sorted(bad)} for terrain {name!r}")


def _merge(section: str, given: dict | None) -> dict:
    base = json.loads(json.dumps(DEFAULTS[section]))
    if not given:
        return base
    _check_keys(section, given, DEFAULTS[section])
    for key, value in given.items():
        if key == "registry":
            for name, entry in value.items():
                merged = dict(base["registry"].get(name, {}))
                merged.update(entry)
                base["registry"][name] = merged
        else:
            base[key] = value
    return base


@dataclass
class Config:
    terrain: dict = field(default_factory=lambda: _merge("terrain", None))
    camera: dict = field(default_factory=lambda: _merge("camera", None))
    sim: dict = field(default_factory=lambda: _merge("sim", None))
    tron: dict = field(default_factory=lambda: _merge("tron", None))
    kd: dict = field(default_factory=lambda: _merge("kd", None))
    planner: dict = field(default_factory=lambda: _merge("planner", None))
    course: dict = field(default_factory=lambda: _merge("course", None))
    collect: dict = field(default_factory=lambda: _merge("collect", None))
    service: dict = field(default_factory=lambda: _merge("service", None))

    # typed views -------------------------------------------------------------
    def terrain_registry(self) -> dict[str, TerrainType]:
        reg = {}
        for name, entry in self.terrain["registry"].items():
            try:
                reg[name] = TerrainType(
                    name=name,
                    mu=float(entry["mu"]),
                    rough=float(entry["rough"]),
                    c_slip=float(entry.get("c_slip", 0.05)),
                    c_roll=float(entry.get("c_roll", 0.15)),
                    color=tuple(entry.get("color", (0.5, 0.5, 0.5))),
                )
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"bad terrain registry entry {name!r}: {exc}") from exc
        if not reg:
            raise ConfigError("terrain registry is empty")
        return reg

    def terrain_spec(self) -> dict:
        keys = ("width", "height", "cell_size", "seed", "layout", "band_axis", "bands", "types", "board", "tile", "base", "cells")
        return {k: self.terrain[k] for k in keys}

    def camera_model(self) -> CameraModel:
        c = self.camera
        return CameraModel(
            height=float(c["height"]),
            mount_pitch=float(c["mount_pitch"]),
            focal=float(c["focal"]),
            image_w=int(c["image_w"]),
            image_h=int(c["image_h"]),
        )

    def sim_config(self, seed: int = 0, noise_scale: float | None = None) -> SimConfig:
        s = self.sim
        return SimConfig(
            dt=float(s["dt"]),
            wheelbase=float(s["wheelbase"]),
            a_max_long=float(s["a_max_long"]),
            g=float(s["g"]),
            noise_scale=float(s["noise_scale"] if noise_scale is None else noise_scale),
            seed=seed,
            v_max=float(s["v_max"]),
            steer_max=float(s["steer_max"]),
        )

    def tron_config(self, seed: int = 0) -> TronConfig:
        t = self.tron
        return TronConfig(
            dim_v=int(t["dim_v"]),
            dim_s=int(t["dim_s"]),
            dim_i=int(t["dim_i"]),
            dim_vs=int(t["dim_vs"]),
            dim_rho=int(t["dim_rho"]),
            conv_channels=tuple(int(c) for c in t["conv_channels"]),
            gamma=float(t["gamma"]),
            batch_size=int(t["batch_size"]),
            epochs=int(t["epochs"]),
            lr=float(t["lr"]),
            aug_brightness=float(t["aug_brightness"]),
            aug_noise=float(t["aug_noise"]),
            seed=seed,
        )

    def kd_config(self, seed: int = 0) -> KdConfig:
        k = self.kd
        return KdConfig(
            lr=float(k["lr"]),
            batch_size=int(k["batch_size"]),
            max_epochs=int(k["max_epochs"]),
            patience=int(k["patience"]),
            seed=seed,
            tron=self.tron_config(seed=seed),
        )

    def mppi_config(self, v_max: float | None = None) -> MppiConfig:
        p = self.planner
        return MppiConfig(
            horizon=int(p["horizon"]),
            samples=int(p["samples"]),
            dt=float(p["dt"]),
            temperature=float(p["temperature"]),
            noise_v=float(p["noise_v"]),
            noise_steer=float(p["noise_steer"]),
            noise_corr=float(p["noise_corr"]),
            violation_penalty=float(p["violation_penalty"]),
            w_goal=float(p["w_goal"]),
            w_speed=float(p["w_speed"]),
            w_cmd=float(p["w_cmd"]),
            v_max=float(self.sim["v_max"] if v_max is None else v_max),
            v_min=float(p["v_min"]),
            steer_max=float(self.sim["steer_max"]),
            a_max_long=float(self.sim["a_max_long"]),
            margin=float(p["margin"]),
        )

    def limits(self) -> ConstraintLimits:
        p = self.planner
        return ConstraintLimits(
            max_sliding=float(p["max_sliding"]),
            max_roll=float(p["max_roll"]),
            max_bumpiness=float(p["max_bumpiness"]),
        )

    def hash(self) -> str:
        blob = json.dumps(
            {k: getattr(self, k) for k in ("terrain", "camera", "sim", "tron", "kd", "planner", "course", "collect")},
            sort_keys=True,
        ).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: str | Path | None) -> Config:
    """Parse and validate a TOML config; None gives the built-in defaults."""
    if path is None:
        return Config()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {p}: {exc}") from exc
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    return Config(**{section: _merge(section, raw.get(section)) for section in DEFAULTS})
