"""Procedural terrain world and the vehicle-step instability oracle.

The world is a planar grid of terrain cells. Each cell carries friction,
roughness and slip/roll gains; the oracle maps (state, control, cell) to the
three instability channels measured by the rest of the stack:

    kappa     = tan(steer) / wheelbase
    a_lat     = v^2 * kappa
    sliding   = c_slip * max(0, |a_lat| - mu * g)      [m/s]
    roll      = c_roll * min(|a_lat|, mu * g)          [rad/s^2]
    bumpiness = rough * |v|                            [m/s^3]

`step` integrates unicycle kinematics with a first-order speed rate limit and
adds the sliding channel as a lateral drift, so commanded and realized speed
never coincide exactly and aggressive cornering physically displaces the
vehicle off its nominal arc.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

V_MAX = 4.8
STEER_MAX = 0.5

TEXELS_PER_CELL = 8


class TerrainError(ValueError):
    """Bad terrain specification (unknown type, bad dimensions...)."""


@dataclass(frozen=True)
class TerrainType:
    """Per-cell ground parameters.

    mu is the friction coefficient, rough the bumpiness gain (m/s^3 per m/s),
    c_slip the sliding gain (s) and c_roll the roll gain. color is the base
    RGB signature used for camera synthesis.
    """

    name: str
    mu: float
    rough: float
    c_slip: float = 0.05
    c_roll: float = 0.15
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self) -> None:
        if self.mu <= 0:
            raise TerrainError(f"terrain {self.name!r}: mu must be > 0")
        if self.rough < 0 or self.c_slip < 0 or self.c_roll < 0:
            raise TerrainError(f"terrain {self.name!r}: gains must be >= 0")


DEFAULT_TERRAIN_TYPES: dict[str, TerrainType] = {
    "pavement": TerrainType("pavement", mu=0.9, rough=0.01, color=(0.58, 0.58, 0.60)),
    "grass": TerrainType("grass", mu=0.35, rough=0.03, color=(0.22, 0.52, 0.18)),
    "rocks": TerrainType("rocks", mu=0.7, rough=0.12, color=(0.48, 0.42, 0.34)),
}


@dataclass(frozen=True)
class VehicleState:
    """Planar pose plus speed and the small attitude angles used for imaging."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    v: float = 0.0
    roll_angle: float = 0.0
    pitch_angle: float = 0.0
    t: float = 0.0


@dataclass(frozen=True)
class Control:
    """Speed command (m/s) and Ackermann steering angle (rad)."""

    v_cmd: float
    steer: float

    def clamped(self, v_max: float = V_MAX, steer_max: float = STEER_MAX) -> "Control":
        return Control(
            v_cmd=min(max(self.v_cmd, -v_max), v_max),
            steer=min(max(self.steer, -steer_max), steer_max),
        )


@dataclass(frozen=True)
class InstabilityMetrics:
    """The three instability channels, reported as magnitudes."""

    sliding: float
    roll: float
    bumpiness: float

    def as_array(self) -> np.ndarray:
        return np.array([self.sliding, self.roll, self.bumpiness], dtype=np.float64)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    wheelbase: float = 0.55
    a_max_long: float = 3.0
    g: float = 9.81
    noise_scale: float = 0.0
    seed: int = 0
    v_max: float = V_MAX
    steer_max: float = STEER_MAX

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.wheelbase <= 0:
            raise ValueError("dt and wheelbase must be positive")


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass
class TerrainMap:
    """Grid world. cells[iy, ix] indexes the terrain type registry; the
    texture is a (H*T, W*T, 3) float array sampled by the camera model."""

    cell_size: float
    width: int
    height: int
    type_names: list[str]
    types: dict[str, TerrainType]
    cells: np.ndarray  # (height, width) int indices into type_names
    texture: np.ndarray  # (height*T, width*T, 3) float32 in [0, 1]
    seed: int = 0
    layout_spec: dict = field(default_factory=dict)

    @property
    def extent(self) -> tuple[float, float]:
        return self.width * self.cell_size, self.height * self.cell_size

    def in_bounds(self, x: float, y: float) -> bool:
        ex, ey = self.extent
        return 0.0 <= x < ex and 0.0 <= y < ey

    def clamp(self, x: float, y: float) -> tuple[float, float]:
        ex, ey = self.extent
        eps = 1e-9
        return min(max(x, 0.0), ex - eps), min(max(y, 0.0), ey - eps)

    def cell_index(self, x: float, y: float) -> tuple[int, int]:
        x, y = self.clamp(x, y)
        return int(x / self.cell_size), int(y / self.cell_size)

    def type_at(self, x: float, y: float) -> TerrainType:
        ix, iy = self.cell_index(x, y)
        return self.types[self.type_names[self.cells[iy, ix]]]

    def sample_texture(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Bilinear texture lookup at world coordinates (clamped to bounds).

        x, y may have any (matching) shape; returns shape + (3,).
        """
        tex = self.texture
        th, tw, _ = tex.shape
        scale = TEXELS_PER_CELL / self.cell_size
        # texel centers sit at (i + 0.5) / scale in world units
        fx = np.clip(np.asarray(x) * scale - 0.5, 0.0, tw - 1.000001)
        fy = np.clip(np.asarray(y) * scale - 0.5, 0.0, th - 1.000001)
        x0 = fx.astype(np.int64)
        y0 = fy.astype(np.int64)
        ax = (fx - x0)[..., None]
        ay = (fy - y0)[..., None]
        c00 = tex[y0, x0]
        c01 = tex[y0, x0 + 1]
        c10 = tex[y0 + 1, x0]
        c11 = tex[y0 + 1, x0 + 1]
        top = c00 * (1 - ax) + c01 * ax
        bot = c10 * (1 - ax) + c11 * ax
        return top * (1 - ay) + bot * ay

    def snapshot(self) -> dict:
        """JSON-friendly cell grid + colors for UIs."""
        return {
            "cell_size": self.cell_size,
            "width": self.width,
            "height": self.height,
            "type_names": list(self.type_names),
            "colors": {n: list(self.types[n].color) for n in self.type_names},
            "cells": self.cells.tolist(),
        }


def _build_cells(spec: dict, width: int, height: int, names: list[str]) -> np.ndarray:
    layout = spec.get("layout", "bands")
    index = {n: i for i, n in enumerate(names)}
    cells = np.zeros((height, width), dtype=np.int32)
    if layout == "bands":
        bands = spec.get("bands", names)
        axis = spec.get("band_axis", "x")
        for n in bands:
            if n not in index:
                raise TerrainError(f"unregistered terrain type {n!r} in bands")
        nb = len(bands)
        if axis == "x":
            edges = np.linspace(0, width, nb + 1).astype(int)
            for b, n in enumerate(bands):
                cells[:, edges[b] : edges[b + 1]] = index[n]
        else:
            edges = np.linspace(0, height, nb + 1).astype(int)
            for b, n in enumerate(bands):
                cells[edges[b] : edges[b + 1], :] = index[n]
    elif layout == "checkerboard":
        tile = int(spec.get("tile", 8))
        board = spec.get("board", names)
        for n in board:
            if n not in index:
                raise TerrainError(f"unregistered terrain type {n!r} in board")
        iy, ix = np.mgrid[0:height, 0:width]
        k = (ix // tile + iy // tile) % len(board)
        lut = np.array([index[n] for n in board], dtype=np.int32)
        cells = lut[k]
    elif layout == "cells":
        base = spec.get("base", names[0])
        if base not in index:
            raise TerrainError(f"unregistered base terrain type {base!r}")
        cells[:, :] = index[base]
        for entry in spec.get("cells", []):
            ix, iy, n = int(entry[0]), int(entry[1]), str(entry[2])
            if n not in index:
                raise TerrainError(f"unregistered terrain type {n!r} in cell list")
            if not (0 <= ix < width and 0 <= iy < height):
                raise TerrainError(f"cell ({ix}, {iy}) outside the map")
            cells[iy, ix] = index[n]
    else:
        raise TerrainError(f"unknown layout {layout!r}")
    return cells


def _build_texture(cells: np.ndarray, names: list[str], types: dict[str, TerrainType], seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E44A1]))
    h, w = cells.shape
    colors = np.array([types[n].color for n in names], dtype=np.float32)
    base = colors[cells]  # (h, w, 3)
    tex = np.repeat(np.repeat(base, TEXELS_PER_CELL, axis=0), TEXELS_PER_CELL, axis=1)
    # per-texel grain plus a slow large-scale mottling so patches carry
    # structure at both scales
    grain = rng.normal(0.0, 0.03, size=tex.shape).astype(np.float32)
    coarse = rng.normal(0.0, 0.05, size=(h, w, 1)).astype(np.float32)
    mottle = np.repeat(np.repeat(coarse, TEXELS_PER_CELL, axis=0), TEXELS_PER_CELL, axis=1)
    return np.clip(tex + grain + mottle, 0.0, 1.0)


def make_terrain_map(spec: dict, types: dict[str, TerrainType] | None = None) -> TerrainMap:
    """Build a deterministic terrain map from a layout spec.

    spec keys: width, height (cells), cell_size (m), seed, layout
    ("bands" | "checkerboard" | "cells") and the layout-specific fields
    (bands/band_axis, board/tile, base/cells). Types not present in the
    registry raise TerrainError.
    """
    registry = dict(DEFAULT_TERRAIN_TYPES)
    if types:
        registry.update(types)
    width = int(spec.get("width", 60))
    height = int(spec.get("height", 60))
    cell_size = float(spec.get("cell_size", 0.25))
    seed = int(spec.get("seed", 0))
    if width <= 0 or height <= 0 or cell_size <= 0:
        raise TerrainError("map dimensions must be positive")
    names = spec.get("types", sorted(registry))
    for n in names:
        if n not in registry:
            raise TerrainError(f"unregistered terrain type {n!r}")
    names = list(names)
    cells = _build_cells(spec, width, height, names)
    texture = _build_texture(cells, names, registry, seed)
    return TerrainMap(
        cell_size=cell_size,
        width=width,
        height=height,
        type_names=names,
        types={n: registry[n] for n in names},
        cells=cells,
        texture=texture,
        seed=seed,
        layout_spec=dict(spec),
    )


def lateral_accel(v: float, steer: float, wheelbase: float) -> float:
    kappa = math.tan(steer) / wheelbase
    return v * v * kappa


def oracle_metrics(
    state: VehicleState, control: Control, cell: TerrainType, cfg: SimConfig
) -> InstabilityMetrics:
    """Noise-free instability channels for driving at state.v with the given
    steering on the given terrain. Deterministic; uses the realized speed in
    state.v, not the command."""
    a_lat = abs(lateral_accel(state.v, control.steer, cfg.wheelbase))
    grip = cell.mu * cfg.g
    sliding = cell.c_slip * max(0.0, a_lat - grip)
    roll = cell.c_roll * min(a_lat, grip)
    bumpiness = cell.rough * abs(state.v)
    return InstabilityMetrics(sliding=sliding, roll=roll, bumpiness=bumpiness)


def noise_scales(cell: TerrainType, cfg: SimConfig) -> np.ndarray:
    """Per-channel noise std for noise_scale=1: the cell's characteristic
    magnitude of each channel."""
    grip = cell.mu * cfg.g
    return np.array(
        [cell.c_slip * grip, cell.c_roll * grip, cell.rough * cfg.v_max],
        dtype=np.float64,
    )


@dataclass(frozen=True)
class StepResult:
    state: VehicleState
    metrics: InstabilityMetrics
    clamped: bool
    cell_type: str


def step(
    state: VehicleState,
    control: Control,
    terrain: TerrainMap,
    cfg: SimConfig,
    rng: np.random.Generator | None = None,
) -> StepResult:
    """Advance one dt.

    Speed moves toward control.v_cmd rate-limited by a_max_long; the pose
    integrates unicycle kinematics at the new speed with a lateral drift
    equal to the sliding channel, directed outward from the turn. Reported
    metrics are oracle_metrics at the new speed on the departure cell, plus
    zero-mean Gaussian noise scaled by cfg.noise_scale (clipped at 0).
    Out-of-bounds poses are clamped and flagged.
    """
    control = control.clamped(cfg.v_max, cfg.steer_max)
    dv = control.v_cmd - state.v
    max_dv = cfg.a_max_long * cfg.dt
    dv = min(max(dv, -max_dv), max_dv)
    v_new = state.v + dv
    a_long = dv / cfg.dt

    cell = terrain.type_at(state.x, state.y)
    mid = replace(state, v=v_new)
    clean = oracle_metrics(mid, control, cell, cfg)
    metrics = clean
    if cfg.noise_scale > 0.0 and rng is not None:
        noise = rng.normal(0.0, 1.0, size=3) * noise_scales(cell, cfg) * cfg.noise_scale
        vals = np.maximum(clean.as_array() + noise, 0.0)
        metrics = InstabilityMetrics(*vals)

    kappa = math.tan(control.steer) / cfg.wheelbase
    a_lat = v_new * v_new * kappa
    # drift points away from the turn center: negative body-y for a left turn
    v_lat = -math.copysign(metrics.sliding, a_lat) if a_lat != 0.0 else 0.0
    omega = v_new * kappa
    yaw0 = state.yaw
    yaw1 = yaw0 + omega * cfg.dt
    if abs(omega) > 1e-9:
        # exact constant-curvature arc
        dx = v_new / omega * (math.sin(yaw1) - math.sin(yaw0))
        dy = -v_new / omega * (math.cos(yaw1) - math.cos(yaw0))
    else:
        dx = v_new * math.cos(yaw0) * cfg.dt
        dy = v_new * math.sin(yaw0) * cfg.dt
    yaw_mid = yaw0 + 0.5 * omega * cfg.dt
    dx += -v_lat * math.sin(yaw_mid) * cfg.dt
    dy += v_lat * math.cos(yaw_mid) * cfg.dt
    x, y = state.x + dx, state.y + dy
    clamped = not terrain.in_bounds(x, y)
    if clamped:
        x, y = terrain.clamp(x, y)
    nxt = VehicleState(
        x=x,
        y=y,
        yaw=wrap_angle(yaw1),
        v=v_new,
        roll_angle=0.02 * a_lat,
        pitch_angle=-0.02 * a_long,
        t=state.t + cfg.dt,
    )
    return StepResult(state=nxt, metrics=metrics, clamped=clamped, cell_type=cell.name)


def trajectory_record(state: VehicleState, control: Control, metrics: InstabilityMetrics, cell_type: str) -> dict:
    """One JSON-lines trajectory log record."""
    return {
        "t": round(state.t, 6),
        "x": state.x,
        "y": state.y,
        "yaw": state.yaw,
        "v": state.v,
        "v_cmd": control.v_cmd,
        "steer": control.steer,
        "sliding": metrics.sliding,
        "roll": metrics.roll,
        "bumpiness": metrics.bumpiness,
        "cell_type": cell_type,
    }


def write_trajectory_log(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
