"""Waypoint-loop benchmark comparing constraint-gated and vanilla planning.

Four methods share one terrain, one waypoint list and one noise seed:
  vanilla       full-speed sampling planner, no instability model
  cahsor        full-speed planner gated by the learned predictions
  slow          vanilla with the speed cap scaled down (default 0.625x)
  slow+cahsor   the capped planner with gating enabled

Each method drives the loop for the configured number of laps; the report
carries per-lap averages, channel maxima, lap times and DNF flags.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .kinodyn import KdModel
from .planner import Goal, MppiPlanner, NoVisibleTerrain, bev_predictor, build_bev_grid
from .sensing import ImageRing, render_camera_image
from .terrain import Control, VehicleState, make_terrain_map, step, trajectory_record, wrap_angle

METHODS = ("vanilla", "cahsor", "slow", "slow+cahsor")


class NavigationError(RuntimeError):
    pass


@dataclass
class LapStats:
    time_s: float
    mean_speed: float
    mean_bumpiness: float
    max_sliding: float
    max_roll: float
    dnf: bool


@dataclass
class MethodResult:
    method: str
    v_max: float
    laps: list[LapStats]
    top_speed: float

    @property
    def avg_speed(self) -> float:
        return float(np.mean([l.mean_speed for l in self.laps]))

    @property
    def avg_speed_std(self) -> float:
        return float(np.std([l.mean_speed for l in self.laps]))

    @property
    def avg_bumpiness(self) -> float:
        return float(np.mean([l.mean_bumpiness for l in self.laps]))

    @property
    def avg_bumpiness_std(self) -> float:
        return float(np.std([l.mean_bumpiness for l in self.laps]))

    @property
    def max_sliding(self) -> float:
        return float(np.max([l.max_sliding for l in self.laps]))

    @property
    def max_roll(self) -> float:
        return float(np.max([l.max_roll for l in self.laps]))

    @property
    def dnf_count(self) -> int:
        return sum(1 for l in self.laps if l.dnf)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "v_max": self.v_max,
            "top_speed": self.top_speed,
            "avg_speed": self.avg_speed,
            "avg_speed_std": self.avg_speed_std,
            "avg_bumpiness": self.avg_bumpiness,
            "avg_bumpiness_std": self.avg_bumpiness_std,
            "max_sliding": self.max_sliding,
            "max_roll": self.max_roll,
            "lap_times": [l.time_s for l in self.laps],
            "dnf_count": self.dnf_count,
        }


@dataclass
class RunReport:
    methods: list[MethodResult]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"methods": [m.to_dict() for m in self.methods], "metadata": self.metadata}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def get(self, method: str) -> MethodResult:
        for m in self.methods:
            if m.method == method:
                return m
        raise KeyError(method)


def _conservative_control(state: VehicleState, goal: Goal, steer_max: float) -> Control:
    bearing = math.atan2(goal.y - state.y, goal.x - state.x)
    err = wrap_angle(bearing - state.yaw)
    return Control(v_cmd=0.5, steer=float(np.clip(1.2 * err, -steer_max, steer_max)))


def run_method(
    method: str,
    config: Config,
    model: KdModel | None,
    seed: int,
    laps: int | None = None,
    diag_path=None,
) -> MethodResult:
    """Drive the waypoint loop with one method. Deterministic per seed."""
    if method not in METHODS:
        raise NavigationError(f"unknown method {method!r}; expected one of {METHODS}")
    gated = "cahsor" in method
    if gated and model is None:
        raise NavigationError(f"method {method!r} needs a trained vision+speed model bundle")
    course = config.course
    registry = config.terrain_registry()
    terrain = make_terrain_map(config.terrain_spec(), registry)
    camera = config.camera_model()
    sim = config.sim_config(seed=seed, noise_scale=float(course["noise_scale"]))
    v_max = float(config.sim["v_max"])
    if "slow" in method:
        v_max *= float(course["slow_factor"])
    mppi = config.mppi_config(v_max=v_max)
    limits = config.limits()
    waypoints = [Goal(float(w[0]), float(w[1]), radius=float(course["arrival_radius"])) for w in course["waypoints"]]
    n_laps = int(course["laps"]) if laps is None else laps
    budget = int(course["step_budget"])

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A7]))
    planner = MppiPlanner(mppi, limits, wheelbase=sim.wheelbase)
    state = VehicleState(x=waypoints[0].x, y=waypoints[0].y, yaw=0.0, v=0.0, t=0.0)
    ring = ImageRing(capacity=24)
    lap_stats: list[LapStats] = []
    top_speed = 0.0
    diag_records: list[dict] = []

    for lap in range(n_laps):
        speeds: list[float] = []
        bumps: list[float] = []
        max_slide = 0.0
        max_roll = 0.0
        t_start = state.t
        dnf = False
        for wp_idx, goal in enumerate(waypoints[1:] + [waypoints[0]], start=1):
            steps_left = budget
            while goal.distance(state.x, state.y) > goal.radius:
                steps_left -= 1
                if steps_left <= 0:
                    dnf = True
                    break
                ring.push(render_camera_image(terrain, state, camera))
                predictor = None
                diag = None
                if gated:
                    try:
                        grid = build_bev_grid(ring.snapshot(), state, model)
                        predictor = bev_predictor(grid, model)
                    except NoVisibleTerrain:
                        predictor = None
                if gated and predictor is None:
                    control = _conservative_control(state, goal, sim.steer_max)
                    infeasible = True
                else:
                    diag = planner.plan(state, goal, predictor, rng)
                    control = diag.control
                    infeasible = diag.infeasible
                res = step(state, control, terrain, sim, rng)
                state = res.state
                top_speed = max(top_speed, abs(state.v))
                speeds.append(abs(state.v))
                bumps.append(res.metrics.bumpiness)
                max_slide = max(max_slide, res.metrics.sliding)
                max_roll = max(max_roll, res.metrics.roll)
                if diag_path is not None:
                    rec = {"lap": lap, "waypoint": wp_idx, **trajectory_record(state, control, res.metrics, res.cell_type)}
                    rec["infeasible"] = bool(infeasible)
                    if diag is not None:
                        rec["best_cost"] = diag.best_cost
                        rec["mean_violations"] = diag.mean_violations
                    diag_records.append(rec)
            if dnf:
                break
        lap_stats.append(
            LapStats(
                time_s=state.t - t_start,
                mean_speed=float(np.mean(speeds)) if speeds else 0.0,
                mean_bumpiness=float(np.mean(bumps)) if bumps else 0.0,
                max_sliding=max_slide,
                max_roll=max_roll,
                dnf=dnf,
            )
        )
    if diag_path is not None:
        with open(diag_path, "w") as fh:
            for rec in diag_records:
                fh.write(json.dumps(rec) + "\n")
    return MethodResult(method=method, v_max=v_max, laps=lap_stats, top_speed=top_speed)


def run_benchmark(
    config: Config,
    methods: list[str],
    model: KdModel | None,
    seed: int,
    laps: int | None = None,
    out_dir=None,
) -> RunReport:
    """All methods share the terrain seed, noise seed and waypoint list."""
    results = []
    for method in methods:
        diag_path = None
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            diag_path = Path(out_dir) / f"diag_{method.replace('+', '_')}.jsonl"
        results.append(run_method(method, config, model, seed=seed, laps=laps, diag_path=diag_path))
    meta = {
        "seed": seed,
        "terrain_seed": config.terrain["seed"],
        "waypoints": config.course["waypoints"],
        "laps": int(config.course["laps"]) if laps is None else laps,
        "shared_across_methods": True,
        "config_hash": config.hash(),
    }
    report = RunReport(methods=results, metadata=meta)
    if out_dir is not None:
        report.save(Path(out_dir) / "report.json")
    return report
