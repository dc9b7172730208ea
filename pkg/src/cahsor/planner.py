"""Competence-aware control selection.

A sampling-based receding-horizon planner rolls out batches of
constant-curvature candidate trajectories, queries the learned instability
heads on a bird's-eye lattice of terrain patches, and exponentially weights
rollout costs so the vehicle drives toward the goal at the highest speed
whose predicted sliding/roll/bumpiness stay inside the configured limits.
"Infinitely large" violation costs are realized as a finite additive penalty
big enough to dominate any nominal cost spread.

A shared-control filter applies the same predictions to human commands: a
command predicted admissible passes through untouched, otherwise the nearest
admissible command on a fixed control lattice is returned under the weighted
norm (dv / 9.6)^2 + (dsteer / 1.0)^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kinodyn import KdModel
from .sensing import CameraImage, OdometryDelta, bilinear_sample_image, patch_grid
from .terrain import Control, VehicleState

BEV_FORWARD_M = 5.5
BEV_LATERAL_M = 3.0
BEV_ROWS_FORWARD = 15
BEV_COLS_LATERAL = 51


class PlannerError(RuntimeError):
    pass


class NoVisibleTerrain(PlannerError):
    """No lattice cell had an admissible patch; callers should fall back to a
    conservative speed cap."""


@dataclass(frozen=True)
class ConstraintLimits:
    max_sliding: float = 0.6
    max_roll: float = 0.12
    max_bumpiness: float = 0.06

    def __post_init__(self) -> None:
        if min(self.max_sliding, self.max_roll, self.max_bumpiness) <= 0:
            raise ValueError("limits must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.max_sliding, self.max_roll, self.max_bumpiness])


@dataclass(frozen=True)
class MppiConfig:
    horizon: int = 8
    samples: int = 550
    dt: float = 0.1
    temperature: float = 0.01
    noise_v: float = 0.8
    noise_steer: float = 0.15
    # time correlation of the exploration noise; without it the first-step
    # command barely feels the selection pressure on whole sequences
    noise_corr: float = 0.75
    violation_penalty: float = 1e6
    w_goal: float = 1.0
    w_speed: float = 0.3
    # rate limiting makes every command above v + a_max*H*dt indistinguishable
    # inside one horizon; a small reward on the command itself breaks that tie
    # toward full throttle
    w_cmd: float = 0.1
    v_max: float = 4.8
    v_min: float = -4.8  # sampling floor; courses may restrict to forward-only
    steer_max: float = 0.5
    a_max_long: float = 3.0
    margin: float = 0.0  # fraction shaved off limits at prediction time

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.samples < 2:
            raise ValueError("horizon must be >= 1 and samples >= 2")


@dataclass(frozen=True)
class Goal:
    x: float
    y: float
    radius: float = 0.75

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("arrival radius must be positive")

    def distance(self, x, y):
        return np.hypot(np.asarray(x) - self.x, np.asarray(y) - self.y)


def rollout_ackermann(state: VehicleState, controls: np.ndarray, cfg: MppiConfig, wheelbase: float = 0.55) -> np.ndarray:
    """Integrate one control sequence (H, 2); returns (H+1, 4) rows of
    (x, y, yaw, v) starting at the initial state. Constant-curvature exact
    arcs, first-order speed rate limit, no sliding."""
    out = rollout_batch(state, np.asarray(controls, dtype=np.float64)[None], cfg, wheelbase)
    return out[0]


def rollout_batch(state: VehicleState, controls: np.ndarray, cfg: MppiConfig, wheelbase: float = 0.55) -> np.ndarray:
    """Vectorized rollouts: controls (S, H, 2) -> states (S, H+1, 4)."""
    s_n, horizon, _ = controls.shape
    states = np.zeros((s_n, horizon + 1, 4))
    x = np.full(s_n, state.x)
    y = np.full(s_n, state.y)
    yaw = np.full(s_n, state.yaw)
    v = np.full(s_n, state.v)
    states[:, 0] = np.stack([x, y, yaw, v], axis=1)
    max_dv = cfg.a_max_long * cfg.dt
    for h in range(horizon):
        v_cmd = controls[:, h, 0]
        steer = controls[:, h, 1]
        v = v + np.clip(v_cmd - v, -max_dv, max_dv)
        omega = v * np.tan(steer) / wheelbase
        yaw1 = yaw + omega * cfg.dt
        turning = np.abs(omega) > 1e-9
        r = np.where(turning, v / np.where(turning, omega, 1.0), 0.0)
        dx = np.where(turning, r * (np.sin(yaw1) - np.sin(yaw)), v * np.cos(yaw) * cfg.dt)
        dy = np.where(turning, -r * (np.cos(yaw1) - np.cos(yaw)), v * np.sin(yaw) * cfg.dt)
        x = x + dx
        y = y + dy
        yaw = yaw1
        states[:, h + 1] = np.stack([x, y, yaw, v], axis=1)
    return states


@dataclass
class BevGrid:
    """Lattice of patch centers ahead of the vehicle in its own frame, with
    the vision embedding cached per cell for the current planning cycle."""

    centers_x: np.ndarray  # (BEV_ROWS_FORWARD,)
    centers_y: np.ndarray  # (BEV_COLS_LATERAL,)
    psi_v: np.ndarray  # (rows*cols, dim_v) float32
    visible_fraction: np.ndarray  # (rows*cols,)
    neighbor_filled: np.ndarray  # (rows*cols,) bool
    origin: VehicleState = field(default=VehicleState())
    patches: np.ndarray | None = None  # (rows*cols, 64, 64, 3) when kept

    @property
    def n_cells(self) -> int:
        return BEV_ROWS_FORWARD * BEV_COLS_LATERAL

    def cell_index(self, fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
        """Nearest lattice cell for vehicle-frame coordinates (clamped)."""
        step_x = BEV_FORWARD_M / BEV_ROWS_FORWARD
        step_y = BEV_LATERAL_M / BEV_COLS_LATERAL
        ix = np.clip(np.round(np.asarray(fx) / step_x - 0.5).astype(int), 0, BEV_ROWS_FORWARD - 1)
        iy = np.clip(
            np.round((np.asarray(fy) + BEV_LATERAL_M / 2) / step_y - 0.5).astype(int), 0, BEV_COLS_LATERAL - 1
        )
        return ix * BEV_COLS_LATERAL + iy

    def world_to_frame(self, wx: np.ndarray, wy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(-self.origin.yaw), math.sin(-self.origin.yaw)
        rx = np.asarray(wx) - self.origin.x
        ry = np.asarray(wy) - self.origin.y
        return rx * c - ry * s, rx * s + ry * c


def _lattice_centers() -> tuple[np.ndarray, np.ndarray]:
    step_x = BEV_FORWARD_M / BEV_ROWS_FORWARD
    step_y = BEV_LATERAL_M / BEV_COLS_LATERAL
    cx = (np.arange(BEV_ROWS_FORWARD) + 0.5) * step_x
    cy = -BEV_LATERAL_M / 2 + (np.arange(BEV_COLS_LATERAL) + 0.5) * step_y
    return cx, cy


def _extract_grid_patches(image: CameraImage, delta: OdometryDelta, centers: np.ndarray):
    """Extract every lattice patch from one image in a single gather.

    centers: (M, 2) vehicle-frame patch centers. Returns pixels (M, 64, 64, 3)
    float32 and visible fractions (M,).
    """
    gx0, gy0 = patch_grid(0.0, 0.0)
    xs = centers[:, 0][:, None, None] + gx0[None]
    ys = centers[:, 1][:, None, None] + gy0[None]
    px, py = delta.apply(xs, ys)
    u, v, w = image.homography_at_capture.project(px, py)
    colors, valid = bilinear_sample_image(image.pixels, u, v)
    valid = valid & (w > 1e-9)
    colors = np.where(valid[..., None], colors, 0.0).astype(np.float32)
    return colors, valid.mean(axis=(1, 2))


def encode_patches_chunked(model: KdModel, patches: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Vision embeddings for a big patch stack without a giant im2col blow-up."""
    outs = [model.encoders.encode_vision(patches[i : i + chunk]) for i in range(0, patches.shape[0], chunk)]
    return np.concatenate(outs, axis=0)


def build_bev_grid(
    image_history: list[CameraImage],
    state: VehicleState,
    model: KdModel,
    threshold: float = 0.6,
    keep_patches: bool = False,
) -> BevGrid:
    """Extract one patch per lattice center, newest frame first, falling back
    to older frames and then to the nearest visible neighbor (flagged). The
    vision embedding of every cell is computed once for the cycle."""
    if not image_history:
        raise NoVisibleTerrain("no camera frames available")
    cx, cy = _lattice_centers()
    centers = np.stack(np.meshgrid(cx, cy, indexing="ij"), axis=-1).reshape(-1, 2)
    m = centers.shape[0]
    pixels = np.zeros((m, 64, 64, 3), dtype=np.float32)
    fractions = np.zeros(m)
    filled = np.zeros(m, dtype=bool)
    for image in reversed(image_history):
        missing = ~filled
        if not missing.any():
            break
        delta = OdometryDelta.from_poses(image.pose_at_capture, state)
        colors, frac = _extract_grid_patches(image, delta, centers[missing])
        good = frac >= threshold
        idx = np.flatnonzero(missing)[good]
        pixels[idx] = colors[good]
        fractions[idx] = frac[good]
        filled[idx] = True
    if not filled.any():
        raise NoVisibleTerrain("no lattice cell reached the visibility threshold")
    neighbor_filled = ~filled
    if neighbor_filled.any():
        have = np.flatnonzero(filled)
        need = np.flatnonzero(~filled)
        d2 = ((centers[need][:, None, :] - centers[have][None, :, :]) ** 2).sum(axis=2)
        src = have[np.argmin(d2, axis=1)]
        pixels[need] = pixels[src]
        fractions[need] = fractions[src]
    psi_v = encode_patches_chunked(model, pixels)
    return BevGrid(
        centers_x=cx,
        centers_y=cy,
        psi_v=psi_v,
        visible_fraction=fractions,
        neighbor_filled=neighbor_filled,
        origin=state,
        patches=pixels if keep_patches else None,
    )


def bev_predictor(grid: BevGrid, model: KdModel):
    """Batched instability predictor over the cached lattice embeddings.

    Takes world-frame positions, speeds and controls of rollout steps and
    returns (M, 3) physical-unit predictions. Requires a vision+speed model
    (inertial responses of future states are not observable)."""
    if not (model.mode.pretraining == "tron" and model.mode.modalities == frozenset({"V", "S"})):
        raise PlannerError(f"planner needs a tron-vs model, got {model.mode.key}")
    enc = model.encoders

    def predict(wx: np.ndarray, wy: np.ndarray, speeds: np.ndarray, controls: np.ndarray) -> np.ndarray:
        fx, fy = grid.world_to_frame(wx, wy)
        cells = grid.cell_index(fx, fy)
        psi_v = grid.psi_v[cells]
        psi_s = enc.encode_speed(speeds.astype(np.float32))
        feats = enc.fuse(psi_v, psi_s)
        z = model.head_forward(feats, controls.astype(np.float32))
        return model.scaler.destandardize(z.astype(np.float64))

    return predict


@dataclass
class CandidateEvaluation:
    costs: np.ndarray  # (S,)
    violations: np.ndarray  # (S,) int count of violating steps
    nominal_costs: np.ndarray  # (S,) cost without the penalty term


def evaluate_candidates(
    states: np.ndarray,
    controls: np.ndarray,
    predictor,
    limits: ConstraintLimits,
    goal: Goal,
    cfg: MppiConfig,
) -> CandidateEvaluation:
    """Cost per rollout: goal distance at the end, negative mean speed, and a
    dominating penalty per step whose predicted instability exceeds the
    (margin-shaved) limits. All model queries happen in one batch."""
    s_n, hp1, _ = states.shape
    horizon = hp1 - 1
    terminal = goal.distance(states[:, -1, 0], states[:, -1, 1])
    mean_speed = np.abs(states[:, 1:, 3]).mean(axis=1)
    mean_cmd = controls[..., 0].mean(axis=1)
    nominal = cfg.w_goal * terminal - cfg.w_speed * mean_speed - cfg.w_cmd * mean_cmd
    violations = np.zeros(s_n, dtype=int)
    if predictor is not None:
        pre = states[:, :horizon]  # state at which each control is applied
        wx = pre[..., 0].reshape(-1)
        wy = pre[..., 1].reshape(-1)
        speeds = pre[..., 3].reshape(-1)
        u = controls.reshape(-1, 2)
        pred = predictor(wx, wy, speeds, u).reshape(s_n, horizon, 3)
        lim = limits.as_array() * (1.0 - cfg.margin)
        violations = (pred > lim[None, None, :]).any(axis=2).sum(axis=1)
    costs = nominal + cfg.violation_penalty * violations
    return CandidateEvaluation(costs=costs, violations=violations, nominal_costs=nominal)


@dataclass
class PlanDiagnostics:
    control: Control
    best_cost: float
    best_violations: int
    mean_violations: float
    infeasible: bool

    def to_dict(self) -> dict:
        return {
            "v_cmd": self.control.v_cmd,
            "steer": self.control.steer,
            "best_cost": self.best_cost,
            "best_violations": self.best_violations,
            "mean_violations": self.mean_violations,
            "infeasible": self.infeasible,
        }


class MppiPlanner:
    """Receding-horizon sampler holding the nominal control sequence."""

    def __init__(self, cfg: MppiConfig, limits: ConstraintLimits, wheelbase: float = 0.55):
        self.cfg = cfg
        self.limits = limits
        self.wheelbase = wheelbase
        self.nominal = np.zeros((cfg.horizon, 2))

    def reset(self) -> None:
        self.nominal[...] = 0.0

    def plan(
        self,
        state: VehicleState,
        goal: Goal,
        predictor,
        rng: np.random.Generator,
    ) -> PlanDiagnostics:
        cfg = self.cfg
        c = cfg.noise_corr
        base = rng.normal(0.0, 1.0, size=(cfg.samples, 1, 2))
        white = rng.normal(0.0, 1.0, size=(cfg.samples, cfg.horizon, 2))
        eps = c * base + math.sqrt(1.0 - c * c) * white
        eps[..., 0] *= cfg.noise_v
        eps[..., 1] *= cfg.noise_steer
        cand = self.nominal[None] + eps
        cand[0] = self.nominal  # keep the noise-free rollout in the set
        cand[..., 0] = np.clip(cand[..., 0], cfg.v_min, cfg.v_max)
        cand[..., 1] = np.clip(cand[..., 1], -cfg.steer_max, cfg.steer_max)
        states = rollout_batch(state, cand, cfg, self.wheelbase)
        ev = evaluate_candidates(states, cand, predictor, self.limits, goal, cfg)
        best = int(np.argmin(ev.costs))
        infeasible = bool(ev.violations.min() > 0)
        if infeasible:
            order = np.lexsort((ev.costs, ev.violations))
            pick = int(order[0])
            chosen = cand[pick]
            self.nominal = np.vstack([chosen[1:], chosen[-1:]])
            control = Control(float(chosen[0, 0]), float(chosen[0, 1]))
        else:
            w = np.exp(-(ev.costs - ev.costs.min()) / cfg.temperature)
            w /= w.sum()
            merged = (w[:, None, None] * cand).sum(axis=0)
            merged[:, 0] = np.clip(merged[:, 0], cfg.v_min, cfg.v_max)
            merged[:, 1] = np.clip(merged[:, 1], -cfg.steer_max, cfg.steer_max)
            control = Control(float(merged[0, 0]), float(merged[0, 1]))
            self.nominal = np.vstack([merged[1:], merged[-1:]])
        return PlanDiagnostics(
            control=control,
            best_cost=float(ev.costs[best]),
            best_violations=int(ev.violations[best]),
            mean_violations=float(ev.violations.mean()),
            infeasible=infeasible,
        )


# shared control ---------------------------------------------------------------

FILTER_V_LEVELS = 25
FILTER_STEER_LEVELS = 21
NORM_V_SCALE = 9.6
NORM_STEER_SCALE = 1.0


@dataclass
class SharedControlResult:
    control: Control
    pass_through: bool
    flag: str  # "" | "filtered" | "no-admissible"
    predicted: np.ndarray  # (3,) prediction for the returned control
    human_predicted: np.ndarray  # (3,) prediction for the raw command

    def to_dict(self) -> dict:
        return {
            "v_cmd": self.control.v_cmd,
            "steer": self.control.steer,
            "pass_through": self.pass_through,
            "flag": self.flag,
            "predicted": self.predicted.tolist(),
            "human_predicted": self.human_predicted.tolist(),
        }


def control_lattice(v_max: float = 4.8, steer_max: float = 0.5) -> np.ndarray:
    vs = np.linspace(-v_max, v_max, FILTER_V_LEVELS)
    ss = np.linspace(-steer_max, steer_max, FILTER_STEER_LEVELS)
    grid = np.stack(np.meshgrid(vs, ss, indexing="ij"), axis=-1)
    return grid.reshape(-1, 2)


def filter_human(
    u_h: Control,
    model: KdModel,
    limits: ConstraintLimits,
    patch: np.ndarray,
    speed: float,
    psd: np.ndarray,
    v_max: float = 4.8,
    steer_max: float = 0.5,
    margin: float = 0.0,
) -> SharedControlResult:
    """Minimal modification of a human command under the instability limits.

    The command passes through unchanged when its prediction is admissible;
    otherwise the admissible control lattice is scanned exhaustively for the
    weighted-norm nearest command. With nothing admissible the vehicle is
    commanded to stop while keeping the human steering.
    """
    if not (model.mode.pretraining == "tron" and model.mode.modalities == frozenset({"V", "S", "I"})):
        raise PlannerError(f"shared control needs a tron-vsi model, got {model.mode.key}")
    lim = limits.as_array() * (1.0 - margin)
    u_h = u_h.clamped(v_max, steer_max)
    feats_one = model.representation(
        patches=np.asarray(patch, dtype=np.float32)[None],
        speeds=np.array([speed], dtype=np.float32),
        psd=np.asarray(psd, dtype=np.float32)[None],
    )
    u_arr = np.array([[u_h.v_cmd, u_h.steer]], dtype=np.float32)
    z = model.head_forward(feats_one, u_arr)
    human_pred = model.scaler.destandardize(z.astype(np.float64))[0]
    if np.all(human_pred <= lim):
        return SharedControlResult(
            control=u_h, pass_through=True, flag="", predicted=human_pred, human_predicted=human_pred
        )
    lattice = control_lattice(v_max, steer_max)
    feats = np.repeat(feats_one, lattice.shape[0], axis=0)
    zl = model.head_forward(feats, lattice.astype(np.float32))
    preds = model.scaler.destandardize(zl.astype(np.float64))
    admissible = np.all(preds <= lim[None, :], axis=1)
    if not admissible.any():
        stop = Control(0.0, u_h.steer)
        zs = model.head_forward(feats_one, np.array([[stop.v_cmd, stop.steer]], dtype=np.float32))
        return SharedControlResult(
            control=stop,
            pass_through=False,
            flag="no-admissible",
            predicted=model.scaler.destandardize(zs.astype(np.float64))[0],
            human_predicted=human_pred,
        )
    d = ((lattice[:, 0] - u_h.v_cmd) / NORM_V_SCALE) ** 2 + ((lattice[:, 1] - u_h.steer) / NORM_STEER_SCALE) ** 2
    d = np.where(admissible, d, np.inf)
    pick = int(np.argmin(d))
    chosen = Control(float(lattice[pick, 0]), float(lattice[pick, 1]))
    return SharedControlResult(
        control=chosen,
        pass_through=False,
        flag="filtered",
        predicted=preds[pick],
        human_predicted=human_pred,
    )
