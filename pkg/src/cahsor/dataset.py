"""Self-supervised interaction dataset: collection, persistence, loading.

A seeded excitation policy (bounded random walk on the speed command,
steering biased toward patrol points that cycle across the terrain bands)
drives the simulator while the camera history, inertial window, and
instability targets are logged. Records are only kept at steps where two
admissible patch views of the current footprint exist.

On disk a dataset is four files:
  patches.cpt   CPT1 tensor file, 2N patch rasters (record i owns 2i, 2i+1)
  psd.cpt       CPT1 tensor file, N spectral features as 6x64 planes
  scalars.jsonl one JSON record per sample (pose, speed, control, targets,
                terrain label for analysis)
  manifest.json schema version, seed, hashes, and record count

The CPT1 container is 16 bytes of header (magic "CPT1", u32 count, u32 H,
u32 W, little-endian) followed by count*H*W*C float32 values, channel-last;
C is inferred from the file size (3 for patches, 1 for spectra).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Config
from .kinodyn import KdDataset
from .sensing import (
    ImageRing,
    InsufficientViews,
    candidate_views,
    psd,
    render_camera_image,
    synthesize_imu,
)
from .terrain import Control, InstabilityMetrics, VehicleState, make_terrain_map, step, trajectory_record, wrap_angle
from .tron import TronDataset

CPT_MAGIC = b"CPT1"


class DatasetError(RuntimeError):
    pass


def write_cpt(path, array: np.ndarray) -> None:
    """array: (count, H, W) or (count, H, W, C) float32."""
    a = np.ascontiguousarray(array, dtype="<f4")
    count, h, w = a.shape[:3]
    with open(path, "wb") as fh:
        fh.write(CPT_MAGIC)
        fh.write(struct.pack("<III", count, h, w))
        fh.write(a.tobytes())


def read_cpt(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CPT_MAGIC:
            raise DatasetError(f"not a CPT1 file: {path}")
        count, h, w = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4")
    per = count * h * w
    if per == 0 or data.size % per != 0:
        raise DatasetError(f"corrupt CPT1 payload in {path}")
    channels = data.size // per
    shape = (count, h, w) if channels == 1 else (count, h, w, channels)
    return data.reshape(shape).copy()


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class DatasetManifest:
    schema: int
    seed: int
    terrain_hash: str
    record_count: int
    files: dict[str, str]  # name -> sha256
    config_hash: str

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "seed": self.seed,
            "terrain_hash": self.terrain_hash,
            "record_count": self.record_count,
            "files": self.files,
            "config_hash": self.config_hash,
        }

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


class ExcitationPolicy:
    """Bounded random walk over the control box with patrol attraction so
    every terrain band gets visited and sustained aggressive maneuvers occur."""

    def __init__(self, cfg: dict, extent: tuple[float, float], rng: np.random.Generator, v_max: float, steer_max: float):
        self.cfg = cfg
        self.rng = rng
        self.v_max = v_max
        self.steer_max = steer_max
        ex, ey = extent
        self.extent = extent
        nx = 3
        self.patrol = [
            (ex * (i + 0.5) / nx, ey * (0.3 if i % 2 == 0 else 0.7))
            for i in range(nx)
        ]
        self.patrol_idx = 0
        self.hold = 0
        self.v_cmd = 0.0
        self.steer_noise = 0.0

    def next_control(self, state: VehicleState, dt: float) -> Control:
        c = self.cfg
        self.hold += 1
        if self.hold >= int(c["patrol_hold_steps"]):
            self.hold = 0
            self.patrol_idx = (self.patrol_idx + 1) % len(self.patrol)
        tx, ty = self.patrol[self.patrol_idx]
        bearing = math.atan2(ty - state.y, tx - state.x)
        err = wrap_angle(bearing - state.yaw)
        steer_track = float(np.clip(1.2 * err, -self.steer_max, self.steer_max))
        self.steer_noise += -0.8 * self.steer_noise * dt + c["ou_sigma_steer"] * math.sqrt(dt) * self.rng.normal()
        self.v_cmd += c["ou_theta_v"] * (c["ou_mu_v"] - self.v_cmd) * dt + c["ou_sigma_v"] * math.sqrt(dt) * self.rng.normal()
        self.v_cmd = float(np.clip(self.v_cmd, -self.v_max, self.v_max))
        ex, ey = self.extent
        margin = 1.2
        near_wall = state.x < margin or state.y < margin or state.x > ex - margin or state.y > ey - margin
        v_cmd = self.v_cmd
        steer = float(np.clip(steer_track + self.steer_noise, -self.steer_max, self.steer_max))
        if near_wall:
            cx, cy = ex / 2, ey / 2
            err_c = wrap_angle(math.atan2(cy - state.y, cx - state.x) - state.yaw)
            steer = float(np.clip(1.5 * err_c, -self.steer_max, self.steer_max))
            v_cmd = min(abs(v_cmd), 1.8)
        return Control(v_cmd=v_cmd, steer=steer)


def collect_dataset(config: Config, seed: int, out_dir) -> DatasetManifest:
    """Drive the simulator and write a dataset; deterministic per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    registry = config.terrain_registry()
    terrain = make_terrain_map(config.terrain_spec(), registry)
    camera = config.camera_model()
    sim = config.sim_config(seed=seed)
    ccfg = config.collect
    n_target = int(ccfg["records"])
    j_views = int(ccfg["views_per_record"])
    seq = np.random.SeedSequence([seed, 0xC0117EC7])
    rng_sim, rng_policy, rng_views, rng_imu = (np.random.default_rng(s) for s in seq.spawn(4))

    policy = ExcitationPolicy(ccfg, terrain.extent, rng_policy, sim.v_max, sim.steer_max)
    ex, ey = terrain.extent
    state = VehicleState(x=ex * 0.25, y=ey * 0.5, yaw=0.0, v=0.0, t=0.0)
    ring = ImageRing(capacity=24)
    metric_hist: list[InstabilityMetrics] = []
    speed_hist: list[float] = []

    patches = np.zeros((2 * n_target, 64, 64, 3), dtype=np.float32)
    spectra = np.zeros((n_target, 6, 64), dtype=np.float32)
    scalars: list[dict] = []
    trajectory: list[dict] = []
    n = 0
    step_count = 0
    max_steps = n_target * 40 + 400
    while n < n_target:
        step_count += 1
        if step_count > max_steps:
            raise DatasetError(f"collection stalled: {n}/{n_target} records after {step_count} steps")
        ring.push(render_camera_image(terrain, state, camera))
        control = policy.next_control(state, sim.dt)
        pending = None
        if len(metric_hist) >= 20:
            try:
                views = candidate_views(ring.snapshot(), state, j=j_views, rng=rng_views)
                window = synthesize_imu(
                    metric_hist[-20:], speed_hist[-20:], rng_imu, noise_floor=float(ccfg["noise_floor"])
                )
                feature = psd(window)
                pending = (views, feature)
            except InsufficientViews:
                pending = None
        res = step(state, control, terrain, sim, rng_sim)
        metric_hist.append(res.metrics)
        speed_hist.append(res.state.v)
        if len(metric_hist) > 20:
            del metric_hist[0], speed_hist[0]
        trajectory.append(trajectory_record(res.state, control, res.metrics, res.cell_type))
        if pending is not None:
            views, feature = pending
            patches[2 * n] = views.patches[0].pixels
            patches[2 * n + 1] = views.patches[min(1, len(views.patches) - 1)].pixels
            spectra[n] = feature.per_channel()
            scalars.append(
                {
                    "i": n,
                    "t": round(state.t, 6),
                    "x": state.x,
                    "y": state.y,
                    "yaw": state.yaw,
                    "speed": state.v,
                    "v_cmd": control.v_cmd,
                    "steer": control.steer,
                    "target_sliding": res.metrics.sliding,
                    "target_roll": res.metrics.roll,
                    "target_bumpiness": res.metrics.bumpiness,
                    "cell_type": res.cell_type,
                }
            )
            n += 1
        state = res.state

    write_cpt(out / "patches.cpt", patches)
    write_cpt(out / "psd.cpt", spectra)
    with open(out / "scalars.jsonl", "w") as fh:
        for rec in scalars:
            fh.write(json.dumps(rec) + "\n")
    with open(out / "trajectory.jsonl", "w") as fh:
        for rec in trajectory:
            fh.write(json.dumps(rec) + "\n")
    manifest = DatasetManifest(
        schema=1,
        seed=seed,
        terrain_hash=hashlib.sha256(terrain.cells.tobytes() + terrain.texture.tobytes()).hexdigest()[:16],
        record_count=n_target,
        files={name: _sha256(out / name) for name in ("patches.cpt", "psd.cpt", "scalars.jsonl")},
        config_hash=config.hash(),
    )
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    return manifest


def load_manifest(dataset_dir) -> DatasetManifest:
    d = json.loads((Path(dataset_dir) / "manifest.json").read_text())
    return DatasetManifest(
        schema=d["schema"],
        seed=d["seed"],
        terrain_hash=d["terrain_hash"],
        record_count=d["record_count"],
        files=d["files"],
        config_hash=d["config_hash"],
    )


def load_dataset(dataset_dir, verify: bool = True) -> KdDataset:
    """Read a dataset back; with verify=True the file hashes must match the
    manifest (bit-exact round trip)."""
    src = Path(dataset_dir)
    manifest = load_manifest(src)
    if verify:
        for name, expect in manifest.files.items():
            got = _sha256(src / name)
            if got != expect:
                raise DatasetError(f"{name} hash mismatch: manifest {expect[:12]}.., file {got[:12]}..")
    patches = read_cpt(src / "patches.cpt")
    spectra = read_cpt(src / "psd.cpt")
    records = [json.loads(line) for line in (src / "scalars.jsonl").read_text().splitlines()]
    n = manifest.record_count
    if patches.shape[0] != 2 * n or spectra.shape[0] != n or len(records) != n:
        raise DatasetError("manifest record count disagrees with the data files")
    return KdDataset(
        views1=patches[0::2],
        views2=patches[1::2],
        speeds=np.array([r["speed"] for r in records], dtype=np.float32),
        psd=spectra.reshape(n, -1),
        controls=np.array([[r["v_cmd"], r["steer"]] for r in records], dtype=np.float32),
        targets=np.array(
            [[r["target_sliding"], r["target_roll"], r["target_bumpiness"]] for r in records], dtype=np.float64
        ),
        terrain_labels=[r["cell_type"] for r in records],
        times=np.array([r["t"] for r in records], dtype=np.float64),
    )


def tron_view(ds: KdDataset, limit: int | None = None) -> TronDataset:
    """Self-supervised view of the interaction records (no targets)."""
    end = len(ds) if limit is None else min(limit, len(ds))
    return TronDataset(views1=ds.views1[:end], views2=ds.views2[:end], speeds=ds.speeds[:end], psd=ds.psd[:end])
