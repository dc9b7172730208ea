"""Observation synthesis and multimodal feature extraction.

The camera model renders forward images from the terrain texture through an
attitude-dependent ground-plane homography; the same homography drives
viewpoint-invariant extraction of bird's-eye terrain patches from past
frames. Inertial windows are synthesized from recent instability history so
the channel energies carry the same information a contact IMU would, and a
folded, energy-normalized periodogram turns windows into fixed-width
spectral features.

Frames: vehicle frame is x forward, y left, z up, origin on the ground under
the vehicle center. Camera frame is x right, y down, z along the optical
axis. Positive pitch tips the nose (or mount) down; positive roll lifts the
right side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .terrain import InstabilityMetrics, TerrainMap, VehicleState, wrap_angle

PATCH_SIZE = 64
PATCH_LENGTH = 0.85  # m along vehicle x
PATCH_WIDTH = 0.65  # m along vehicle y
VISIBILITY_THRESHOLD = 0.6
HISTORY_MIN_S = 0.5
HISTORY_MAX_S = 2.0
SKY_COLOR = (0.70, 0.85, 1.00)

IMU_RATE = 100
IMU_DURATION = 2.0
IMU_CHANNELS = 6  # accel x, y, z then gyro x, y, z
PSD_BINS = 64
PSD_NFFT = 2 * PSD_BINS


class SensingError(RuntimeError):
    pass


class DegenerateViewError(SensingError):
    """Camera does not look down at the ground at all."""


class PatchNotVisible(SensingError):
    """Extraction fell below the visibility threshold."""


class InsufficientViews(SensingError):
    """Fewer than two admissible patch views in the history window."""


@dataclass(frozen=True)
class CameraModel:
    height: float = 0.3
    mount_pitch: float = 0.35
    focal: float = 110.0
    image_w: int = 128
    image_h: int = 96
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self) -> None:
        if self.focal <= 0 or self.height <= 0:
            raise SensingError("camera focal and height must be positive")

    @property
    def principal(self) -> tuple[float, float]:
        cx = (self.image_w - 1) / 2.0 if self.cx is None else self.cx
        cy = (self.image_h - 1) / 2.0 if self.cy is None else self.cy
        return cx, cy

    def intrinsics(self) -> np.ndarray:
        cx, cy = self.principal
        return np.array(
            [[self.focal, 0.0, cx], [0.0, self.focal, cy], [0.0, 0.0, 1.0]]
        )


def _rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


# camera axes (right, down, forward) expressed in the level vehicle frame
_AXES = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def camera_rotation(camera: CameraModel, roll: float, pitch: float) -> np.ndarray:
    """Columns are the camera axes in vehicle coordinates."""
    return _rot_x(roll) @ _rot_y(pitch + camera.mount_pitch) @ _AXES


@dataclass(frozen=True)
class Homography:
    """3x3 map from vehicle-frame ground coordinates (x, y, 1) to pixel
    homogeneous coordinates; the scale component equals camera depth, so a
    projection is in front of the camera iff it is positive."""

    matrix: np.ndarray

    def project(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (u, v, depth); callers must mask depth <= 0."""
        h = self.matrix
        w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
        safe = np.where(np.abs(w) < 1e-12, 1e-12, w)
        u = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / safe
        v = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / safe
        return u, v, w

    def back_project(self, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel -> ground (x, y); third value is the homogeneous scale whose
        sign distinguishes ground ahead from behind-the-horizon pixels."""
        hinv = np.linalg.inv(self.matrix)
        w = hinv[2, 0] * u + hinv[2, 1] * v + hinv[2, 2]
        safe = np.where(np.abs(w) < 1e-12, 1e-12, w)
        x = (hinv[0, 0] * u + hinv[0, 1] * v + hinv[0, 2]) / safe
        y = (hinv[1, 0] * u + hinv[1, 1] * v + hinv[1, 2]) / safe
        return x, y, w


def homography_from_pose(camera: CameraModel, roll: float, pitch: float) -> Homography:
    """Ground-plane homography for the camera at the given vehicle attitude.

    Raises DegenerateViewError when the optical axis fails to descend toward
    the ground (horizon-crossing configuration).
    """
    if abs(roll) >= 0.5 or abs(pitch) >= 0.5:
        raise SensingError("attitude outside the modeled range (|roll|,|pitch| < 0.5 rad)")
    r = camera_rotation(camera, roll, pitch)
    if r[2, 2] >= -1e-6:  # z-component of the optical axis must point down
        raise DegenerateViewError("optical axis does not descend to the ground")
    center = np.array([0.0, 0.0, camera.height])
    rt = r.T
    cols = np.column_stack([rt[:, 0], rt[:, 1], -rt @ center])
    return Homography(matrix=camera.intrinsics() @ cols)


@dataclass(frozen=True)
class CameraImage:
    pixels: np.ndarray  # (image_h, image_w, 3) float32 in [0, 1]
    pose_at_capture: VehicleState
    homography_at_capture: Homography
    camera: CameraModel


def render_camera_image(terrain: TerrainMap, state: VehicleState, camera: CameraModel) -> CameraImage:
    """Ray-cast every pixel through the ground plane and sample the map
    texture bilinearly; pixels whose ray does not descend are sky-colored."""
    homog = homography_from_pose(camera, state.roll_angle, state.pitch_angle)
    r = camera_rotation(camera, state.roll_angle, state.pitch_angle)
    cx, cy = camera.principal
    us, vs = np.meshgrid(np.arange(camera.image_w), np.arange(camera.image_h))
    dirs_cam = np.stack(
        [(us - cx) / camera.focal, (vs - cy) / camera.focal, np.ones_like(us, dtype=np.float64)],
        axis=-1,
    )
    dirs = dirs_cam @ r.T  # vehicle-frame ray directions
    dz = dirs[..., 2]
    ground = dz < -1e-9
    s = np.where(ground, -camera.height / np.where(ground, dz, -1.0), 0.0)
    px = s * dirs[..., 0]
    py = s * dirs[..., 1]
    cos_y, sin_y = math.cos(state.yaw), math.sin(state.yaw)
    wx = state.x + px * cos_y - py * sin_y
    wy = state.y + px * sin_y + py * cos_y
    colors = terrain.sample_texture(wx, wy)
    img = np.empty((camera.image_h, camera.image_w, 3), dtype=np.float32)
    img[...] = np.asarray(SKY_COLOR, dtype=np.float32)
    img[ground] = colors[ground].astype(np.float32)
    return CameraImage(pixels=img, pose_at_capture=state, homography_at_capture=homog, camera=camera)


@dataclass(frozen=True)
class OdometryDelta:
    """Planar transform taking coordinates in the later frame to the earlier
    (capture) frame: p_capture = R(dyaw) p_now + (dx, dy)."""

    dx: float
    dy: float
    dyaw: float

    @staticmethod
    def identity() -> "OdometryDelta":
        return OdometryDelta(0.0, 0.0, 0.0)

    @staticmethod
    def from_poses(capture: VehicleState, now: VehicleState) -> "OdometryDelta":
        dyaw = wrap_angle(now.yaw - capture.yaw)
        rx = now.x - capture.x
        ry = now.y - capture.y
        c, s = math.cos(-capture.yaw), math.sin(-capture.yaw)
        return OdometryDelta(dx=rx * c - ry * s, dy=rx * s + ry * c, dyaw=dyaw)

    def compose(self, later: "OdometryDelta") -> "OdometryDelta":
        """self: a->b, later: b->c, result: a->c."""
        c, s = math.cos(self.dyaw), math.sin(self.dyaw)
        return OdometryDelta(
            dx=self.dx + later.dx * c - later.dy * s,
            dy=self.dy + later.dx * s + later.dy * c,
            dyaw=wrap_angle(self.dyaw + later.dyaw),
        )

    def apply(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(self.dyaw), math.sin(self.dyaw)
        return self.dx + x * c - y * s, self.dy + x * s + y * c


@dataclass(frozen=True)
class TerrainPatch:
    pixels: np.ndarray  # (PATCH_SIZE, PATCH_SIZE, 3) float32 in [0, 1]
    visible_fraction: float
    footprint: tuple[float, float] = (PATCH_LENGTH, PATCH_WIDTH)


@dataclass(frozen=True)
class PatchSet:
    patches: list[TerrainPatch]
    offsets_s: list[float]


def patch_grid(center_x: float = 0.0, center_y: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Vehicle-frame ground coordinates of the 64x64 patch raster centered at
    (center_x, center_y); row 0 is the front edge, column 0 the left edge."""
    xs = center_x + PATCH_LENGTH / 2 - (np.arange(PATCH_SIZE) + 0.5) * (PATCH_LENGTH / PATCH_SIZE)
    ys = center_y + PATCH_WIDTH / 2 - (np.arange(PATCH_SIZE) + 0.5) * (PATCH_WIDTH / PATCH_SIZE)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return gx, gy


def bilinear_sample_image(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample an (H, W, 3) image at float pixel coordinates.

    Returns (colors, valid): out-of-frame samples are zeros with valid False.
    """
    h, w, _ = image.shape
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(u, 0, w - 1.000001)
    vc = np.clip(v, 0, h - 1.000001)
    x0 = uc.astype(np.int64)
    y0 = vc.astype(np.int64)
    ax = (uc - x0)[..., None]
    ay = (vc - y0)[..., None]
    c00 = image[y0, x0]
    c01 = image[y0, x0 + 1]
    c10 = image[y0 + 1, x0]
    c11 = image[y0 + 1, x0 + 1]
    out = (c00 * (1 - ax) + c01 * ax) * (1 - ay) + (c10 * (1 - ax) + c11 * ax) * ay
    out = np.where(valid[..., None], out, 0.0)
    return out.astype(np.float32), valid


def extract_patch(
    image: CameraImage,
    delta: OdometryDelta,
    center: tuple[float, float] = (0.0, 0.0),
    min_visible: float | None = None,
) -> TerrainPatch:
    """Extract the patch centered at `center` in the current vehicle frame
    from a past image, mapping each raster point back through the odometry
    delta and the capture homography. Raises PatchNotVisible when a
    min_visible threshold is given and not met."""
    gx, gy = patch_grid(*center)
    px, py = delta.apply(gx, gy)
    u, v, w = image.homography_at_capture.project(px, py)
    colors, valid = bilinear_sample_image(image.pixels, u, v)
    valid = valid & (w > 1e-9)
    colors = np.where(valid[..., None], colors, 0.0).astype(np.float32)
    fraction = float(valid.mean())
    if min_visible is not None and fraction < min_visible:
        raise PatchNotVisible(f"visible fraction {fraction:.3f} < {min_visible:.3f}")
    return TerrainPatch(pixels=colors, visible_fraction=fraction)


def candidate_views(
    image_history: list[CameraImage],
    current_state: VehicleState,
    j: int,
    rng: np.random.Generator | None = None,
    threshold: float = VISIBILITY_THRESHOLD,
) -> PatchSet:
    """Admissible same-footprint views of the patch under the current pose,
    taken from history frames 0.5 s to 2.0 s old. Needs at least two
    admissible views; if more qualify, j are drawn uniformly."""
    if not image_history:
        raise InsufficientViews("empty image history")
    t_now = current_state.t
    ages = [t_now - img.pose_at_capture.t for img in image_history]
    if max(ages) < HISTORY_MIN_S - 1e-9:
        raise InsufficientViews("history spans less than 0.5 s")
    admissible: list[tuple[float, TerrainPatch]] = []
    for img, age in zip(image_history, ages):
        if age < HISTORY_MIN_S - 1e-9 or age > HISTORY_MAX_S + 1e-9:
            continue
        delta = OdometryDelta.from_poses(img.pose_at_capture, current_state)
        patch = extract_patch(img, delta)
        if patch.visible_fraction >= threshold:
            admissible.append((age, patch))
    if len(admissible) < 2:
        raise InsufficientViews(f"only {len(admissible)} admissible views")
    if len(admissible) > j:
        if rng is None:
            picks = np.linspace(0, len(admissible) - 1, j).round().astype(int)
        else:
            picks = np.sort(rng.choice(len(admissible), size=j, replace=False))
        admissible = [admissible[i] for i in picks]
    return PatchSet(patches=[p for _, p in admissible], offsets_s=[a for a, _ in admissible])


@dataclass(frozen=True)
class ImuWindow:
    accel: np.ndarray  # (3, K) m/s^2
    gyro: np.ndarray  # (3, K) rad/s
    rate: int = IMU_RATE
    duration: float = IMU_DURATION

    def __post_init__(self) -> None:
        k = int(round(self.rate * self.duration))
        if self.accel.shape != (3, k) or self.gyro.shape != (3, k):
            raise SensingError(f"window must hold {k} samples per channel")

    @property
    def k(self) -> int:
        return self.accel.shape[1]

    def channels(self) -> np.ndarray:
        return np.vstack([self.accel, self.gyro])


# synthesis gains: per-sample gyro-x std per unit roll metric, accel-y std
# per unit sliding
GYRO_ROLL_GAIN = 0.1
ACCEL_SLIDE_GAIN = 1.0


def synthesize_imu(
    metric_history: list[InstabilityMetrics],
    speeds: list[float],
    rng: np.random.Generator,
    noise_floor: float = 0.02,
    rate: int = IMU_RATE,
    duration: float = IMU_DURATION,
    dt: float = 0.1,
) -> ImuWindow:
    """Synthesize an inertial window whose channel statistics encode the
    recent instability history.

    accel-z is white noise whose differenced-signal jerk matches the mean
    bumpiness of the window exactly; gyro-x is band-limited noise with
    per-sample std proportional to the roll metric; accel-y std follows the
    sliding metric. Remaining channels carry only the noise floor.
    """
    n_seg = int(round(duration / dt))
    if len(metric_history) != n_seg or len(speeds) != n_seg:
        raise SensingError(f"need exactly {n_seg} history entries")
    k = int(round(rate * duration))
    per_seg = k // n_seg
    dt_s = 1.0 / rate

    base = rng.normal(0.0, 1.0, size=(IMU_CHANNELS, k))
    accel = np.zeros((3, k))
    gyro = np.zeros((3, k))

    bump = np.repeat([m.bumpiness for m in metric_history], per_seg)
    slide = np.repeat([m.sliding for m in metric_history], per_seg)
    roll = np.repeat([m.roll for m in metric_history], per_seg)

    accel[0] = base[0] * noise_floor
    accel[1] = base[1] * (ACCEL_SLIDE_GAIN * slide + noise_floor)
    sigma_z = (bump + noise_floor) * dt_s * math.sqrt(math.pi) / 2.0
    az = base[2] * sigma_z
    target_jerk = float(np.mean(bump + noise_floor))
    realized = float(np.abs(np.diff(az)).mean() / dt_s)
    if realized > 0.0 and target_jerk > 0.0:
        az *= target_jerk / realized
    accel[2] = az

    smooth = np.convolve(base[3], np.ones(5) / 5.0, mode="same")
    seg_std = smooth.reshape(n_seg, per_seg).std(axis=1)
    seg_scale = np.where(seg_std > 0, 1.0 / np.where(seg_std > 0, seg_std, 1.0), 0.0)
    target_g = np.array([GYRO_ROLL_GAIN * m.roll + noise_floor for m in metric_history])
    gyro[0] = smooth * np.repeat(seg_scale * target_g, per_seg)
    gyro[1] = base[4] * noise_floor
    gyro[2] = base[5] * noise_floor
    return ImuWindow(accel=accel, gyro=gyro, rate=rate, duration=duration)


@dataclass(frozen=True)
class PsdFeature:
    """Energy-normalized spectral densities, 64 bins per channel, 6 channels
    concatenated (accel x, y, z, gyro x, y, z)."""

    values: np.ndarray  # (384,) float32, >= 0
    bins: int = PSD_BINS

    def per_channel(self) -> np.ndarray:
        return self.values.reshape(IMU_CHANNELS, self.bins)


def _psd_channel(x: np.ndarray, fs: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    k = x.size
    x = x - x.mean()
    var = float((x * x).mean())
    if var <= 0.0:
        return np.zeros(PSD_BINS)
    n = np.arange(k)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / k)
    xw = x * w
    folded = np.zeros(PSD_NFFT)
    for start in range(0, k, PSD_NFFT):
        seg = xw[start : start + PSD_NFFT]
        folded[: seg.size] += seg
    spec = np.abs(np.fft.rfft(folded)) ** 2
    dens = spec / (fs * (w * w).sum())
    dens[1:-1] *= 2.0
    dens = dens[:PSD_BINS]
    integral = dens.sum() * (fs / PSD_NFFT)
    if integral > 0.0:
        dens *= var / integral
    return dens


def psd(window: ImuWindow) -> PsdFeature:
    """Per-channel periodogram: mean removal, periodic Hann window, the
    200-sample windowed signal folded (time-aliased) to 128 samples, then a
    one-sided magnitude-squared FFT kept to 64 bins and rescaled so each
    channel's integral equals its signal variance exactly."""
    chans = window.channels()
    fs = float(window.rate)
    feats = [_psd_channel(chans[i], fs) for i in range(IMU_CHANNELS)]
    return PsdFeature(values=np.concatenate(feats).astype(np.float32))


@dataclass
class ImageRing:
    """Bounded image history owned by one producer; consumers receive the
    immutable CameraImage snapshots."""

    capacity: int = 24
    frames: list[CameraImage] = field(default_factory=list)

    def push(self, image: CameraImage) -> None:
        self.frames.append(image)
        if len(self.frames) > self.capacity:
            del self.frames[0 : len(self.frames) - self.capacity]

    def snapshot(self) -> list[CameraImage]:
        return list(self.frames)
