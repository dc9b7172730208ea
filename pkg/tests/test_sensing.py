import math

import numpy as np
import pytest

from cahsor import sensing as sn
from cahsor.terrain import InstabilityMetrics, TerrainMap, TerrainType, VehicleState, make_terrain_map

BANDS_SPEC = {
    "layout": "bands",
    "bands": ["pavement", "grass", "rocks"],
    "band_axis": "x",
    "width": 60,
    "height": 60,
    "cell_size": 0.25,
    "seed": 7,
    "types": ["pavement", "grass", "rocks"],
}

# steep wide-angle rig that can see the ground directly under the vehicle
TOPDOWN_CAMERA = sn.CameraModel(height=1.5, mount_pitch=1.2, focal=40.0)


def uniform_map(color=(0.3, 0.6, 0.2)) -> TerrainMap:
    m = make_terrain_map({**BANDS_SPEC, "bands": ["grass"], "types": ["grass"]})
    m.texture[...] = np.asarray(color, dtype=np.float32)
    return m


def drive_straight_history(terrain, camera, v=2.0, dt=0.1, steps=21, start=(2.0, 7.5)):
    frames = []
    for k in range(steps):
        st = VehicleState(x=start[0] + v * dt * k, y=start[1], t=dt * k)
        frames.append(sn.render_camera_image(terrain, st, camera))
    current = VehicleState(x=start[0] + v * dt * steps, y=start[1], t=dt * steps)
    return frames, current


def test_on_axis_ground_point_maps_to_principal_point():
    cam = sn.CameraModel()
    h = sn.homography_from_pose(cam, 0.0, 0.0)
    x_axis = cam.height / math.tan(cam.mount_pitch)
    u, v, w = h.project(np.array(x_axis), np.array(0.0))
    cx, cy = cam.principal
    assert w > 0
    assert float(u) == pytest.approx(cx, abs=1e-9)
    assert float(v) == pytest.approx(cy, abs=1e-9)


def test_roll_changes_homography():
    cam = sn.CameraModel()
    a = sn.homography_from_pose(cam, 0.0, 0.0).matrix
    b = sn.homography_from_pose(cam, 0.1, 0.0).matrix
    assert np.max(np.abs(a - b)) > 1e-6


def test_roll_breaks_lateral_symmetry():
    cam = sn.CameraModel()
    h = sn.homography_from_pose(cam, 0.1, 0.0)
    u1, v1, _ = h.project(np.array(1.5), np.array(0.4))
    u2, v2, _ = h.project(np.array(1.5), np.array(-0.4))
    cx, _ = cam.principal
    assert abs((u1 - cx) + (u2 - cx)) > 1e-3 or abs(v1 - v2) > 1e-3


def test_homography_round_trip():
    cam = sn.CameraModel()
    rng = np.random.default_rng(0)
    for roll, pitch in [(0.0, 0.0), (0.1, -0.05), (-0.3, 0.2), (0.25, 0.3)]:
        h = sn.homography_from_pose(cam, roll, pitch)
        x = rng.uniform(0.6, 4.0, size=100)
        y = rng.uniform(-0.8, 0.8, size=100)
        u, v, w = h.project(x, y)
        ok = w > 0
        assert ok.mean() > 0.5
        xb, yb, wb = h.back_project(u[ok], v[ok])
        assert np.all(wb > 0)
        assert np.max(np.abs(xb - x[ok])) < 1e-6
        assert np.max(np.abs(yb - y[ok])) < 1e-6


def test_degenerate_configuration_raises():
    cam = sn.CameraModel(mount_pitch=0.35)
    with pytest.raises(sn.DegenerateViewError):
        sn.homography_from_pose(cam, 0.0, -0.4)


def test_attitude_range_enforced():
    cam = sn.CameraModel()
    with pytest.raises(sn.SensingError):
        sn.homography_from_pose(cam, 0.6, 0.0)


def test_render_uniform_map_ground_pixels():
    m = uniform_map()
    cam = sn.CameraModel()
    img = sn.render_camera_image(m, VehicleState(x=7.5, y=7.5), cam)
    ground = img.pixels[-1]  # bottom row looks at nearby ground
    assert np.allclose(ground, [0.3, 0.6, 0.2], atol=1e-5)
    sky = img.pixels[0, 0]
    assert np.allclose(sky, sn.SKY_COLOR, atol=1e-5)


def test_render_deterministic():
    m = make_terrain_map(BANDS_SPEC)
    cam = sn.CameraModel()
    st = VehicleState(x=4.0, y=7.0, yaw=0.3, roll_angle=0.05, pitch_angle=-0.02)
    a = sn.render_camera_image(m, st, cam)
    b = sn.render_camera_image(m, st, cam)
    assert np.array_equal(a.pixels, b.pixels)


def test_render_boundary_sides():
    m = make_terrain_map(BANDS_SPEC)
    cam = sn.CameraModel()
    # pavement/grass boundary at world x = 5.0; look straight at it
    st = VehicleState(x=3.5, y=7.5, yaw=0.0)
    img = sn.render_camera_image(m, st, cam)
    h = img.homography_at_capture
    us, vs = np.meshgrid(np.arange(cam.image_w), np.arange(cam.image_h))
    gx, gy, w = h.back_project(us.astype(float), vs.astype(float))
    world_x = st.x + gx
    near = (w > 0) & (gx > 0.4) & (gx < 4.0) & (np.abs(gy) < 1.0)
    pav = near & (world_x < 4.9)
    grs = near & (world_x > 5.1)
    assert pav.sum() > 50 and grs.sum() > 50
    pav_mean = img.pixels[pav].mean(axis=0)
    grs_mean = img.pixels[grs].mean(axis=0)
    assert np.allclose(pav_mean, [0.58, 0.58, 0.60], atol=0.05)
    assert np.allclose(grs_mean, [0.22, 0.52, 0.18], atol=0.05)


def test_extract_identity_fully_visible():
    m = make_terrain_map(BANDS_SPEC)
    cam = sn.CameraModel()
    img = sn.render_camera_image(m, VehicleState(x=3.0, y=7.5), cam)
    patch = sn.extract_patch(img, sn.OdometryDelta.identity(), center=(1.2, 0.0))
    assert patch.visible_fraction == 1.0
    assert patch.pixels.shape == (64, 64, 3)
    assert patch.pixels.min() >= 0.0 and patch.pixels.max() <= 1.0


def test_extract_round_trip_against_texture():
    m = make_terrain_map(BANDS_SPEC)
    cam = sn.CameraModel()
    pose_a = VehicleState(x=3.0, y=7.5, t=0.0)
    pose_b = VehicleState(x=4.0, y=7.5, t=0.5)
    img = sn.render_camera_image(m, pose_a, cam)
    delta = sn.OdometryDelta.from_poses(pose_a, pose_b)
    patch = sn.extract_patch(img, delta, min_visible=0.99)
    gx, gy = sn.patch_grid()
    direct = m.sample_texture(pose_b.x + gx, pose_b.y + gy)
    err = np.abs(patch.pixels - direct).mean()
    assert err < 0.05


def test_extract_error_decreases_with_distance():
    m = make_terrain_map(BANDS_SPEC)
    cam = sn.CameraModel()
    pose_a = VehicleState(x=1.0, y=7.5, t=0.0)
    img = sn.render_camera_image(m, pose_a, cam)
    errs = []
    for d in (3.5, 2.5, 1.5):
        pose_b = VehicleState(x=1.0 + d, y=7.5)
        patch = sn.extract_patch(img, sn.OdometryDelta.from_poses(pose_a, pose_b))
        gx, gy = sn.patch_grid()
        direct = m.sample_texture(pose_b.x + gx, pose_b.y + gy)
        errs.append(np.abs(patch.pixels - direct).mean())
    assert errs[0] > errs[1] > errs[2]


def test_extract_behind_view_rejected():
    m = make_terrain_map(BANDS_SPEC)
    cam = sn.CameraModel()
    img = sn.render_camera_image(m, VehicleState(x=6.0, y=7.5), cam)
    behind = sn.OdometryDelta(dx=-2.0, dy=0.0, dyaw=0.0)
    with pytest.raises(sn.PatchNotVisible):
        sn.extract_patch(img, behind, min_visible=0.6)


def test_candidate_views_straight_run():
    m = make_terrain_map(BANDS_SPEC)
    cam = sn.CameraModel()
    frames, current = drive_straight_history(m, cam)
    views = sn.candidate_views(frames, current, j=4, rng=np.random.default_rng(0))
    assert len(views.patches) >= 2
    assert all(p.visible_fraction >= sn.VISIBILITY_THRESHOLD for p in views.patches)
    assert all(sn.HISTORY_MIN_S - 1e-9 <= o <= sn.HISTORY_MAX_S + 1e-9 for o in views.offsets_s)


def test_candidate_views_stationary_returns_copies():
    m = make_terrain_map(BANDS_SPEC)
    frames = [
        sn.render_camera_image(m, VehicleState(x=7.5, y=7.5, t=0.1 * k), TOPDOWN_CAMERA)
        for k in range(21)
    ]
    current = VehicleState(x=7.5, y=7.5, t=2.1)
    views = sn.candidate_views(frames, current, j=2, rng=np.random.default_rng(0))
    assert len(views.patches) == 2
    assert np.array_equal(views.patches[0].pixels, views.patches[1].pixels)


def test_candidate_views_short_history_rejected():
    m = make_terrain_map(BANDS_SPEC)
    cam = sn.CameraModel()
    one = [sn.render_camera_image(m, VehicleState(x=2.0, y=7.5, t=0.0), cam)]
    with pytest.raises(sn.InsufficientViews):
        sn.candidate_views(one, VehicleState(x=2.2, y=7.5, t=0.1), j=2)


def test_odometry_delta_composition():
    rng = np.random.default_rng(3)
    poses = [VehicleState(x=0, y=0, yaw=0)]
    for _ in range(8):
        p = poses[-1]
        poses.append(
            VehicleState(
                x=p.x + rng.uniform(-1, 1),
                y=p.y + rng.uniform(-1, 1),
                yaw=float(rng.uniform(-3, 3)),
            )
        )
    composed = sn.OdometryDelta.from_poses(poses[0], poses[1])
    for a, b in zip(poses[1:], poses[2:]):
        composed = composed.compose(sn.OdometryDelta.from_poses(a, b))
    direct = sn.OdometryDelta.from_poses(poses[0], poses[-1])
    assert composed.dx == pytest.approx(direct.dx, abs=1e-9)
    assert composed.dy == pytest.approx(direct.dy, abs=1e-9)
    assert math.sin(composed.dyaw - direct.dyaw) == pytest.approx(0.0, abs=1e-9)


ZERO = InstabilityMetrics(0.0, 0.0, 0.0)


def test_imu_zero_history_zero_floor_is_zero():
    w = sn.synthesize_imu([ZERO] * 20, [0.0] * 20, np.random.default_rng(0), noise_floor=0.0)
    assert np.all(w.accel == 0.0)
    assert np.all(w.gyro == 0.0)


def test_imu_constant_bumpiness_jerk_matches():
    b = 0.4
    hist = [InstabilityMetrics(0.0, 0.0, b)] * 20
    w = sn.synthesize_imu(hist, [2.0] * 20, np.random.default_rng(5), noise_floor=0.0)
    jerk = np.abs(np.diff(w.accel[2])).mean() * w.rate
    assert jerk == pytest.approx(b, rel=0.10)


def test_imu_seeds_differ_but_stats_agree():
    hist = [InstabilityMetrics(0.3, 0.8, 0.25)] * 20
    a = sn.synthesize_imu(hist, [2.0] * 20, np.random.default_rng(1))
    b = sn.synthesize_imu(hist, [2.0] * 20, np.random.default_rng(2))
    assert not np.array_equal(a.accel, b.accel)
    for ch in range(3):
        sa, sb = a.accel[ch].std(), b.accel[ch].std()
        if max(sa, sb) > 1e-9:
            assert abs(sa - sb) / max(sa, sb) < 0.15
    ga, gb = a.gyro[0].std(), b.gyro[0].std()
    assert abs(ga - gb) / max(ga, gb) < 0.15


def test_imu_determinism_per_seed():
    hist = [InstabilityMetrics(0.1, 0.2, 0.3)] * 20
    a = sn.synthesize_imu(hist, [1.0] * 20, np.random.default_rng(7))
    b = sn.synthesize_imu(hist, [1.0] * 20, np.random.default_rng(7))
    assert np.array_equal(a.accel, b.accel)
    assert np.array_equal(a.gyro, b.gyro)


def zero_window():
    return sn.ImuWindow(accel=np.zeros((3, 200)), gyro=np.zeros((3, 200)))


def test_psd_zero_signal():
    feat = sn.psd(zero_window())
    assert feat.values.shape == (384,)
    assert np.all(feat.values == 0.0)


def test_psd_sinusoid_concentration():
    k_bin = 16
    f0 = k_bin * sn.IMU_RATE / sn.PSD_NFFT
    t = np.arange(200) / sn.IMU_RATE
    accel = np.zeros((3, 200))
    accel[2] = np.sin(2 * np.pi * f0 * t + 0.3)
    feat = sn.psd(sn.ImuWindow(accel=accel, gyro=np.zeros((3, 200))))
    chan = feat.per_channel()[2]
    assert chan[k_bin] / chan.sum() > 0.9


def test_psd_parseval():
    rng = np.random.default_rng(0)
    df = sn.IMU_RATE / sn.PSD_NFFT
    for _ in range(20):
        accel = rng.normal(0.0, 1.2, size=(3, 200))
        gyro = rng.normal(0.0, 0.4, size=(3, 200))
        feat = sn.psd(sn.ImuWindow(accel=accel, gyro=gyro))
        chans = feat.per_channel()
        sig = np.vstack([accel, gyro])
        for c in range(6):
            var = sig[c].var()
            assert chans[c].sum() * df == pytest.approx(var, rel=0.01)


def test_psd_mean_offset_invariant():
    rng = np.random.default_rng(1)
    accel = rng.normal(0.0, 1.0, size=(3, 200))
    gyro = rng.normal(0.0, 1.0, size=(3, 200))
    a = sn.psd(sn.ImuWindow(accel=accel, gyro=gyro))
    b = sn.psd(sn.ImuWindow(accel=accel + 2.5, gyro=gyro - 1.0))
    assert np.allclose(a.values, b.values, atol=1e-6)
    assert np.all(a.values >= 0.0)


def test_image_ring_bounded():
    ring = sn.ImageRing(capacity=3)
    m = uniform_map()
    cam = sn.CameraModel()
    for k in range(5):
        ring.push(sn.render_camera_image(m, VehicleState(x=2.0 + 0.1 * k, y=7.5, t=0.1 * k), cam))
    snap = ring.snapshot()
    assert len(snap) == 3
    assert snap[-1].pose_at_capture.t == pytest.approx(0.4)
