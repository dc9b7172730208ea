"""Shared synthetic data builders for the unit suites."""

import math

import numpy as np

from cahsor import kinodyn as kd
from cahsor import tron as tr

TERRAIN_PARAMS = {
    0: dict(mu=0.9, rough=0.01, color=(0.6, 0.6, 0.6)),
    1: dict(mu=0.35, rough=0.03, color=(0.2, 0.5, 0.2)),
    2: dict(mu=0.7, rough=0.12, color=(0.5, 0.4, 0.3)),
}
LABELS = {0: "pavement", 1: "grass", 2: "rocks"}


def tiny_tron_config(**kw):
    base = dict(
        dim_v=16,
        dim_s=16,
        dim_i=16,
        dim_vs=16,
        dim_rho=16,
        conv_channels=(4, 4, 4, 4),
        batch_size=16,
        epochs=4,
        seed=3,
    )
    base.update(kw)
    return tr.TronConfig(**base)


def fast_kd_config(seed=0, **kw):
    base = dict(max_epochs=60, patience=10, seed=seed, tron=tiny_tron_config(seed=seed))
    base.update(kw)
    return kd.KdConfig(**base)


def synthetic_tron_dataset(n, seed=0, size=64):
    """Three latent terrain clusters; spectra depend on (cluster, speed)."""
    rng = np.random.default_rng(seed)
    cluster = rng.integers(0, 3, size=n)
    colors = np.array([[0.6, 0.6, 0.6], [0.2, 0.5, 0.2], [0.5, 0.4, 0.3]], dtype=np.float32)
    base = colors[cluster][:, None, None, :]
    v1 = np.clip(base + rng.normal(0, 0.05, size=(n, size, size, 3)), 0, 1).astype(np.float32)
    v2 = np.clip(base + rng.normal(0, 0.05, size=(n, size, size, 3)), 0, 1).astype(np.float32)
    speeds = rng.uniform(0.0, 4.8, size=n).astype(np.float32)
    psd = np.zeros((n, 384), dtype=np.float32)
    energy = (cluster + 1) * speeds
    for c in range(6):
        psd[:, c * 64 + 5 * (c + 1)] = energy * (0.5 + 0.1 * c)
    psd += rng.normal(0, 0.01, size=psd.shape).astype(np.float32)
    return tr.TronDataset(views1=v1, views2=v2, speeds=speeds, psd=np.abs(psd))


def synthetic_kd_dataset(n, seed=0):
    """Targets follow the simulator's analytic forms from latent terrain
    clusters that are visible in the patches and audible in the spectra."""
    rng = np.random.default_rng(seed)
    cluster = rng.integers(0, 3, size=n)
    speeds = rng.uniform(0.2, 4.8, size=n)
    v_cmd = np.clip(speeds + rng.normal(0, 1.0, size=n), -4.8, 4.8)
    steer = rng.uniform(-0.5, 0.5, size=n)
    targets = np.zeros((n, 3))
    for i in range(n):
        par = TERRAIN_PARAMS[int(cluster[i])]
        a_lat = abs(speeds[i] ** 2 * math.tan(steer[i]) / 0.55)
        grip = par["mu"] * 9.81
        targets[i] = [
            0.05 * max(0.0, a_lat - grip),
            0.15 * min(a_lat, grip),
            par["rough"] * abs(speeds[i]),
        ]
    targets += rng.normal(0, 0.01, size=targets.shape)
    targets = np.maximum(targets, 0.0)
    base = np.array([TERRAIN_PARAMS[int(c)]["color"] for c in cluster], dtype=np.float32)
    views1 = np.clip(base[:, None, None, :] + rng.normal(0, 0.05, (n, 64, 64, 3)), 0, 1).astype(np.float32)
    views2 = np.clip(base[:, None, None, :] + rng.normal(0, 0.05, (n, 64, 64, 3)), 0, 1).astype(np.float32)
    psd = np.zeros((n, 384), dtype=np.float32)
    for c in range(6):
        psd[:, c * 64 + 7] = (targets[:, c % 3] * (1.0 + 0.2 * c)).astype(np.float32)
    psd += np.abs(rng.normal(0, 0.005, size=psd.shape)).astype(np.float32)
    return kd.KdDataset(
        views1=views1,
        views2=views2,
        speeds=speeds.astype(np.float32),
        psd=psd,
        controls=np.stack([v_cmd, steer], axis=1).astype(np.float32),
        targets=targets,
        terrain_labels=[LABELS[int(c)] for c in cluster],
        times=np.arange(n, dtype=np.float64) * 0.1,
    )
