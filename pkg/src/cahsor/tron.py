"""Self-supervised terrain representation from vision, speed and inertia.

Two views of the same ground patch pass through a shared convolutional
encoder, are fused with the speed embedding, and the fused embeddings are
correlated with the inertial embedding through projection heads using the
redundancy-reduction loss:

    L = BL(rho_vs1, rho_vs2) + 0.5 BL(rho_vs1, rho_i) + 0.5 BL(rho_vs2, rho_i)

where BL drives the batch cross-correlation matrix of its two (standardized)
inputs toward the identity. A speed-free variant drops the fusion stage and
correlates the vision embedding directly with inertia, mirroring
vision-inertia-only pretraining baselines.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import learncore as lc
from .sensing import IMU_CHANNELS, PATCH_SIZE, PSD_BINS

PSD_DIM = IMU_CHANNELS * PSD_BINS


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TronConfig:
    dim_v: int = 512
    dim_s: int = 512
    dim_i: int = 512
    dim_vs: int = 512
    dim_rho: int = 1024
    conv_channels: tuple[int, int, int, int] = (16, 32, 32, 32)
    gamma: float = 5e-3
    batch_size: int = 32
    epochs: int = 30
    lr: float = 1e-3
    aug_brightness: float = 0.2
    aug_noise: float = 0.02
    seed: int = 0
    correlate_speed: bool = True

    def __post_init__(self) -> None:
        if min(self.dim_v, self.dim_s, self.dim_i, self.dim_vs, self.dim_rho) < 8:
            raise ValueError("embedding widths must be at least 8")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    @staticmethod
    def desk(**overrides) -> "TronConfig":
        """Small preset sized for a single desktop CPU core."""
        base = dict(
            dim_v=64,
            dim_s=64,
            dim_i=64,
            dim_vs=64,
            dim_rho=128,
            conv_channels=(8, 16, 16, 16),
        )
        base.update(overrides)
        return TronConfig(**base)


@dataclass
class TronBatch:
    """Assembled training batch: two augmented views per sample plus the
    speed scalar and the inertial spectral feature."""

    view1: np.ndarray  # (N, 64, 64, 3) float32
    view2: np.ndarray
    speeds: np.ndarray  # (N,) float32
    psd: np.ndarray  # (N, 384) float32

    def __post_init__(self) -> None:
        n = self.view1.shape[0]
        if n < 2:
            raise ValueError("cross-correlation needs a batch of at least 2")
        if self.view2.shape[0] != n or self.speeds.shape[0] != n or self.psd.shape[0] != n:
            raise ValueError("batch fields disagree on length")


@dataclass
class EmbeddingSet:
    psi_v: np.ndarray
    psi_s: np.ndarray
    psi_i: np.ndarray
    psi_vs: np.ndarray
    rho_vs: np.ndarray
    rho_i: np.ndarray


def _mlp(store, name, dims, rng, dtype, final_relu=True):
    layers: list[lc.Layer] = []
    for k in range(len(dims) - 1):
        layers.append(lc.Affine(store, f"{name}.fc{k}", dims[k], dims[k + 1], rng, dtype=dtype))
        if k < len(dims) - 2 or final_relu:
            layers.append(lc.Relu())
    return lc.Sequential(layers)


class TronModel:
    """Encoders plus projection heads over one parameter store."""

    def __init__(self, config: TronConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.store = lc.ParamStore()
        seq = np.random.SeedSequence(config.seed)
        rngs = [np.random.default_rng(s) for s in seq.spawn(6)]
        c = config.conv_channels
        self.vision = lc.Sequential(
            [
                lc.Conv2d(self.store, "vision.conv0", 3, c[0], rngs[0], dtype=dtype),
                lc.Relu(),
                lc.Conv2d(self.store, "vision.conv1", c[0], c[1], rngs[0], dtype=dtype),
                lc.Relu(),
                lc.Conv2d(self.store, "vision.conv2", c[1], c[2], rngs[0], dtype=dtype),
                lc.Relu(),
                lc.Conv2d(self.store, "vision.conv3", c[2], c[3], rngs[0], dtype=dtype),
                lc.Relu(),
                lc.Flatten(),
                lc.Affine(self.store, "vision.fc", (PATCH_SIZE // 16) ** 2 * c[3], config.dim_v, rngs[0], dtype=dtype),
            ]
        )
        self.speed = _mlp(self.store, "speed", [1, config.dim_s, config.dim_s], rngs[1], dtype)
        self.inertia = _mlp(self.store, "inertia", [PSD_DIM, config.dim_i, config.dim_i], rngs[2], dtype)
        if config.correlate_speed:
            self.fuse_net = _mlp(
                self.store, "fuse", [config.dim_v + config.dim_s, config.dim_vs, config.dim_vs], rngs[3], dtype
            )
            proj_in = config.dim_vs
        else:
            self.fuse_net = None
            proj_in = config.dim_v
        self.proj_vs = _mlp(self.store, "proj_vs", [proj_in, config.dim_rho, config.dim_rho], rngs[4], dtype, final_relu=False)
        self.proj_i = _mlp(self.store, "proj_i", [config.dim_i, config.dim_rho, config.dim_rho], rngs[5], dtype, final_relu=False)
        self._std = {k: lc.BatchStandardize() for k in ("z1", "z2", "zi")}

    # inference entry points -------------------------------------------------
    def encode_vision(self, patches: np.ndarray, need_grad: bool = False) -> np.ndarray:
        p = np.asarray(patches, dtype=self.dtype)
        if p.ndim == 3:
            p = p[None]
        if p.shape[1:] != (PATCH_SIZE, PATCH_SIZE, 3):
            raise lc.GraphError(f"vision encoder expects (N, {PATCH_SIZE}, {PATCH_SIZE}, 3), got {p.shape}")
        return self.vision.forward(p, need_grad=need_grad)

    def encode_speed(self, speeds: np.ndarray, need_grad: bool = False) -> np.ndarray:
        s = np.asarray(speeds, dtype=self.dtype).reshape(-1, 1)
        return self.speed.forward(s, need_grad=need_grad)

    def encode_inertia(self, psd: np.ndarray, need_grad: bool = False) -> np.ndarray:
        x = np.asarray(psd, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None]
        return self.inertia.forward(x, need_grad=need_grad)

    def fuse(self, psi_v: np.ndarray, psi_s: np.ndarray, need_grad: bool = False) -> np.ndarray:
        if self.fuse_net is None:
            return psi_v
        x, _ = lc.concat_forward([psi_v, psi_s])
        return self.fuse_net.forward(x, need_grad=need_grad)

    def project_vs(self, psi: np.ndarray, need_grad: bool = False) -> np.ndarray:
        return self.proj_vs.forward(psi, need_grad=need_grad)

    def project_i(self, psi: np.ndarray, need_grad: bool = False) -> np.ndarray:
        return self.proj_i.forward(psi, need_grad=need_grad)

    def embed(self, patch: np.ndarray, speed: np.ndarray, psd: np.ndarray) -> EmbeddingSet:
        psi_v = self.encode_vision(patch)
        psi_s = self.encode_speed(speed)
        psi_i = self.encode_inertia(psd)
        psi_vs = self.fuse(psi_v, psi_s)
        return EmbeddingSet(
            psi_v=psi_v,
            psi_s=psi_s,
            psi_i=psi_i,
            psi_vs=psi_vs,
            rho_vs=self.project_vs(psi_vs),
            rho_i=self.project_i(psi_i),
        )

    # training ----------------------------------------------------------------
    def loss(self, batch: TronBatch, need_grad: bool = False) -> tuple[float, float, float]:
        """(total, invariance, redundancy); with need_grad the parameter
        gradients of the full objective are accumulated."""
        g = self.config.gamma
        v1 = self.encode_vision(batch.view1, need_grad)
        v2 = self.encode_vision(batch.view2, need_grad)
        s = self.encode_speed(batch.speeds, need_grad) if self.config.correlate_speed else None
        if self.config.correlate_speed:
            x1, w1 = lc.concat_forward([v1, s])
            x2, w2 = lc.concat_forward([v2, s])
            vs1 = self.fuse_net.forward(x1, need_grad)
            vs2 = self.fuse_net.forward(x2, need_grad)
        else:
            vs1, vs2 = v1, v2
        i = self.encode_inertia(batch.psd, need_grad)
        r1 = self.proj_vs.forward(vs1, need_grad)
        r2 = self.proj_vs.forward(vs2, need_grad)
        ri = self.proj_i.forward(i, need_grad)
        z1 = self._std["z1"].forward(r1, need_grad)
        z2 = self._std["z2"].forward(r2, need_grad)
        zi = self._std["zi"].forward(ri, need_grad)
        bl_vv = lc.barlow_pair(z1, z2, g, need_grad)
        bl_1i = lc.barlow_pair(z1, zi, g, need_grad)
        bl_2i = lc.barlow_pair(z2, zi, g, need_grad)
        total = bl_vv.loss + 0.5 * bl_1i.loss + 0.5 * bl_2i.loss
        invariance = bl_vv.invariance + 0.5 * bl_1i.invariance + 0.5 * bl_2i.invariance
        redundancy = bl_vv.redundancy + 0.5 * bl_1i.redundancy + 0.5 * bl_2i.redundancy
        if not need_grad:
            return total, invariance, redundancy

        gz1 = bl_vv.grad1 + 0.5 * bl_1i.grad1
        gz2 = bl_vv.grad2 + 0.5 * bl_2i.grad1
        gzi = 0.5 * bl_1i.grad2 + 0.5 * bl_2i.grad2
        gri = self._std["zi"].backward(gzi)
        gr2 = self._std["z2"].backward(gz2)
        gr1 = self._std["z1"].backward(gz1)
        gi = self.proj_i.backward(gri)
        # shared modules: backpropagate strictly in reverse forward order
        gvs2 = self.proj_vs.backward(gr2)
        gvs1 = self.proj_vs.backward(gr1)
        self.inertia.backward(gi)
        if self.config.correlate_speed:
            gx2 = self.fuse_net.backward(gvs2)
            gx1 = self.fuse_net.backward(gvs1)
            gv2, gs2 = lc.concat_backward(gx2, [self.config.dim_v, self.config.dim_s])
            gv1, gs1 = lc.concat_backward(gx1, [self.config.dim_v, self.config.dim_s])
            self.speed.backward(gs1 + gs2)
        else:
            gv1, gv2 = gvs1, gvs2
        self.vision.backward(gv2)
        self.vision.backward(gv1)
        return total, invariance, redundancy

    # persistence --------------------------------------------------------------
    def save(self, path) -> None:
        meta = {"kind": "tron", "config": _config_dict(self.config)}
        lc.save_checkpoint(path, self.store.state_arrays(), meta=meta)
        Path(str(path) + ".json").write_text(json.dumps(meta["config"], indent=2, sort_keys=True))

    @staticmethod
    def load(path, dtype=np.float32) -> "TronModel":
        arrays, meta = lc.load_checkpoint(path)
        cfg_dict = meta.get("config")
        sidecar = Path(str(path) + ".json")
        if sidecar.exists():
            recorded = json.loads(sidecar.read_text())
            if cfg_dict is not None and recorded != cfg_dict:
                raise lc.GraphError("checkpoint sidecar disagrees with embedded config")
            cfg_dict = recorded
        if cfg_dict is None:
            raise lc.GraphError("checkpoint carries no model config")
        model = TronModel(_config_from_dict(cfg_dict), dtype=dtype)
        model.store.load_state(arrays)
        return model


def _config_dict(cfg: TronConfig) -> dict:
    d = asdict(cfg)
    d["conv_channels"] = list(cfg.conv_channels)
    return d


def _config_from_dict(d: dict) -> TronConfig:
    d = dict(d)
    d["conv_channels"] = tuple(d["conv_channels"])
    return TronConfig(**d)


def augment_views(view: np.ndarray, rng: np.random.Generator, brightness: float, noise: float) -> np.ndarray:
    """Photometric jitter: one brightness shift per sample plus pixel noise,
    clipped back to [0, 1]."""
    n = view.shape[0]
    shift = rng.uniform(-brightness, brightness, size=(n, 1, 1, 1)).astype(np.float32)
    grain = rng.normal(0.0, noise, size=view.shape).astype(np.float32)
    return np.clip(view + shift + grain, 0.0, 1.0)


@dataclass
class TronDataset:
    """Backing arrays for self-supervised training (two stored views each)."""

    views1: np.ndarray  # (N, 64, 64, 3) float32
    views2: np.ndarray
    speeds: np.ndarray  # (N,)
    psd: np.ndarray  # (N, 384)

    def __len__(self) -> int:
        return self.views1.shape[0]


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "mean_loss", "invariance_term", "redundancy_term"])
            w.writeheader()
            for row in self.epochs:
                w.writerow(row)


def train_tron(dataset: TronDataset, config: TronConfig, log_path=None) -> tuple[TronModel, TrainHistory]:
    """Minimize the correlation objective over the dataset.

    Deterministic for a fixed config.seed; aborts on divergence. Returns the
    trained model and the per-epoch loss history.
    """
    n = len(dataset)
    if n < config.batch_size:
        raise ValueError(f"dataset of {n} samples is smaller than one batch ({config.batch_size})")
    model = TronModel(config)
    return _run_training(model, dataset, config, log_path)


def _run_training(model: TronModel, dataset: TronDataset, config: TronConfig, log_path):
    n = len(dataset)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x0D]))
    aug_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA6]))
    history = TrainHistory()
    steps = n // config.batch_size
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        tot = inv = red = 0.0
        for b in range(steps):
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            swap = aug_rng.random(idx.size) < 0.5
            raw1 = np.where(swap[:, None, None, None], dataset.views2[idx], dataset.views1[idx])
            raw2 = np.where(swap[:, None, None, None], dataset.views1[idx], dataset.views2[idx])
            batch = TronBatch(
                view1=augment_views(raw1, aug_rng, config.aug_brightness, config.aug_noise),
                view2=augment_views(raw2, aug_rng, config.aug_brightness, config.aug_noise),
                speeds=dataset.speeds[idx].astype(np.float32),
                psd=dataset.psd[idx].astype(np.float32),
            )
            model.store.zero_grad()
            loss, i_term, r_term = model.loss(batch, need_grad=True)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            model.store.adam_step(lr=config.lr)
            tot += loss
            inv += i_term
            red += r_term
        history.epochs.append(
            {
                "epoch": epoch,
                "mean_loss": tot / steps,
                "invariance_term": inv / steps,
                "redundancy_term": red / steps,
            }
        )
    if log_path is not None:
        history.write_csv(log_path)
    return model, history
