"""Downstream instability prediction on top of the terrain representation.

Three independent MLP heads (hidden 256 -> 64 -> 1) map a representation of
the current world plus the candidate control (v_cmd, steer) to next-step
sliding, roll and bumpiness. The representation is either taken from frozen
pretrained encoders (vision+speed fused, inertia, or both concatenated) or
learned end to end from the raw modalities for ablation baselines. Targets
are standardized per channel over the training block; predictions are
returned in physical units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import learncore as lc
from .tron import PSD_DIM, TronConfig, TronModel

CHANNELS = ("sliding", "roll", "bumpiness")
HEAD_HIDDEN = (256, 64)

PRETRAININGS = ("tron", "sterling", "none")
TRON_MODALITY_SETS = ({"V", "S"}, {"I"}, {"V", "S", "I"})
STERLING_MODALITY_SETS = ({"V"}, {"V", "I"})


class ModeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelMode:
    pretraining: str  # "tron" | "sterling" | "none"
    modalities: frozenset[str]

    def __post_init__(self) -> None:
        if self.pretraining not in PRETRAININGS:
            raise ModeError(f"unknown pretraining {self.pretraining!r}")
        mods = set(self.modalities)
        if not mods or not mods <= {"V", "S", "I"}:
            raise ModeError(f"modalities must be a non-empty subset of V,S,I, got {mods}")
        if self.pretraining == "tron" and mods not in TRON_MODALITY_SETS:
            raise ModeError(f"tron pretraining supports VS, I or VSI, got {sorted(mods)}")
        if self.pretraining == "sterling" and mods not in STERLING_MODALITY_SETS:
            raise ModeError(f"sterling pretraining supports V or VI, got {sorted(mods)}")

    @staticmethod
    def parse(text: str) -> "ModelMode":
        """e.g. 'tron-vsi', 'none-v', 'sterling-vi'."""
        pre, _, mods = text.lower().partition("-")
        if pre in ("e2e", "end-to-end"):
            pre = "none"
        return ModelMode(pretraining=pre, modalities=frozenset(m.upper() for m in mods))

    @property
    def key(self) -> str:
        order = [m for m in "VSI" if m in self.modalities]
        return f"{self.pretraining}-{''.join(order).lower()}"

    @property
    def uses_vision(self) -> bool:
        return "V" in self.modalities

    @property
    def uses_speed(self) -> bool:
        return "S" in self.modalities

    @property
    def uses_inertia(self) -> bool:
        return "I" in self.modalities


@dataclass
class TargetScaler:
    mean: np.ndarray  # (3,)
    std: np.ndarray  # (3,), guarded positive

    @staticmethod
    def fit(targets: np.ndarray) -> "TargetScaler":
        return TargetScaler(
            mean=targets.mean(axis=0),
            std=np.maximum(targets.std(axis=0), 1e-8),
        )

    def standardize(self, y: np.ndarray) -> np.ndarray:
        return (y - self.mean) / self.std

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "TargetScaler":
        return TargetScaler(mean=np.asarray(d["mean"], dtype=np.float64), std=np.asarray(d["std"], dtype=np.float64))


@dataclass(frozen=True)
class InstabilityPrediction:
    sliding: float
    roll: float
    bumpiness: float

    def as_array(self) -> np.ndarray:
        return np.array([self.sliding, self.roll, self.bumpiness])


@dataclass
class KdDataset:
    """Interaction records: observation at step t, control applied at t, and
    the measured instability of step t+1 as the target. The terrain label is
    carried for analysis only and never enters a model input."""

    views1: np.ndarray  # (N, 64, 64, 3) float32
    views2: np.ndarray
    speeds: np.ndarray  # (N,)
    psd: np.ndarray  # (N, PSD_DIM)
    controls: np.ndarray  # (N, 2) = (v_cmd, steer)
    targets: np.ndarray  # (N, 3) = next-step (sliding, roll, bumpiness)
    terrain_labels: list[str] = field(default_factory=list)
    times: np.ndarray | None = None

    def __len__(self) -> int:
        return self.views1.shape[0]


def split_blocks(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Contiguous 80/10/10 train/val/test split, preventing temporal leakage
    between nearly identical neighboring frames."""
    n_train = int(n * 0.8)
    n_val = int(n * 0.1)
    return (
        np.arange(0, n_train),
        np.arange(n_train, n_train + n_val),
        np.arange(n_train + n_val, n),
    )


@dataclass(frozen=True)
class KdConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    tron: TronConfig = TronConfig.desk()


class KdModel:
    """Prediction heads plus their (frozen or trainable) encoders."""

    def __init__(self, mode: ModelMode, config: KdConfig, pretrained: TronModel | None = None):
        self.mode = mode
        self.config = config
        self.scaler = TargetScaler(mean=np.zeros(3), std=np.ones(3))
        if mode.pretraining == "none":
            self.encoders = TronModel(config.tron)
            self.frozen = False
        else:
            if pretrained is None:
                raise ModeError(f"mode {mode.key} needs a pretrained checkpoint")
            if mode.pretraining == "tron" and pretrained.config.correlate_speed is False:
                raise ModeError("tron mode given a speed-free pretrained model")
            if mode.pretraining == "sterling" and pretrained.config.correlate_speed is True:
                raise ModeError("sterling mode needs a speed-free pretrained model")
            self.encoders = pretrained
            self.frozen = True
        self.store = lc.ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x4EAD]))
        dim_in = self.feature_dim() + 2
        self.heads = {
            ch: lc.Sequential(
                [
                    lc.Affine(self.store, f"head.{ch}.fc0", dim_in, HEAD_HIDDEN[0], rng),
                    lc.Relu(),
                    lc.Affine(self.store, f"head.{ch}.fc1", HEAD_HIDDEN[0], HEAD_HIDDEN[1], rng),
                    lc.Relu(),
                    lc.Affine(self.store, f"head.{ch}.fc2", HEAD_HIDDEN[1], 1, rng),
                ]
            )
            for ch in CHANNELS
        }
        if not self.frozen:
            # end-to-end: encoder parameters join the trainable store
            for p in self.encoders.store.params.values():
                if self._encoder_param_active(p.name):
                    self.store.register(p)

    def _encoder_param_active(self, name: str) -> bool:
        if name.startswith("vision."):
            return self.mode.uses_vision
        if name.startswith("speed."):
            return self.mode.uses_speed
        if name.startswith("inertia."):
            return self.mode.uses_inertia
        if name.startswith("fuse."):
            return False  # fusion belongs to the pretraining stage
        return False

    def feature_dim(self) -> int:
        cfg = self.encoders.config
        if self.mode.pretraining == "tron":
            d = 0
            if self.mode.uses_vision:
                d += cfg.dim_vs
            if self.mode.uses_inertia:
                d += cfg.dim_i
            return d
        if self.mode.pretraining == "sterling":
            d = cfg.dim_v
            if self.mode.uses_inertia:
                d += cfg.dim_i
            return d
        d = 0
        if self.mode.uses_vision:
            d += cfg.dim_v
        if self.mode.uses_speed:
            d += cfg.dim_s
        if self.mode.uses_inertia:
            d += cfg.dim_i
        return d

    # representation ---------------------------------------------------------
    def _check_inputs(self, patches, speeds, psd) -> None:
        if self.mode.uses_vision and patches is None:
            raise ModeError(f"mode {self.mode.key} needs terrain patches")
        if (self.mode.uses_speed or self.mode.pretraining == "tron" and self.mode.uses_vision) and speeds is None:
            raise ModeError(f"mode {self.mode.key} needs the speed observation")
        if self.mode.uses_inertia and psd is None:
            raise ModeError(f"mode {self.mode.key} needs an inertial spectrum")

    def representation(self, patches=None, speeds=None, psd=None, need_grad=False) -> np.ndarray:
        """Feature matrix for a batch; frozen modes never propagate grads."""
        self._check_inputs(patches, speeds, psd)
        grad = need_grad and not self.frozen
        parts = []
        enc = self.encoders
        if self.mode.pretraining == "tron":
            if self.mode.uses_vision:
                psi_v = enc.encode_vision(patches)
                psi_s = enc.encode_speed(speeds)
                parts.append(enc.fuse(psi_v, psi_s))
            if self.mode.uses_inertia:
                parts.append(enc.encode_inertia(psd))
        elif self.mode.pretraining == "sterling":
            parts.append(enc.encode_vision(patches))
            if self.mode.uses_inertia:
                parts.append(enc.encode_inertia(psd))
        else:
            if self.mode.uses_vision:
                parts.append(enc.encode_vision(patches, need_grad=grad))
            if self.mode.uses_speed:
                parts.append(enc.encode_speed(speeds, need_grad=grad))
            if self.mode.uses_inertia:
                parts.append(enc.encode_inertia(psd, need_grad=grad))
        feats, self._widths = lc.concat_forward(parts)
        return feats

    def _representation_backward(self, gfeat: np.ndarray) -> None:
        if self.frozen:
            return
        grads = lc.concat_backward(gfeat, self._widths)
        k = 0
        enc = self.encoders
        # reverse forward order within the end-to-end encoder set
        order = []
        if self.mode.uses_vision:
            order.append(enc.vision)
        if self.mode.uses_speed:
            order.append(enc.speed)
        if self.mode.uses_inertia:
            order.append(enc.inertia)
        for net, g in reversed(list(zip(order, grads))):
            net.backward(g)

    def head_forward(self, feats: np.ndarray, controls: np.ndarray, need_grad=False) -> np.ndarray:
        x, self._head_widths = lc.concat_forward([feats, controls.astype(feats.dtype)])
        cols = [self.heads[ch].forward(x, need_grad=need_grad) for ch in CHANNELS]
        return np.concatenate(cols, axis=1)

    def head_backward(self, gz: np.ndarray) -> np.ndarray:
        gx = None
        for j, ch in reversed(list(enumerate(CHANNELS))):
            g = self.heads[ch].backward(gz[:, j : j + 1])
            gx = g if gx is None else gx + g
        gfeat, _gcontrols = lc.concat_backward(gx, self._head_widths)
        return gfeat

    def predict_standardized(self, controls, patches=None, speeds=None, psd=None) -> np.ndarray:
        feats = self.representation(patches=patches, speeds=speeds, psd=psd)
        return self.head_forward(feats, np.atleast_2d(controls))

    def predict(self, control, patch=None, speed=None, psd=None) -> InstabilityPrediction:
        """Single-sample convenience wrapper returning physical units."""
        controls = np.array([[control.v_cmd, control.steer]], dtype=np.float32)
        patches = None if patch is None else np.asarray(patch, dtype=np.float32)[None]
        speeds = None if speed is None else np.array([speed], dtype=np.float32)
        feats = None if psd is None else np.asarray(psd, dtype=np.float32)[None]
        z = self.predict_standardized(controls, patches=patches, speeds=speeds, psd=feats)
        y = self.scaler.destandardize(z.astype(np.float64))[0]
        return InstabilityPrediction(sliding=float(y[0]), roll=float(y[1]), bumpiness=float(y[2]))

    def predict_batch(self, controls, patches=None, speeds=None, psd=None) -> np.ndarray:
        """(N, 3) physical-unit predictions."""
        z = self.predict_standardized(np.asarray(controls), patches=patches, speeds=speeds, psd=psd)
        return self.scaler.destandardize(z.astype(np.float64))

    # persistence --------------------------------------------------------------
    def save_bundle(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lc.save_checkpoint(out / "heads.ckpt", self.store.state_arrays(), meta={"kind": "kd-heads"})
        (out / "scaler.json").write_text(json.dumps(self.scaler.to_dict(), indent=2))
        (out / "mode.json").write_text(
            json.dumps(
                {
                    "schema": 1,
                    "pretraining": self.mode.pretraining,
                    "modalities": sorted(self.mode.modalities),
                    "frozen": self.frozen,
                    "seed": self.config.seed,
                },
                indent=2,
            )
        )
        self.encoders.save(out / "encoders.ckpt")

    @staticmethod
    def load_bundle(in_dir, config: KdConfig | None = None) -> "KdModel":
        src = Path(in_dir)
        mode_meta = json.loads((src / "mode.json").read_text())
        mode = ModelMode(pretraining=mode_meta["pretraining"], modalities=frozenset(mode_meta["modalities"]))
        encoders = TronModel.load(src / "encoders.ckpt")
        cfg = config or KdConfig(seed=mode_meta.get("seed", 0), tron=encoders.config)
        if mode.pretraining == "none":
            model = KdModel(mode, cfg)
            model.encoders.store.load_state(encoders.store.state_arrays())
        else:
            model = KdModel(mode, cfg, pretrained=encoders)
        arrays, _ = lc.load_checkpoint(src / "heads.ckpt")
        model.store.load_state(arrays, strict=False)
        model.scaler = TargetScaler.from_dict(json.loads((src / "scaler.json").read_text()))
        return model


@dataclass
class EvalReport:
    mode: str
    mse: dict[str, float]  # standardized per-channel test MSE
    combined: float  # mean of the three
    baseline_combined: float  # mean-predictor MSE on the same test block
    n_train: int
    n_test: int
    epochs_run: int

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "mse": self.mse,
            "combined": self.combined,
            "baseline_combined": self.baseline_combined,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "epochs_run": self.epochs_run,
        }


def _mse(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return ((pred - target) ** 2).mean(axis=0)


def train_kd(
    dataset: KdDataset,
    mode: ModelMode,
    config: KdConfig,
    pretrained: TronModel | None = None,
) -> tuple[KdModel, EvalReport]:
    """Supervised training with a contiguous 80/10/10 split, early stopping on
    validation MSE and best-weights restoration. Deterministic per seed.
    """
    n = len(dataset)
    if n < 50:
        raise ValueError(f"dataset of {n} records is too small")
    tr_idx, va_idx, te_idx = split_blocks(n)
    model = KdModel(mode, config, pretrained=pretrained)
    model.scaler = TargetScaler.fit(dataset.targets[tr_idx])
    z_all = model.scaler.standardize(dataset.targets).astype(np.float32)

    def inputs(idx):
        return (
            dataset.views1[idx] if mode.uses_vision else None,
            dataset.speeds[idx] if (mode.uses_speed or (mode.pretraining == "tron" and mode.uses_vision)) else None,
            dataset.psd[idx] if mode.uses_inertia else None,
        )

    cache: dict[str, np.ndarray] = {}

    def features(idx, key):
        if model.frozen:
            if key not in cache:
                p, s, f = inputs(idx)
                cache[key] = model.representation(patches=p, speeds=s, psd=f)
            return cache[key]
        return None

    for key, idx in (("train", tr_idx), ("val", va_idx), ("test", te_idx)):
        features(idx, key)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
    controls = dataset.controls.astype(np.float32)
    best_val = np.inf
    best_state = None
    best_epoch = 0
    epochs_run = 0
    bs = config.batch_size
    for epoch in range(config.max_epochs):
        epochs_run = epoch + 1
        perm = rng.permutation(tr_idx.size)
        for b in range(0, tr_idx.size, bs):
            take = perm[b : b + bs]
            if take.size < 2:
                continue
            idx = tr_idx[take]
            model.store.zero_grad()
            if model.frozen:
                feats = cache["train"][take]
            else:
                p, s, f = inputs(idx)
                feats = model.representation(patches=p, speeds=s, psd=f, need_grad=True)
            z = model.head_forward(feats, controls[idx], need_grad=True)
            err = z - z_all[idx]
            if not np.all(np.isfinite(err)):
                raise RuntimeError("training diverged: non-finite loss")
            gz = (2.0 / err.size) * err
            gfeat = model.head_backward(gz.astype(np.float32))
            model._representation_backward(gfeat)
            model.store.adam_step(lr=config.lr)
        # validation
        if model.frozen:
            zv = model.head_forward(cache["val"], controls[va_idx])
        else:
            p, s, f = inputs(va_idx)
            zv = model.head_forward(model.representation(patches=p, speeds=s, psd=f), controls[va_idx])
        val = float(_mse(zv, z_all[va_idx]).mean())
        if val < best_val - 1e-6:
            best_val = val
            best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.store.state_arrays().items()}
        elif epoch - best_epoch >= config.patience:
            break
    if best_state is not None:
        model.store.load_state(best_state)

    if model.frozen:
        zt = model.head_forward(cache["test"], controls[te_idx])
    else:
        p, s, f = inputs(te_idx)
        zt = model.head_forward(model.representation(patches=p, speeds=s, psd=f), controls[te_idx])
    per = _mse(zt, z_all[te_idx])
    baseline = float((z_all[te_idx] ** 2).mean())
    report = EvalReport(
        mode=mode.key,
        mse={ch: float(per[j]) for j, ch in enumerate(CHANNELS)},
        combined=float(per.mean()),
        baseline_combined=baseline,
        n_train=int(tr_idx.size),
        n_test=int(te_idx.size),
        epochs_run=epochs_run,
    )
    return model, report


def ablation_suite(
    dataset: KdDataset,
    modes: list[ModelMode],
    config: KdConfig,
    pretrained: dict[str, TronModel] | None = None,
) -> list[EvalReport]:
    """Train every mode on identical splits and seeds; returns one report per
    mode, in the order given."""
    pretrained = pretrained or {}
    reports = []
    for mode in modes:
        _, report = train_kd(dataset, mode, config, pretrained=pretrained.get(mode.pretraining))
        reports.append(report)
    return reports
