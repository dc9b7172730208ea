"""Minimal reverse-mode differentiation kernel on numpy arrays.

Supplies exactly the layer set the representation and prediction networks
need: strided 2-D convolution, affine maps, relu, per-dimension batch
standardization, flatten and concatenation, plus an adaptive-moment gradient
step and a versioned checkpoint format.

Conventions (fixed so runs are reproducible on one machine):
  * activations and parameters are float32 unless a graph is built with
    dtype=float64 (gradient-check mode);
  * image tensors are NHWC, channel-last;
  * loss reductions and cross-correlation sums accumulate in float64;
  * reductions iterate in row-major order via numpy; BLAS thread count is
    whatever the process uses throughout, so repeated runs in one
    environment are bit-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

EPS_STANDARDIZE = 1e-5


class GraphError(RuntimeError):
    """Shape mismatch or out-of-order use of a graph."""


class NonFiniteError(RuntimeError):
    """A parameter or gradient stopped being finite; names the offender."""


class Param:
    """Named trainable array with its gradient and optimizer moments."""

    __slots__ = ("name", "value", "grad", "m", "v")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.m = np.zeros_like(value)
        self.v = np.zeros_like(value)


class ParamStore:
    """Flat registry of parameters plus the optimizer step counter."""

    def __init__(self) -> None:
        self.params: dict[str, Param] = {}
        self.step_count = 0

    def register(self, p: Param) -> Param:
        if p.name in self.params:
            raise GraphError(f"duplicate parameter name {p.name!r}")
        self.params[p.name] = p
        return p

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0

    def adam_step(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        """Standard bias-corrected adaptive-moment update over all params."""
        self.step_count += 1
        t = self.step_count
        b1, b2 = betas
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p in self.params.values():
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient for parameter {p.name!r}")
            g = p.grad
            p.m += (1.0 - b1) * (g - p.m)
            p.v += (1.0 - b2) * (g * g - p.v)
            update = lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
            p.value -= update.astype(p.value.dtype)
            if not np.all(np.isfinite(p.value)):
                raise NonFiniteError(f"parameter {p.name!r} became non-finite")

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                if strict:
                    raise GraphError(f"checkpoint is missing parameter {name!r}")
                continue
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.value.shape):
                raise GraphError(f"shape mismatch for {name!r}: {arr.shape} vs {p.value.shape}")
            p.value[...] = arr.astype(p.value.dtype)


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base layer: forward pushes what backward needs onto a cache stack when
    need_grad=True. Modules shared between graph branches (e.g. one encoder
    applied to two views) are backpropagated in reverse forward order, so the
    stack pairs each backward with its forward; parameter gradients
    accumulate across the calls."""

    params: list[Param]

    def __init__(self) -> None:
        self.params = []
        self._cache_stack: list = []

    def forward(self, x: np.ndarray, need_grad: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _push_cache(self, cache) -> None:
        self._cache_stack.append(cache)

    def _take_cache(self):
        if not self._cache_stack:
            raise GraphError(f"{type(self).__name__}.backward called before forward")
        return self._cache_stack.pop()


class Affine(Layer):
    def __init__(self, store: ParamStore, name: str, dim_in: int, dim_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.name = name
        self.dim_in = dim_in
        self.w = store.register(Param(f"{name}.w", _uniform_init(rng, (dim_in, dim_out), dim_in, dtype)))
        self.b = store.register(Param(f"{name}.b", np.zeros(dim_out, dtype=dtype)))
        self.params = [self.w, self.b]

    def forward(self, x, need_grad=False):
        if x.ndim != 2 or x.shape[1] != self.dim_in:
            raise GraphError(f"layer {self.name!r}: expected (N, {self.dim_in}), got {x.shape}")
        if need_grad:
            self._push_cache(x)
        return x @ self.w.value + self.b.value

    def backward(self, gy):
        x = self._take_cache()
        self.w.grad += x.T @ gy
        self.b.grad += gy.sum(axis=0)
        return gy @ self.w.value.T


class Relu(Layer):
    def forward(self, x, need_grad=False):
        if need_grad:
            self._push_cache(x > 0)
        return np.maximum(x, 0)

    def backward(self, gy):
        mask = self._take_cache()
        return gy * mask


class Flatten(Layer):
    def forward(self, x, need_grad=False):
        if need_grad:
            self._push_cache(x.shape)
        return x.reshape(x.shape[0], -1)

    def backward(self, gy):
        shape = self._take_cache()
        return gy.reshape(shape)


class Conv2d(Layer):
    """3x3-style strided convolution over NHWC tensors, zero padding k//2."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        ch_in: int,
        ch_out: int,
        rng: np.random.Generator,
        kernel: int = 3,
        stride: int = 2,
        dtype=np.float32,
    ):
        super().__init__()
        self.name = name
        self.k = kernel
        self.s = stride
        self.ch_in = ch_in
        self.ch_out = ch_out
        fan_in = kernel * kernel * ch_in
        self.w = store.register(Param(f"{name}.w", _uniform_init(rng, (kernel, kernel, ch_in, ch_out), fan_in, dtype)))
        self.b = store.register(Param(f"{name}.b", np.zeros(ch_out, dtype=dtype)))
        self.params = [self.w, self.b]

    def _cols(self, x: np.ndarray) -> np.ndarray:
        k, s = self.k, self.s
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        win = win[:, :: s, :: s]  # (N, Ho, Wo, C, k, k)
        return np.ascontiguousarray(np.moveaxis(win, 3, 5))  # (N, Ho, Wo, k, k, C)

    def forward(self, x, need_grad=False):
        if x.ndim != 4 or x.shape[3] != self.ch_in:
            raise GraphError(f"layer {self.name!r}: expected NHWC with C={self.ch_in}, got {x.shape}")
        cols = self._cols(x)
        n, ho, wo = cols.shape[:3]
        flat = cols.reshape(n * ho * wo, -1)
        y = flat @ self.w.value.reshape(-1, self.ch_out) + self.b.value
        if need_grad:
            self._push_cache((x.shape, flat, (n, ho, wo)))
        return y.reshape(n, ho, wo, self.ch_out)

    def backward(self, gy):
        x_shape, flat, (n, ho, wo) = self._take_cache()
        k, s = self.k, self.s
        p = k // 2
        gy_flat = gy.reshape(n * ho * wo, self.ch_out)
        self.w.grad += (flat.T @ gy_flat).reshape(self.w.value.shape)
        self.b.grad += gy_flat.sum(axis=0)
        gcols = (gy_flat @ self.w.value.reshape(-1, self.ch_out).T).reshape(n, ho, wo, k, k, self.ch_in)
        gx_pad = np.zeros((n, x_shape[1] + 2 * p, x_shape[2] + 2 * p, self.ch_in), dtype=gy.dtype)
        for di in range(k):
            for dj in range(k):
                gx_pad[:, di : di + ho * s : s, dj : dj + wo * s : s, :] += gcols[:, :, :, di, dj, :]
        return gx_pad[:, p : p + x_shape[1], p : p + x_shape[2], :]


class BatchStandardize(Layer):
    """Center each dimension over the batch and divide by its population
    std + 1e-5; constant dimensions map to zeros."""

    def forward(self, x, need_grad=False):
        if x.shape[0] < 2:
            raise GraphError("batch_standardize needs a batch of at least 2")
        mu = x.mean(axis=0)
        sigma = x.std(axis=0)
        d = sigma + EPS_STANDARDIZE
        z = (x - mu) / d
        if need_grad:
            self._push_cache((z, sigma, d))
        return z

    def backward(self, gy):
        z, sigma, d = self._take_cache()
        gc = gy - gy.mean(axis=0)
        corr = (gy * z).mean(axis=0)
        safe = np.where(sigma > 1e-12, sigma, 1.0)
        term = np.where(sigma > 1e-12, corr / safe, 0.0)
        return gc / d - z * term


class Sequential(Layer):
    """Stack of layers executed in order; validates at build time that the
    caller wired compatible shapes by failing fast on first use."""

    def __init__(self, layers: list[Layer]):
        super().__init__()
        self.layers = layers
        self.params = [p for l in layers for p in l.params]

    def forward(self, x, need_grad=False):
        for l in self.layers:
            x = l.forward(x, need_grad=need_grad)
        return x

    def backward(self, gy):
        for l in reversed(self.layers):
            gy = l.backward(gy)
        return gy


def concat_forward(parts: list[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    widths = [p.shape[1] for p in parts]
    return np.concatenate(parts, axis=1), widths


def concat_backward(gy: np.ndarray, widths: list[int]) -> list[np.ndarray]:
    out = []
    at = 0
    for w in widths:
        out.append(gy[:, at : at + w])
        at += w
    return out


def batch_standardize(x: np.ndarray) -> np.ndarray:
    """Functional form of BatchStandardize for non-graph callers."""
    mu = x.mean(axis=0)
    d = x.std(axis=0) + EPS_STANDARDIZE
    return (x - mu) / d


def _guarded_norms(a: np.ndarray) -> np.ndarray:
    # zero-norm columns divide by EPS instead of erroring; the quadrature
    # guard keeps C(x, x) diagonals within 1e-10 of 1 for healthy columns
    return np.sqrt((a * a).sum(axis=0) + EPS_STANDARDIZE**2)


def cross_correlation(rho1: np.ndarray, rho2: np.ndarray) -> np.ndarray:
    """Column-normalized correlation matrix between two (N, D) batches.

    C[i, j] = sum_b rho1[b, i] * rho2[b, j] / (||rho1[:, i]|| * ||rho2[:, j]||)
    with each norm guarded in quadrature by 1e-5. Accumulates in float64.
    """
    if rho1.shape[0] < 2 or rho1.shape != rho2.shape:
        raise GraphError(f"cross_correlation needs matching (N>=2, D) inputs, got {rho1.shape} and {rho2.shape}")
    a = rho1.astype(np.float64)
    b = rho2.astype(np.float64)
    return (a.T @ b) / np.outer(_guarded_norms(a), _guarded_norms(b))


def barlow_terms(c: np.ndarray, gamma: float) -> tuple[float, float]:
    """(invariance, redundancy) pieces of the correlation loss.

    The off-diagonal sum pairs (i, j) with (j, i) so the value is bitwise
    invariant under transposition of c.
    """
    d = np.diag(c)
    invariance = float(((1.0 - d) ** 2).sum())
    iu = np.triu_indices(c.shape[0], k=1)
    sq = c * c
    redundancy = float(gamma * (sq[iu] + sq.T[iu]).sum())
    return invariance, redundancy


def barlow_loss(c: np.ndarray, gamma: float) -> float:
    inv, red = barlow_terms(c, gamma)
    return inv + red


@dataclass
class BarlowPairResult:
    loss: float
    invariance: float
    redundancy: float
    grad1: np.ndarray
    grad2: np.ndarray


def barlow_pair(rho1: np.ndarray, rho2: np.ndarray, gamma: float, need_grad: bool = False) -> BarlowPairResult:
    """Correlation loss between two batches plus its input gradients.

    Everything runs in float64; gradients are returned in the input dtype.
    """
    a = rho1.astype(np.float64)
    b = rho2.astype(np.float64)
    m1 = _guarded_norms(a)
    m2 = _guarded_norms(b)
    c = (a.T @ b) / np.outer(m1, m2)
    inv, red = barlow_terms(c, gamma)
    if not need_grad:
        return BarlowPairResult(inv + red, inv, red, np.zeros(0), np.zeros(0))
    # dL/dC then chain through C = (a^T b) / (m1 m2^T) with m = sqrt(|.|^2+eps^2)
    gc = 2.0 * gamma * c
    np.fill_diagonal(gc, -2.0 * (1.0 - np.diag(c)))
    s1 = (gc * c).sum(axis=1)
    s2 = (gc * c).sum(axis=0)
    g1 = ((b / m2) @ gc.T - a * (s1 / m1)[None, :]) / m1[None, :]
    g2 = ((a / m1) @ gc - b * (s2 / m2)[None, :]) / m2[None, :]
    return BarlowPairResult(inv + red, inv, red, g1.astype(rho1.dtype), g2.astype(rho2.dtype))


CKPT_MAGIC = b"CKPT1"
CKPT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a named-parameter archive: magic, version, a JSON index mapping
    name -> (shape, byte offset into the data section), then raw
    little-endian float32 data."""
    index: dict[str, dict] = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        index[name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"params": index, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<BI", CKPT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != CKPT_MAGIC:
            raise GraphError(f"not a checkpoint file: bad magic {magic!r}")
        version, hlen = struct.unpack("<BI", fh.read(5))
        if version != CKPT_VERSION:
            raise GraphError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    arrays = {}
    for name, entry in header["params"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
        arrays[name] = arr.reshape(shape).copy()
    return arrays, header.get("meta", {})
