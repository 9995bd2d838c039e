"""Shallow convolutional MI decoder with hand-written gradients.

Layer order (per window ``x`` of shape ``[C, T]``)::

    temporal conv (f1 filters, same padding)     -> [f1, C, T]
    batch-norm 1
    depthwise spatial conv (depth_mult per filter) -> [f2, T]
    batch-norm 2, ELU
    average pool (k1, s1)                          -> [f2, L1]
    dropout
    temporal conv (f2 -> f2, same padding)         -> [f2, L1]
    batch-norm 3, ELU
    average pool (k2, s2)                          -> [f2, L2]
    linear                                         -> [n_classes]

Convolutions carry no bias because each is followed by batch-norm.
"""

from __future__ import annotations

import hashlib
from dataclasses import astuple, dataclass, fields
from typing import Callable, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_LAYERS = ("bn1", "bn2", "bn3")


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int = 24
    win_len: int = 250
    f1: int = 8
    temporal_kernel: int = 32
    depth_mult: int = 2
    sep_kernel: int = 16
    k1: int = 5
    s1: int = 5
    k2: int = 50
    s2: int = 2
    dropout_p: float = 0.25
    n_classes: int = 2

    def __post_init__(self):
        for f in fields(self):
            if f.name != "dropout_p" and int(getattr(self, f.name)) < 1:
                raise ValueError(f"{f.name} must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.win_len < self.k1 or (self.win_len - self.k1) % self.s1:
            raise ValueError(f"(win_len - k1) / s1 must be a non-negative integer "
                             f"(win_len={self.win_len}, k1={self.k1}, s1={self.s1})")
        if self.l1 < self.k2 or (self.l1 - self.k2) % self.s2:
            raise ValueError(f"(L1 - k2) / s2 must be a non-negative integer (L1={self.l1}, "
                             f"k2={self.k2}, s2={self.s2})")

    @property
    def f2(self) -> int:
        return self.f1 * self.depth_mult

    @property
    def l1(self) -> int:
        return (self.win_len - self.k1) // self.s1 + 1

    @property
    def l2(self) -> int:
        return (self.l1 - self.k2) // self.s2 + 1

    @property
    def hop(self) -> int:
        """Raw samples between consecutive streaming outputs."""
        return self.s1 * self.s2

    def digest(self) -> int:
        text = ",".join(f"{f.name}={v!r}" for f, v in zip(fields(self), astuple(self)))
        return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Ordered ``(name, shape, offset)`` table of the flat parameter vector."""
    shapes = [
        ("conv1.weight", (cfg.f1, cfg.temporal_kernel)),
        ("bn1.gamma", (cfg.f1,)),
        ("bn1.beta", (cfg.f1,)),
        ("spatial.weight", (cfg.f2, cfg.n_channels)),
        ("bn2.gamma", (cfg.f2,)),
        ("bn2.beta", (cfg.f2,)),
        ("conv3.weight", (cfg.f2, cfg.f2, cfg.sep_kernel)),
        ("bn3.gamma", (cfg.f2,)),
        ("bn3.beta", (cfg.f2,)),
        ("fc.weight", (cfg.n_classes, cfg.f2 * cfg.l2)),
        ("fc.bias", (cfg.n_classes,)),
    ]
    out, offset = [], 0
    for name, shape in shapes:
        out.append((name, shape, offset))
        offset += int(np.prod(shape))
    return out


def param_count(cfg: ModelConfig) -> int:
    name, shape, offset = param_layout(cfg)[-1]
    return offset + int(np.prod(shape))


class ModelParams:
    """Flat parameter vector plus its layout; named tensors are views into it."""

    def __init__(self, config: ModelConfig, flat: np.ndarray):
        flat = np.asarray(flat)
        if flat.ndim != 1 or flat.size != param_count(config):
            raise ValueError(f"flat vector has {flat.size} entries, layout needs {param_count(config)}")
        self.config = config
        self.flat = flat
        self.layout = param_layout(config)

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            name: self.flat[off : off + int(np.prod(shape))].reshape(shape)
            for name, shape, off in self.layout
        }

    def __getitem__(self, name: str) -> np.ndarray:
        for n, shape, off in self.layout:
            if n == name:
                return self.flat[off : off + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def copy(self, dtype=None) -> "ModelParams":
        return ModelParams(self.config, self.flat.astype(dtype or self.flat.dtype, copy=True))

    def __len__(self) -> int:
        return self.flat.size


def flatten_params(params: ModelParams | dict, config: ModelConfig | None = None) -> np.ndarray:
    """Flat copy of the parameters; accepts a ModelParams or a name->tensor dict."""
    if isinstance(params, ModelParams):
        return params.flat.copy()
    if config is None:
        raise ValueError("config required to flatten a tensor dict")
    parts = []
    for name, shape, _ in param_layout(config):
        t = np.asarray(params[name])
        if t.shape != shape:
            raise ValueError(f"{name}: shape {t.shape}, layout expects {shape}")
        parts.append(t.ravel())
    return np.concatenate(parts)


def unflatten_params(flat: np.ndarray, config: ModelConfig) -> ModelParams:
    return ModelParams(config, np.array(flat, copy=True))


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Uniform fan-in initialisation; batch-norm gamma 1, beta 0, fc bias 0."""
    rng = np.random.default_rng(seed)
    p = ModelParams(config, np.zeros(param_count(config), dtype=dtype))
    t = p.tensors()
    fan_in = {
        "conv1.weight": config.temporal_kernel,
        "spatial.weight": config.n_channels,
        "conv3.weight": config.f2 * config.sep_kernel,
        "fc.weight": config.f2 * config.l2,
    }
    for name, fan in fan_in.items():
        bound = 1.0 / np.sqrt(fan)
        t[name][...] = rng.uniform(-bound, bound, size=t[name].shape)
    for bn in BN_LAYERS:
        t[f"{bn}.gamma"][...] = 1.0
    return p


@dataclass
class BnLayerStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    def copy(self) -> "BnLayerStats":
        return BnLayerStats(self.mean.copy(), self.var.copy(), self.momentum)


def init_bn_stats(config: ModelConfig, dtype=np.float32) -> list[BnLayerStats]:
    sizes = (config.f1, config.f2, config.f2)
    return [BnLayerStats(np.zeros(n, dtype), np.ones(n, dtype)) for n in sizes]


def copy_stats(stats: list[BnLayerStats]) -> list[BnLayerStats]:
    return [s.copy() for s in stats]


# ------------------------------------------------------------------ primitives


def _elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0)))


def _pool(h, k, s):
    n = (h.shape[-1] - k) // s + 1
    if k == s:
        return h[..., : n * k].reshape(*h.shape[:-1], n, k).mean(-1)
    return sliding_window_view(h, k, axis=-1)[..., ::s, :].mean(-1)


def _pool_backward(g, k, s, length):
    out = np.zeros((*g.shape[:-1], length), dtype=g.dtype)
    n = g.shape[-1]
    g = g / k
    for j in range(k):
        out[..., j : j + s * (n - 1) + 1 : s] += g
    return out


def _same_pad(K):
    left = (K - 1) // 2
    return left, K - 1 - left


def _conv_windows(x, K):
    """Zero-padded ("same") sliding windows along the last axis: [..., T, K]."""
    left, right = _same_pad(K)
    pad = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    return sliding_window_view(np.pad(x, pad), K, axis=-1)


def _bshape(stat, ndim):
    """Broadcast a [F] or [B, F] statistic against a [B, F, ...] activation."""
    stat = np.asarray(stat)
    if stat.ndim == 1:
        return stat.reshape((1, -1) + (1,) * (ndim - 2))
    return stat.reshape(stat.shape + (1,) * (ndim - 2))


class Moments:
    """Lazily computed first and second moments of one pre-BN activation."""

    def batch(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def per_sample(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


class ActivationMoments(Moments):
    def __init__(self, z: np.ndarray):
        self.z = z

    def batch(self):
        return batch_moments(self.z)

    def per_sample(self):
        return sample_moments(self.z)


class TemporalConvMoments(Moments):
    """Moments of the first temporal convolution, computed without materialising it.

    For padded input ``xp`` and filter ``w``, the output ``z[f, c, t] = w_f . xp[c, t:t+K]``
    has mean ``w_f . s`` and second moment ``w_f^T M w_f`` where ``s`` and ``M``
    are the first and lagged second moments of the length-K input windows.
    """

    def __init__(self, xp: np.ndarray, w: np.ndarray, T: int):
        self.xp = xp
        self.w = w.astype(np.float64)
        self.T = T
        self._lag = None

    def lag_moments(self):
        if self._lag is None:
            self._lag = _lag_moments(self.xp.astype(np.float64), self.w.shape[1], self.T)
        return self._lag

    def _from(self, s, M):
        mean = s @ self.w.T
        var = np.einsum("...kj,fk,fj->...f", M, self.w, self.w) - mean**2
        return mean, np.maximum(var, 0.0)

    def batch(self):
        s, M = self.lag_moments()
        return self._from(s.mean(0), M.mean(0))

    def per_sample(self):
        return self._from(*self.lag_moments())


def _lag_moments(xp: np.ndarray, K: int, T: int):
    """Per-sample mean ``s[b, k]`` and second moment ``M[b, k, j]`` of ``xp[b, c, t+k]`` over (c, t)."""
    B, C, L = xp.shape
    zero = np.zeros((B, 1))
    cs = np.concatenate([zero, np.cumsum(xp.sum(1), axis=1)], axis=1)
    ks = np.arange(K)
    s = cs[:, ks + T] - cs[:, ks]
    M = np.empty((B, K, K))
    for d in range(K):
        prod = np.einsum("bcl,bcl->bl", xp[:, :, : L - d], xp[:, :, d:])
        cp = np.concatenate([zero, np.cumsum(prod, axis=1)], axis=1)
        kk = np.arange(K - d)
        vals = cp[:, kk + T] - cp[:, kk]
        M[:, kk, kk + d] = vals
        M[:, kk + d, kk] = vals
    n = C * T
    return s / n, M / n


# Normaliser: (layer index, moments of the pre-BN activation) -> (mean, var),
# each shaped [F] (shared) or [B, F] (per window).
Normalizer = Callable[[int, Moments], tuple[np.ndarray, np.ndarray]]


def batch_moments(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and (biased) variance over every axis except axis 1."""
    axes = (0,) + tuple(range(2, z.ndim))
    mean = z.mean(axis=axes)
    var = ((z - _bshape(mean, z.ndim)) ** 2).mean(axis=axes)
    return mean, var


def sample_moments(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-window, per-feature moments: ``[B, F]`` each."""
    axes = tuple(range(2, z.ndim))
    mean = z.mean(axis=axes)
    var = ((z - mean.reshape(mean.shape + (1,) * len(axes))) ** 2).mean(axis=axes)
    return mean, var


def running_normalizer(stats: list[BnLayerStats]) -> Normalizer:
    return lambda layer, moments: (stats[layer].mean, stats[layer].var)


def _train_normalizer(layer, moments):
    return moments.batch()


def _as_batch(x, config):
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (config.n_channels, config.win_len):
        raise ValueError(
            f"expected window(s) of shape [{config.n_channels}, {config.win_len}], got {x.shape[-2:]}"
        )
    return x


class _Cache(NamedTuple):
    xp: np.ndarray
    u: np.ndarray
    v: np.ndarray
    mom1: TemporalConvMoments
    mean1: np.ndarray
    inv1: np.ndarray
    g1m: np.ndarray
    h1m: np.ndarray
    z2hat: np.ndarray
    inv2: np.ndarray
    y2: np.ndarray
    mask: np.ndarray | None
    hw: np.ndarray
    z3hat: np.ndarray
    inv3: np.ndarray
    y3: np.ndarray
    flat: np.ndarray
    moments: list


def _affine_bn(z, mean, var, gamma, beta, dtype):
    inv = (1.0 / np.sqrt(_bshape(var, z.ndim) + BN_EPS)).astype(dtype)
    zhat = (z - _bshape(mean, z.ndim).astype(dtype)) * inv
    return zhat, inv, zhat * _bshape(gamma, z.ndim) + _bshape(beta, z.ndim)


def _spatial_temporal(params: ModelParams, xp: np.ndarray, n_out: int):
    """Spatial mix then per-map temporal filter: ``u = W_s xp``, ``v = w1 * u``."""
    cfg = params.config
    t = params.tensors()
    fidx = np.repeat(np.arange(cfg.f1), cfg.depth_mult)
    w1m = t["conv1.weight"][fidx]
    u = np.tensordot(xp, t["spatial.weight"], axes=([-2], [1]))  # [..., L, f2]
    u = np.moveaxis(u, -1, -2)  # [..., f2, L]
    uw = sliding_window_view(u, cfg.temporal_kernel, axis=-1)[..., :n_out, :]
    v = np.einsum("...mtk,mk->...mt", uw, w1m, optimize=True)
    return u, v


def _layer1_affine(params: ModelParams, mean1, var1):
    """BN1 folded through the spatial conv: ``z2 = g * v + h * sum_c(W_s)`` per output map."""
    cfg = params.config
    t = params.tensors()
    dtype = params.flat.dtype
    fidx = np.repeat(np.arange(cfg.f1), cfg.depth_mult)
    inv1 = (1.0 / np.sqrt(np.asarray(var1, np.float64) + BN_EPS)).astype(dtype)
    mean1 = np.asarray(mean1).astype(dtype)
    g1 = t["bn1.gamma"] * inv1
    h1 = t["bn1.beta"] - t["bn1.gamma"] * mean1 * inv1
    return mean1, inv1, g1[..., fidx], h1[..., fidx]


def _head(params: ModelParams, d: np.ndarray, normalize: Normalizer, moments: list):
    """conv3 -> BN3 -> ELU -> pool2 -> linear on pooled features ``[B, f2, L1]``."""
    cfg = params.config
    t = params.tensors()
    hw = _conv_windows(d, cfg.sep_kernel)  # [B, f2, L1, K3]
    z3 = np.tensordot(hw, t["conv3.weight"], axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    mean3, var3 = normalize(2, ActivationMoments(z3))
    moments.append((mean3, var3))
    z3hat, inv3, a3 = _affine_bn(z3, mean3, var3, t["bn3.gamma"], t["bn3.beta"], params.flat.dtype)
    y3 = _elu(a3)
    flat = _pool(y3, cfg.k2, cfg.s2).reshape(d.shape[0], -1)
    logits = flat @ t["fc.weight"].T + t["fc.bias"]
    return logits, hw, z3hat, inv3, y3, flat


def _run(params: ModelParams, x: np.ndarray, normalize: Normalizer, mask=None, keep=False):
    cfg = params.config
    t = params.tensors()
    dtype = params.flat.dtype
    x = x.astype(dtype, copy=False)
    T = cfg.win_len
    moments = []

    left, right = _same_pad(cfg.temporal_kernel)
    xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
    u, v = _spatial_temporal(params, xp, T)
    mom1 = TemporalConvMoments(xp, t["conv1.weight"], T)
    mean1, var1 = normalize(0, mom1)
    moments.append((mean1, var1))
    mean1, inv1, g1m, h1m = _layer1_affine(params, mean1, var1)
    z2 = _bshape(g1m, 3) * v + _bshape(h1m * t["spatial.weight"].sum(1), 3)

    mean2, var2 = normalize(1, ActivationMoments(z2))
    moments.append((mean2, var2))
    z2hat, inv2, a2 = _affine_bn(z2, mean2, var2, t["bn2.gamma"], t["bn2.beta"], dtype)
    y2 = _elu(a2)
    p1 = _pool(y2, cfg.k1, cfg.s1)
    d = p1 * mask if mask is not None else p1

    logits, hw, z3hat, inv3, y3, flat = _head(params, d, normalize, moments)
    if not keep:
        return logits, None
    cache = _Cache(xp, u, v, mom1, mean1, inv1, g1m, h1m, z2hat, inv2, y2, mask,
                   hw, z3hat, inv3, y3, flat, moments)
    return logits, cache


def forward(params: ModelParams, stats: list[BnLayerStats], window, mode: str = "eval",
            *, normalize: Normalizer | None = None, dropout_seed: int | None = None):
    """Logits for one window ``[C, T]`` (returns ``[n_classes]``) or a batch.

    ``mode="eval"`` normalises with the running statistics (or a custom
    ``normalize`` hook); ``mode="train"`` uses batch statistics and returns
    ``(logits, new_stats)``.
    """
    cfg = params.config
    single = np.ndim(window) == 2
    x = _as_batch(window, cfg)
    if mode == "eval":
        logits, _ = _run(params, x, normalize or running_normalizer(stats))
        return logits[0] if single else logits
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    mask = _dropout_mask(cfg, x.shape[0], dropout_seed, params.flat.dtype)
    logits, cache = _run(params, x, _train_normalizer, mask, keep=True)
    new_stats = _updated_stats(stats, cache.moments)
    return (logits[0] if single else logits), new_stats


def _dropout_mask(cfg, B, seed, dtype):
    if seed is None or cfg.dropout_p == 0:
        return None
    rng = np.random.default_rng(seed)
    keep = rng.random((B, cfg.f2, cfg.l1)) >= cfg.dropout_p
    return keep.astype(dtype) / dtype.type(1.0 - cfg.dropout_p)


def _updated_stats(stats, moments):
    out = []
    for s, (mean, var) in zip(stats, moments):
        m = s.momentum
        out.append(BnLayerStats(
            ((1 - m) * s.mean + m * mean).astype(s.mean.dtype),
            ((1 - m) * s.var + m * var).astype(s.var.dtype),
            m,
        ))
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


class GradResult(NamedTuple):
    grad: np.ndarray
    loss: float
    stats: list[BnLayerStats]


def _bn_backward(dy, zhat, inv, gamma):
    """Gradient through train-mode batch-norm; returns (dz, dgamma, dbeta)."""
    axes = (0,) + tuple(range(2, dy.ndim))
    n = dy.size // dy.shape[1]
    dgamma = (dy * zhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dzhat = dy * _bshape(gamma, dy.ndim)
    dz = inv / n * (
        n * dzhat
        - _bshape(dzhat.sum(axis=axes), dy.ndim)
        - zhat * _bshape((dzhat * zhat).sum(axis=axes), dy.ndim)
    )
    return dz, dgamma, dbeta


def _elu_grad(y):
    return np.where(y > 0, 1.0, y + 1.0).astype(y.dtype)


def _group_sum(a, cfg):
    return a.reshape(cfg.f1, cfg.depth_mult, *a.shape[1:]).sum(1)


def backward(params: ModelParams, stats: list[BnLayerStats], batch, labels,
             *, dropout_seed: int | None = None) -> GradResult:
    """Mean cross-entropy and its gradient (same layout as ``params.flat``).

    Batch-norm runs in train mode; the returned stats carry the momentum
    update of the running moments.
    """
    cfg = params.config
    x = _as_batch(batch, cfg)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != x.shape[0]:
        raise ValueError(f"{x.shape[0]} windows but {labels.shape[0]} labels")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= cfg.n_classes:
        raise ValueError(f"labels must lie in [0, {cfg.n_classes})")
    dtype = params.flat.dtype
    B = x.shape[0]
    mask = _dropout_mask(cfg, B, dropout_seed, dtype)
    logits, c = _run(params, x, _train_normalizer, mask, keep=True)
    t = params.tensors()
    grad = ModelParams(cfg, np.zeros_like(params.flat))
    g = grad.tensors()

    loss = cross_entropy(logits, labels)
    dlogits = softmax(logits)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B

    # linear head, pool 2, BN3
    g["fc.weight"][...] = dlogits.T @ c.flat
    g["fc.bias"][...] = dlogits.sum(0)
    dp2 = (dlogits @ t["fc.weight"]).reshape(B, cfg.f2, cfg.l2)
    da3 = _pool_backward(dp2, cfg.k2, cfg.s2, cfg.l1) * _elu_grad(c.y3)
    dz3, g["bn3.gamma"][...], g["bn3.beta"][...] = _bn_backward(da3, c.z3hat, c.inv3, t["bn3.gamma"])

    # conv3 (same padding)
    K3 = cfg.sep_kernel
    g["conv3.weight"][...] = np.tensordot(dz3, c.hw, axes=([0, 2], [0, 2]))
    contrib = np.tensordot(dz3, t["conv3.weight"], axes=([1], [0]))  # [B, L1, i, k]
    dpad = np.zeros((B, cfg.f2, cfg.l1 + K3 - 1), dtype=dtype)
    for k in range(K3):
        dpad[:, :, k : k + cfg.l1] += contrib[:, :, :, k].transpose(0, 2, 1)
    left3, _ = _same_pad(K3)
    dp1 = dpad[:, :, left3 : left3 + cfg.l1]
    if c.mask is not None:
        dp1 = dp1 * c.mask

    # pool 1, ELU, BN2
    da2 = _pool_backward(dp1, cfg.k1, cfg.s1, cfg.win_len) * _elu_grad(c.y2)
    dz2, g["bn2.gamma"][...], g["bn2.beta"][...] = _bn_backward(da2, c.z2hat, c.inv2, t["bn2.gamma"])

    # z2 = g1m * v + h1m * sum_c(W_s), with v = w1 (*) (W_s xp)
    T, K = cfg.win_len, cfg.temporal_kernel
    fidx = np.repeat(np.arange(cfg.f1), cfg.depth_mult)
    w1m = t["conv1.weight"][fidx]
    ws = t["spatial.weight"]
    gamma1 = t["bn1.gamma"]
    dsum = dz2.sum((0, 2))
    dg1 = _group_sum((dz2 * c.v).sum((0, 2)), cfg)
    dh1 = _group_sum(dsum * ws.sum(1), cfg)
    dws = np.repeat((dsum * c.h1m)[:, None], cfg.n_channels, 1)

    dv = dz2 * c.g1m[None, :, None]
    dw1m = np.einsum("bmt,bmtk->mk", dv, sliding_window_view(c.u, K, axis=-1)[:, :, :T], optimize=True)
    # transpose convolution: full-padded dv against the flipped kernel
    dvw = sliding_window_view(np.pad(dv, ((0, 0), (0, 0), (K - 1, K - 1))), K, axis=-1)
    du = np.einsum("bmlk,mk->bml", dvw, w1m[:, ::-1], optimize=True)
    dws += np.tensordot(du, c.xp, axes=([0, 2], [0, 2]))
    dw1 = _group_sum(dw1m, cfg)

    # BN1 folded: g1 = gamma * inv, h1 = beta - gamma * mean * inv
    inv1, mean1 = c.inv1, c.mean1
    g["bn1.gamma"][...] = dg1 * inv1 - dh1 * mean1 * inv1
    g["bn1.beta"][...] = dh1
    dmean1 = -dh1 * gamma1 * inv1
    dinv1 = dg1 * gamma1 - dh1 * gamma1 * mean1
    dvar1 = dinv1 * (-0.5) * inv1**3
    s, M = c.mom1.lag_moments()
    s, M = s.mean(0), M.mean(0)
    w1 = t["conv1.weight"].astype(np.float64)
    dw1 = dw1 + (dmean1[:, None] * s + dvar1[:, None] * (2 * w1 @ M - 2 * mean1[:, None] * s)).astype(dtype)
    g["conv1.weight"][...] = dw1
    g["spatial.weight"][...] = dws

    return GradResult(grad.flat, loss, _updated_stats(stats, c.moments))
