"""Loop-based reference implementation of the classifier, written directly from
the layer list and used only as a test oracle."""

from __future__ import annotations

import numpy as np

EPS = 1e-5


def _same(x, K):
    left = (K - 1) // 2
    return np.pad(x, ((0, 0), (left, K - 1 - left)))


def _bn_stats(a):
    # a: [B, F, ...] -> per-feature moments over everything else
    axes = (0,) + tuple(range(2, a.ndim))
    return a.mean(axis=axes), a.var(axis=axes)


def naive_forward(params, stats, batch, mode="eval"):
    cfg = params.config
    t = {k: v.astype(np.float64) for k, v in params.tensors().items()}
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    B, C, T = x.shape
    K = cfg.temporal_kernel
    f1, D = cfg.f1, cfg.depth_mult
    f2 = f1 * D

    z1 = np.zeros((B, f1, C, T))
    for b in range(B):
        xp = _same(x[b], K)
        for f in range(f1):
            for c in range(C):
                for tt in range(T):
                    z1[b, f, c, tt] = np.dot(t["conv1.weight"][f], xp[c, tt : tt + K])
    m1, v1 = _bn_stats(z1) if mode == "train" else (stats[0].mean, stats[0].var)
    a1 = (z1 - m1[None, :, None, None]) / np.sqrt(v1[None, :, None, None] + EPS)
    a1 = a1 * t["bn1.gamma"][None, :, None, None] + t["bn1.beta"][None, :, None, None]

    z2 = np.zeros((B, f2, T))
    for m in range(f2):
        f = m // D
        for c in range(C):
            z2[:, m] += t["spatial.weight"][m, c] * a1[:, f, c]
    m2, v2 = _bn_stats(z2) if mode == "train" else (stats[1].mean, stats[1].var)
    a2 = (z2 - m2[None, :, None]) / np.sqrt(v2[None, :, None] + EPS)
    a2 = a2 * t["bn2.gamma"][None, :, None] + t["bn2.beta"][None, :, None]
    y2 = np.where(a2 > 0, a2, np.exp(np.minimum(a2, 0)) - 1)

    L1 = (T - cfg.k1) // cfg.s1 + 1
    p1 = np.stack([y2[..., j * cfg.s1 : j * cfg.s1 + cfg.k1].mean(-1) for j in range(L1)], axis=-1)

    K3 = cfg.sep_kernel
    z3 = np.zeros((B, f2, L1))
    for b in range(B):
        pp = _same(p1[b], K3)
        for o in range(f2):
            for j in range(L1):
                z3[b, o, j] = np.sum(t["conv3.weight"][o] * pp[:, j : j + K3])
    m3, v3 = _bn_stats(z3) if mode == "train" else (stats[2].mean, stats[2].var)
    a3 = (z3 - m3[None, :, None]) / np.sqrt(v3[None, :, None] + EPS)
    a3 = a3 * t["bn3.gamma"][None, :, None] + t["bn3.beta"][None, :, None]
    y3 = np.where(a3 > 0, a3, np.exp(np.minimum(a3, 0)) - 1)

    L2 = (L1 - cfg.k2) // cfg.s2 + 1
    p2 = np.stack([y3[..., j * cfg.s2 : j * cfg.s2 + cfg.k2].mean(-1) for j in range(L2)], axis=-1)
    flat = p2.reshape(B, -1)
    return flat @ t["fc.weight"].T + t["fc.bias"]
