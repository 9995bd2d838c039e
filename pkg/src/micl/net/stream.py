"""Sample-exact streaming inference with real-time adaptive pooling (RAP).

The decoder emits one output every ``s1 * s2`` raw samples, each equal to a
batch forward pass over the most recent ``win_len`` samples.  Between
consecutive outputs the pool-1 sequence shifts by exactly ``s2`` positions, so
pool-1 blocks whose receptive field lies strictly inside both windows are
carried over; only the blocks touched by the zero padding at the window edges
and the newly completed blocks are recomputed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    BnLayerStats,
    ModelConfig,
    ModelParams,
    _affine_bn,
    _elu,
    _head,
    _layer1_affine,
    _same_pad,
    _spatial_temporal,
    running_normalizer,
)


@dataclass
class StreamState:
    config: ModelConfig
    ring: np.ndarray  # [C, win_len] raw samples, circular
    write_pos: int = 0
    n_seen: int = 0
    since_emit: int = 0  # raw-sample phase within the current hop
    pooled: np.ndarray | None = None  # pool-1 features [f2, L1] of the last emitted window
    n_emitted: int = 0
    blocks_computed: int = field(default=0, repr=False)

    @property
    def warmed_up(self) -> bool:
        return self.n_seen >= self.config.win_len

    def window(self) -> np.ndarray:
        """Chronologically ordered ring contents ``[C, win_len]``."""
        return np.concatenate([self.ring[:, self.write_pos :], self.ring[:, : self.write_pos]], axis=1)


def new_stream(config: ModelConfig, dtype=np.float32) -> StreamState:
    return StreamState(config, np.zeros((config.n_channels, config.win_len), dtype=dtype))


def interior_blocks(config: ModelConfig) -> tuple[int, int]:
    """Range ``[lo, hi]`` of pool-1 blocks unaffected by the window-edge padding."""
    left, right = _same_pad(config.temporal_kernel)
    lo = -(-left // config.s1)
    hi = (config.win_len - 1 - right - (config.k1 - 1)) // config.s1
    return lo, min(hi, config.l1 - 1)


def _pool1_blocks(params: ModelParams, stats: list[BnLayerStats], xp: np.ndarray, blocks) -> np.ndarray:
    """Eval-mode pool-1 features ``[f2, len(blocks)]`` of a padded window ``xp [C, L]``."""
    cfg = params.config
    t = params.tensors()
    span = cfg.k1 + cfg.temporal_kernel - 1
    starts = np.asarray(blocks) * cfg.s1
    segs = np.stack([xp[:, s : s + span] for s in starts])  # [n, C, span]
    _, v = _spatial_temporal(params, segs, cfg.k1)  # [n, f2, k1]
    mean1, inv1, g1m, h1m = _layer1_affine(params, stats[0].mean, stats[0].var)
    z2 = g1m[:, None] * v + (h1m * t["spatial.weight"].sum(1))[:, None]
    _, _, a2 = _affine_bn(z2, stats[1].mean, stats[1].var, t["bn2.gamma"], t["bn2.beta"], params.flat.dtype)
    return _elu(a2).mean(-1).T


def _emit(state: StreamState, params: ModelParams, stats: list[BnLayerStats]) -> np.ndarray:
    cfg = state.config
    left, right = _same_pad(cfg.temporal_kernel)
    xp = np.pad(state.window().astype(params.flat.dtype), ((0, 0), (left, right)))
    lo, hi = interior_blocks(cfg)
    if state.pooled is None:
        todo = np.arange(cfg.l1)
        pooled = np.empty((cfg.f2, cfg.l1), dtype=params.flat.dtype)
    else:
        pooled = np.empty_like(state.pooled)
        pooled[:, : cfg.l1 - cfg.s2] = state.pooled[:, cfg.s2 :]
        j = np.arange(cfg.l1)
        reuse = (j >= lo) & (j + cfg.s2 <= hi)
        todo = j[~reuse]
    pooled[:, todo] = _pool1_blocks(params, stats, xp, todo)
    state.pooled = pooled
    state.blocks_computed += len(todo)
    state.n_emitted += 1
    logits, *_ = _head(params, pooled[None], running_normalizer(stats), [])
    return logits[0]


def stream_outputs(state: StreamState, params: ModelParams, stats: list[BnLayerStats], samples) -> list[np.ndarray]:
    """Absorb ``samples [C, h]`` (any h) and return every output emitted on the way."""
    cfg = state.config
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[0] != cfg.n_channels:
        raise ValueError(f"expected samples of shape [{cfg.n_channels}, h], got {samples.shape}")
    if params.config != cfg:
        raise ValueError("parameters were built for a different model config")
    W, hop = cfg.win_len, cfg.hop
    out = []
    pos = 0
    n = samples.shape[1]
    while pos < n:
        if state.n_seen < W:
            need = W - state.n_seen
        else:
            need = hop - state.since_emit
        take = min(need, n - pos)
        chunk = samples[:, pos : pos + take]
        idx = (state.write_pos + np.arange(take)) % W
        state.ring[:, idx] = chunk
        state.write_pos = (state.write_pos + take) % W
        state.n_seen += take
        pos += take
        if state.n_seen < W:
            continue
        if state.n_seen == W and take == need:
            state.since_emit = 0
            out.append(_emit(state, params, stats))
            continue
        state.since_emit += take
        if state.since_emit == hop:
            state.since_emit = 0
            out.append(_emit(state, params, stats))
    return out


def forward_stream(state: StreamState, params: ModelParams, stats: list[BnLayerStats], new_samples):
    """Absorb one hop of samples; returns the new logits or ``None`` during warm-up.

    Chunks that would complete more than one output are rejected; use
    :func:`stream_outputs` for arbitrary chunk sizes.
    """
    cfg = state.config
    h = np.shape(new_samples)[-1]
    if state.warmed_up and h > cfg.hop:
        raise ValueError(f"after warm-up feed at most one hop ({cfg.hop} samples) per call, got {h}")
    out = stream_outputs(state, params, stats, new_samples)
    if len(out) > 1:
        raise ValueError(f"chunk of {h} samples completed {len(out)} outputs; use stream_outputs")
    return out[0] if out else None
