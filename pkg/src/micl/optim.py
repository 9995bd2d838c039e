"""Pre-training on the source pool, supervised fine-tuning, checkpoints."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataio import SessionDataset
from .dsp import WindowSpec, session_windows
from .net import (
    BnLayerStats,
    ModelConfig,
    ModelParams,
    backward,
    init_bn_stats,
    init_params,
    param_count,
)
from .otta import ea_align_offline

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MICK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHQI")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs_pretrain: int = 100
    epochs_finetune: int = 20
    weight_decay: float = 0.0
    bn_momentum: float = 0.1
    train_hop: int = 10  # raw-sample stride between training windows
    ea: bool = True  # align training windows per session
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        for name in ("batch_size", "train_hop"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs_pretrain < 0 or self.epochs_finetune < 0:
            raise ValueError("epoch counts must be non-negative")


class Adam:
    def __init__(self, size: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float32):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size, dtype)
        self.v = np.zeros(size, dtype)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        """Parameter increment to subtract for this gradient."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(self.m.dtype)


@dataclass(frozen=True)
class Lineage:
    init: str  # "source" for the pre-trained model, else the init checkpoint id
    data_sessions: tuple[int, ...]
    subject_id: int
    paradigm: str
    strategy: str
    source_subjects: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data_sessions"] = list(self.data_sessions)
        d["source_subjects"] = list(self.source_subjects)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Lineage":
        return cls(d["init"], tuple(d["data_sessions"]), int(d["subject_id"]), d["paradigm"],
                   d["strategy"], tuple(d.get("source_subjects", ())))


@dataclass
class Checkpoint:
    id: str
    params: ModelParams
    bn_stats: list[BnLayerStats]
    lineage: Lineage
    train_losses: list[float] = field(default_factory=list)

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    def to_bytes(self) -> bytes:
        cfg = self.config
        parts = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, cfg.digest(), param_count(cfg))]
        parts.append(self.params.flat.astype("<f4").tobytes())
        for s in self.bn_stats:
            parts.append(struct.pack("<If", s.mean.size, s.momentum))
            parts.append(s.mean.astype("<f4").tobytes())
            parts.append(s.var.astype("<f4").tobytes())
        meta = {
            "id": self.id,
            "config": cfg.to_dict(),
            "lineage": self.lineage.to_dict(),
            "train_losses": [float(x) for x in self.train_losses],
        }
        blob = json.dumps(meta, sort_keys=True).encode()
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
        return b"".join(parts)


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    if len(raw) < _CKPT_HEADER.size:
        raise CheckpointFormatError(f"{path}: truncated header")
    _, version, digest, n_params = _CKPT_HEADER.unpack_from(raw)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off = _CKPT_HEADER.size
    try:
        flat = np.frombuffer(raw, "<f4", n_params, off).astype(np.float32)
        off += 4 * n_params
        stats = []
        for _ in range(3):
            n, momentum = struct.unpack_from("<If", raw, off)
            off += 8
            mean = np.frombuffer(raw, "<f4", n, off).astype(np.float32)
            var = np.frombuffer(raw, "<f4", n, off + 4 * n).astype(np.float32)
            off += 8 * n
            stats.append(BnLayerStats(mean, var, float(momentum)))
        (n_meta,) = struct.unpack_from("<I", raw, off)
        meta = json.loads(raw[off + 4 : off + 4 + n_meta].decode())
    except (struct.error, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    cfg = ModelConfig(**meta["config"])
    if cfg.digest() != digest:
        raise CheckpointFormatError(f"{path}: config digest mismatch")
    if expected_config is not None and expected_config.digest() != digest:
        raise CheckpointFormatError(f"{path}: checkpoint built for a different model config")
    return Checkpoint(meta["id"], ModelParams(cfg, flat), stats, Lineage.from_dict(meta["lineage"]),
                      meta.get("train_losses", []))


# ----------------------------------------------------------------- training


def training_windows(sessions: list[SessionDataset], win_len: int, cfg: TrainConfig):
    """Pooled training windows and labels; EA-aligned per session when ``cfg.ea``."""
    spec = WindowSpec(win_len, min(cfg.train_hop, win_len))
    xs, ys = [], []
    for d in sessions:
        x, y, _ = session_windows(d, spec)
        if len(x) == 0:
            continue
        if cfg.ea:
            x = ea_align_offline(x)
        xs.append(x.astype(np.float32))
        ys.append(y)
    if not xs:
        raise ValueError("no training windows: every trial is shorter than one window")
    return np.concatenate(xs), np.concatenate(ys)


def _fit(params: ModelParams, stats, X, y, cfg: TrainConfig, epochs: int, seed: int):
    rng = np.random.default_rng(seed)
    stats = [replace(s, momentum=cfg.bn_momentum) for s in stats]
    adam = Adam(params.flat.size, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, params.flat.dtype)
    losses = []
    n = len(X)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            res = backward(params, stats, X[idx], y[idx], dropout_seed=int(rng.integers(2**62)))
            stats = res.stats
            grad = res.grad
            if cfg.weight_decay:
                grad = grad + cfg.weight_decay * params.flat
            params.flat -= adam.step(grad)
            total += res.loss * len(idx)
        losses.append(total / n)
        log.debug("epoch %d loss %.4f", epoch + 1, losses[-1])
    return params, stats, losses


def pretrain(source: list[SessionDataset], cfg: TrainConfig, model: ModelConfig | None = None,
             *, held_out_subject: int = 0, ckpt_id: str = "source") -> Checkpoint:
    """Cross-subject source model from first-session data of the other subjects."""
    if not source:
        raise ValueError("source pool is empty")
    paradigms = {d.paradigm for d in source}
    chans = {d.n_channels for d in source if d.n_channels is not None}
    if len(paradigms) != 1 or len(chans) != 1:
        raise ValueError(f"inconsistent source pool: paradigms {paradigms}, channel counts {chans}")
    n_chan = chans.pop()
    model = model or ModelConfig(n_channels=n_chan)
    if model.n_channels != n_chan:
        raise ValueError(f"model expects {model.n_channels} channels, data has {n_chan}")
    X, y = training_windows(source, model.win_len, cfg)
    params = init_params(model, seed=cfg.seed)
    params, stats, losses = _fit(params, init_bn_stats(model), X, y, cfg, cfg.epochs_pretrain, cfg.seed + 1)
    lineage = Lineage(
        init="source",
        data_sessions=tuple(sorted({d.session_idx for d in source})),
        subject_id=held_out_subject,
        paradigm=paradigms.pop(),
        strategy="source",
        source_subjects=tuple(sorted({d.subject_id for d in source})),
    )
    return Checkpoint(ckpt_id, params, stats, lineage, losses)


def finetune(init: Checkpoint, data: list[SessionDataset], cfg: TrainConfig, *,
             strategy: str = "", ckpt_id: str | None = None, seed: int | None = None) -> Checkpoint:
    """Supervised fine-tuning of ``init`` on windows pooled from ``data``."""
    if not data:
        raise ValueError("no fine-tuning data")
    subjects = {d.subject_id for d in data}
    if len(subjects) != 1:
        raise ValueError(f"fine-tuning data mixes subjects {sorted(subjects)}")
    model = init.config
    for d in data:
        if d.n_channels != model.n_channels:
            raise ValueError(f"session {d.session_idx} has {d.n_channels} channels, "
                             f"init checkpoint expects {model.n_channels}")
    X, y = training_windows(data, model.win_len, cfg)
    params = init.params.copy()
    stats = [s.copy() for s in init.bn_stats]
    params, stats, losses = _fit(params, stats, X, y, cfg, cfg.epochs_finetune,
                                 cfg.seed if seed is None else seed)
    sessions = tuple(sorted(d.session_idx for d in data))
    subject = subjects.pop()
    lineage = Lineage(init.id, sessions, subject, data[0].paradigm, strategy or "finetune")
    return Checkpoint(ckpt_id or f"{strategy or 'ft'}/t{max(sessions)}", params, stats, lineage, losses)
