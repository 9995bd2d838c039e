"""Single-sample online test-time adaptation: online Euclidean alignment and AdaBN."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .net import BnLayerStats, copy_stats, forward
from .net.model import Moments

DEFAULT_RHO = 0.01


@dataclass
class EaState:
    r_bar: np.ndarray | None = None  # running mean window covariance [C, C], float64
    n_windows: int = 0
    eps: float = 1e-8

    def copy(self) -> "EaState":
        return EaState(None if self.r_bar is None else self.r_bar.copy(), self.n_windows, self.eps)


@dataclass
class AdaBnState:
    stats: list[BnLayerStats]
    rho: float = DEFAULT_RHO
    enabled: bool = True

    @classmethod
    def from_stats(cls, stats, rho: float = DEFAULT_RHO, enabled: bool = True) -> "AdaBnState":
        return cls([BnLayerStats(s.mean.astype(np.float64), s.var.astype(np.float64), s.momentum)
                    for s in stats], rho, enabled)

    def copy(self) -> "AdaBnState":
        return AdaBnState(copy_stats(self.stats), self.rho, self.enabled)


@dataclass(frozen=True)
class OttaFlags:
    ea: bool = True
    adabn: bool = True

    @property
    def tag(self) -> str:
        parts = [n for n, on in (("ea", self.ea), ("adabn", self.adabn)) if on]
        return "+".join(parts) if parts else "off"

    @classmethod
    def parse(cls, text: str) -> "OttaFlags":
        """Accepts ``ea,adabn``, ``ea+adabn``, ``ea``, ``adabn`` or ``off``."""
        items = {s.strip().lower() for s in text.replace("+", ",").split(",") if s.strip()}
        if items in ({"off"}, {"none"}, set()):
            return cls(False, False)
        unknown = items - {"ea", "adabn"}
        if unknown:
            raise ValueError(f"unknown OTTA component(s): {sorted(unknown)}")
        return cls("ea" in items, "adabn" in items)


def inv_sqrt_spd(m: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Inverse matrix square root via ``eigh``; eigenvalues floored at ``eps * max(eig)``.

    Accepts a single matrix or a stack ``[..., C, C]``.
    """
    m = np.asarray(m, dtype=np.float64)
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    asym = float(np.abs(m - np.swapaxes(m, -1, -2)).max(initial=0.0))
    if asym > 1e-4 * scale:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    sym = 0.5 * (m + np.swapaxes(m, -1, -2))
    w, v = np.linalg.eigh(sym)
    top = np.maximum(w[..., -1:], np.finfo(np.float64).tiny)
    w = np.maximum(w, eps * top)
    return (v * (1.0 / np.sqrt(w))[..., None, :]) @ np.swapaxes(v, -1, -2)


def window_covariance(window: np.ndarray) -> np.ndarray:
    x = np.asarray(window, dtype=np.float64)
    return x @ x.T / x.shape[-1]


def ea_update(state: EaState, window: np.ndarray) -> EaState:
    """Cumulative running mean of window covariances."""
    x = np.asarray(window)
    if state.r_bar is not None and state.r_bar.shape[0] != x.shape[0]:
        raise ValueError(f"window has {x.shape[0]} channels, state tracks {state.r_bar.shape[0]}")
    cw = window_covariance(x)
    n = state.n_windows
    r = cw if n == 0 else (n * state.r_bar + cw) / (n + 1)
    return EaState(r, n + 1, state.eps)


def ea_align(state: EaState, window: np.ndarray) -> np.ndarray:
    if state.n_windows == 0 or state.r_bar is None:
        raise ValueError("EA state is empty; call ea_update before ea_align")
    x = np.asarray(window)
    aligned = inv_sqrt_spd(state.r_bar, state.eps) @ x.astype(np.float64)
    return aligned.astype(x.dtype if x.dtype.kind == "f" else np.float64)


def ea_reference(windows: np.ndarray) -> np.ndarray:
    """Mean covariance of a window stack ``[N, C, S]`` (offline EA reference)."""
    x = np.asarray(windows, dtype=np.float64)
    return np.einsum("ncs,nds->cd", x, x) / (x.shape[0] * x.shape[2])


def ea_align_offline(windows: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Align a whole window stack by its own mean covariance."""
    r = inv_sqrt_spd(ea_reference(windows), eps)
    return np.einsum("cd,nds->ncs", r, windows.astype(np.float64)).astype(np.float32)


def _ema(running: np.ndarray, value: np.ndarray, rho: float) -> np.ndarray:
    return (1.0 - rho) * running + rho * value


def adabn_apply(state: AdaBnState, layer_batch_stats) -> AdaBnState:
    """EMA of the running moments towards the current window's moments.

    ``layer_batch_stats`` holds one ``(mean, var)`` pair per BN layer (``None``
    leaves that layer untouched).
    """
    if not state.enabled:
        return state
    out = []
    for s, new in zip(state.stats, layer_batch_stats):
        if new is None:
            out.append(s.copy())
            continue
        mean, var = new
        out.append(BnLayerStats(_ema(s.mean, np.asarray(mean, np.float64), state.rho),
                                _ema(s.var, np.asarray(var, np.float64), state.rho), s.momentum))
    return AdaBnState(out, state.rho, state.enabled)


def otta_infer(checkpoint, ea: EaState, bn: AdaBnState, window: np.ndarray,
               ea_on: bool = True, adabn_on: bool = True):
    """One adaptation-plus-inference step on a single window.

    Returns ``(logits, ea, bn)``; input states are not mutated.  With both
    flags off this is the plain eval-mode forward with the stored BN stats.
    """
    params, stats = checkpoint.params, checkpoint.bn_stats
    x = np.asarray(window)
    if ea_on:
        ea = ea_update(ea, x)
        x = ea_align(ea, x)
    if not adabn_on:
        return forward(params, stats, x), ea, bn

    holder = [bn]

    def normalize(layer: int, moments: Moments):
        mean, var = moments.per_sample()
        stats_in = [None] * len(holder[0].stats)
        stats_in[layer] = (mean[0], var[0])
        holder[0] = adabn_apply(holder[0], stats_in)
        s = holder[0].stats[layer]
        return s.mean, s.var

    logits = forward(params, stats, x, normalize=normalize)
    return logits, ea, holder[0]


@dataclass
class SessionAdaptation:
    """Final OTTA states after replaying a session."""

    ea: EaState
    bn: AdaBnState | None
    n_windows: int = 0
    r_bar_history: list = field(default_factory=list, repr=False)


def _ea_sequence(windows: np.ndarray, state: EaState):
    """Aligned windows and updated state for a sequential stream, vectorised over windows."""
    x = np.asarray(windows, dtype=np.float64)
    covs = np.einsum("ncs,nds->ncd", x, x) / x.shape[2]
    refs = np.empty_like(covs)
    r, n = state.r_bar, state.n_windows
    for i, cw in enumerate(covs):
        r = cw if n == 0 else (n * r + cw) / (n + 1)
        n += 1
        refs[i] = r
    aligned = inv_sqrt_spd(refs, state.eps) @ x
    return aligned.astype(np.float32), EaState(r, n, state.eps)


def otta_session(checkpoint, windows: np.ndarray, flags: OttaFlags = OttaFlags(),
                 rho: float = DEFAULT_RHO, chunk: int = 512):
    """Replay a window stream through OTTA starting from fresh states.

    Equivalent to calling :func:`otta_infer` on each window in order, but
    vectorised over windows: the EA references and the AdaBN running moments
    are both causal recursions that can be unrolled layer by layer.
    Returns ``(logits [N, n_classes], SessionAdaptation)``.
    """
    params, stats = checkpoint.params, checkpoint.bn_stats
    windows = np.asarray(windows)
    ea = EaState()
    bn = AdaBnState.from_stats(stats, rho) if flags.adabn else None
    outs = []
    for start in range(0, len(windows), chunk):
        x = windows[start : start + chunk]
        if flags.ea:
            x, ea = _ea_sequence(x, ea)
        if not flags.adabn:
            outs.append(forward(params, stats, x))
            continue
        holder = [bn]

        def normalize(layer: int, moments: Moments):
            mean, var = moments.per_sample()
            s = holder[0].stats[layer]
            rm, rv = s.mean, s.var
            run_mean = np.empty(mean.shape)
            run_var = np.empty(var.shape)
            for i in range(mean.shape[0]):
                rm = _ema(rm, mean[i].astype(np.float64), rho)
                rv = _ema(rv, var[i].astype(np.float64), rho)
                run_mean[i], run_var[i] = rm, rv
            new_stats = list(holder[0].stats)
            new_stats[layer] = BnLayerStats(rm, rv, s.momentum)
            holder[0] = AdaBnState(new_stats, rho, True)
            return run_mean, run_var

        outs.append(forward(params, stats, x, normalize=normalize))
        bn = holder[0]
    logits = np.concatenate(outs) if outs else np.zeros((0, params.config.n_classes), np.float32)
    return logits, SessionAdaptation(ea, bn, len(windows))
