"""Preprocessing: channel selection, causal band-pass, decimation, windowing."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .dataio import SessionDataset, Trial


@dataclass(frozen=True)
class FilterSpec:
    low_hz: float = 8.0
    high_hz: float = 30.0
    order: int = 4

    def check(self, fs: float) -> None:
        if not 0 < self.low_hz < self.high_hz < fs / 2:
            raise ValueError(
                f"band-pass {self.low_hz}-{self.high_hz} Hz invalid for fs={fs} Hz "
                "(need 0 < low < high < fs/2)"
            )
        if self.order < 1:
            raise ValueError("filter order must be >= 1")

    def sos(self, fs: float) -> np.ndarray:
        self.check(fs)
        return signal.butter(self.order, [self.low_hz, self.high_hz], btype="bandpass", fs=fs, output="sos")


@dataclass(frozen=True)
class WindowSpec:
    win_len_samples: int = 250
    hop_samples: int = 10

    def __post_init__(self):
        if self.win_len_samples < 1:
            raise ValueError("win_len_samples must be >= 1")
        if not 1 <= self.hop_samples <= self.win_len_samples:
            raise ValueError("hop_samples must be in [1, win_len_samples]")

    def count(self, n_samples: int) -> int:
        if n_samples < self.win_len_samples:
            return 0
        return (n_samples - self.win_len_samples) // self.hop_samples + 1


def select_channels(session: SessionDataset, keep) -> SessionDataset:
    keep = [int(k) for k in keep]
    if len(set(keep)) != len(keep):
        raise ValueError(f"duplicate channel index in {keep}")
    n = session.n_channels
    if n is not None and any(not 0 <= k < n for k in keep):
        raise IndexError(f"channel index out of range for {n} channels: {keep}")
    if not keep:
        raise ValueError("keep must not be empty")
    trials = [Trial(t.data[keep], t.label) for t in session.trials]
    return replace(session, trials=trials)


def bandpass(x: np.ndarray, spec: FilterSpec, fs: float) -> np.ndarray:
    """Causal (forward-only) Butterworth band-pass along the last axis."""
    x = np.asarray(x)
    sos = spec.sos(fs)
    if x.shape[-1] <= 3 * spec.order:
        raise ValueError(f"signal too short ({x.shape[-1]} samples) for order {spec.order}")
    y = signal.sosfilt(sos, x.astype(np.float64), axis=-1)
    return y.astype(x.dtype if x.dtype.kind == "f" else np.float64)


def _antialias_sos(from_hz: float, to_hz: float) -> np.ndarray:
    # passband to 0.4 * to_hz, >= 40 dB down at the new Nyquist
    wp, ws = 0.4 * to_hz, 0.5 * to_hz
    order, wn = signal.ellipord(wp, ws, gpass=0.5, gstop=40, fs=from_hz)
    return signal.ellip(order, 0.5, 40, wn, btype="lowpass", fs=from_hz, output="sos")


def resample(x: np.ndarray, from_hz: float, to_hz: float) -> np.ndarray:
    """Integer-factor decimation with a causal elliptic anti-alias filter."""
    ratio = from_hz / to_hz
    factor = int(round(ratio))
    if to_hz <= 0 or factor < 1 or abs(ratio - factor) > 1e-9:
        raise ValueError(f"{from_hz} Hz -> {to_hz} Hz is not an integer decimation")
    x = np.asarray(x)
    if factor == 1:
        return x.copy()
    y = signal.sosfilt(_antialias_sos(from_hz, to_hz), x.astype(np.float64), axis=-1)
    n_out = x.shape[-1] // factor
    return y[..., : n_out * factor : factor].astype(x.dtype if x.dtype.kind == "f" else np.float64)


def window_stream(trial: Trial | np.ndarray, spec: WindowSpec, start: int = 0) -> np.ndarray:
    """Sliding windows ``[n_windows, C, win_len]`` starting at sample ``start``.

    Returned windows are a read-only strided view into the trial data.
    """
    data = trial.data if isinstance(trial, Trial) else np.asarray(trial)
    data = data[:, start:]
    n = spec.count(data.shape[1])
    if n == 0:
        raise ValueError(
            f"trial has {data.shape[1]} samples after offset {start}, "
            f"shorter than one {spec.win_len_samples}-sample window"
        )
    view = sliding_window_view(data, spec.win_len_samples, axis=1)  # [C, S-W+1, W]
    return view[:, : (n - 1) * spec.hop_samples + 1 : spec.hop_samples].transpose(1, 0, 2)


def preprocess_session(
    session: SessionDataset,
    *,
    keep=None,
    to_hz: float | None = None,
    filt: FilterSpec | None = FilterSpec(),
    cue_s: float = 0.0,
) -> SessionDataset:
    """Channel selection, decimation and band-pass per trial; drops the cue period.

    Filtering runs over the whole trial (cue included) so the filter transient
    falls into the cue; only the feedback phase is kept.
    """
    if keep is not None:
        session = select_channels(session, keep)
    fs = session.sample_rate
    trials = []
    for t in session.trials:
        x = t.data
        if to_hz is not None and to_hz != fs:
            x = resample(x, fs, to_hz)
        rate = to_hz or fs
        if filt is not None:
            x = bandpass(x, filt, rate)
        cue = int(round(cue_s * rate))
        trials.append(Trial(x[:, cue:].astype(np.float32), t.label))
    return replace(session, trials=trials, sample_rate=float(to_hz or fs))


def session_windows(session: SessionDataset, spec: WindowSpec):
    """Stacked windows of all trials with labels and owning trial index."""
    xs, ys, idx = [], [], []
    for i, t in enumerate(session.trials):
        if t.n_samples < spec.win_len_samples:
            continue
        w = window_stream(t, spec)
        xs.append(w)
        ys.append(np.full(len(w), t.label, dtype=np.int64))
        idx.append(np.full(len(w), i, dtype=np.int64))
    if not xs:
        c = session.n_channels or 0
        return (
            np.zeros((0, c, spec.win_len_samples), np.float32),
            np.zeros(0, np.int64),
            np.zeros(0, np.int64),
        )
    return np.ascontiguousarray(np.concatenate(xs)), np.concatenate(ys), np.concatenate(idx)
