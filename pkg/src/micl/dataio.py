"""Session storage, manifests, source-set construction and the synthetic cohort.

Session files use a small little-endian binary layout::

    header (64 bytes)
        magic "MICL" | version u16 | subject_id u32 | session_idx u16 |
        paradigm u8 (0=LR, 1=UD) | n_channels u16 | sample_rate_hz f32 |
        trial_count u32 | zero padding
    per trial
        n_samples u32 | label u8 | data f32[n_channels * n_samples] (row-major)

Manifests are plain text, one ``subject_id,session_idx,paradigm,path`` record
per line.  Lines starting with ``#`` are comments; a ``# channels:`` comment
carries the channel names.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

MAGIC = b"MICL"
FORMAT_VERSION = 1
HEADER_SIZE = 64
PARADIGMS = ("LR", "UD")

_HEADER = struct.Struct("<4sHIHBHfI")
_TRIAL_HEADER = struct.Struct("<IB")


class SessionFormatError(ValueError):
    """Base class for malformed session files."""


class BadMagicError(SessionFormatError):
    pass


class VersionMismatchError(SessionFormatError):
    pass


class TruncatedFileError(SessionFormatError):
    def __init__(self, path, trial_index: int | None, detail: str = ""):
        where = "header" if trial_index is None else f"trial {trial_index}"
        super().__init__(f"{path}: file truncated in {where}{': ' + detail if detail else ''}")
        self.path = path
        self.trial_index = trial_index


class SessionIOError(OSError):
    pass


@dataclass
class Trial:
    data: np.ndarray  # [channels, samples] float32
    label: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"trial data must be [channels, samples], got {self.data.shape}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        self.label = int(self.label)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def duration_s(self, sample_rate: float) -> float:
        return self.n_samples / sample_rate


@dataclass(eq=False)
class SessionDataset:
    subject_id: int
    session_idx: int
    paradigm: str
    trials: list[Trial]
    sample_rate: float

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if self.session_idx < 1:
            raise ValueError("session_idx is 1-based")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        chans = {t.n_channels for t in self.trials}
        if len(chans) > 1:
            raise ValueError(f"trials disagree on channel count: {sorted(chans)}")

    @property
    def n_channels(self) -> int | None:
        return self.trials[0].n_channels if self.trials else None

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trials], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.trials)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SessionDataset):
            return NotImplemented
        if (self.subject_id, self.session_idx, self.paradigm, len(self.trials)) != (
            other.subject_id, other.session_idx, other.paradigm, len(other.trials)
        ):
            return False
        if np.float32(self.sample_rate) != np.float32(other.sample_rate):
            return False
        return all(
            a.label == b.label and a.data.shape == b.data.shape and a.data.tobytes() == b.data.tobytes()
            for a, b in zip(self.trials, other.trials)
        )


def session_file_size(n_channels: int, trial_samples) -> int:
    """Exact byte size of a session file holding trials with the given lengths."""
    return HEADER_SIZE + sum(_TRIAL_HEADER.size + 4 * n_channels * int(s) for s in trial_samples)


def save_session(dataset: SessionDataset, path) -> None:
    path = Path(path)
    n_channels = dataset.n_channels or 0
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        dataset.subject_id,
        dataset.session_idx,
        PARADIGMS.index(dataset.paradigm),
        n_channels,
        dataset.sample_rate,
        len(dataset.trials),
    )
    parts = [header.ljust(HEADER_SIZE, b"\0")]
    for trial in dataset.trials:
        parts.append(_TRIAL_HEADER.pack(trial.n_samples, trial.label))
        parts.append(np.ascontiguousarray(trial.data, dtype="<f4").tobytes())
    try:
        path.write_bytes(b"".join(parts))
    except OSError as exc:
        raise SessionIOError(f"cannot write session file {path}: {exc}") from exc


def load_session(path) -> SessionDataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise SessionIOError(f"cannot read session file {path}: {exc}") from exc

    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a session file (magic {raw[:4]!r})")
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(path, None, f"{len(raw)} < {HEADER_SIZE} header bytes")
    _, version, subject_id, session_idx, paradigm, n_channels, fs, n_trials = _HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if paradigm >= len(PARADIGMS):
        raise SessionFormatError(f"{path}: unknown paradigm code {paradigm}")

    trials = []
    offset = HEADER_SIZE
    for i in range(n_trials):
        if offset + _TRIAL_HEADER.size > len(raw):
            raise TruncatedFileError(path, i, "missing trial header")
        n_samples, label = _TRIAL_HEADER.unpack_from(raw, offset)
        offset += _TRIAL_HEADER.size
        nbytes = 4 * n_channels * n_samples
        if offset + nbytes > len(raw):
            raise TruncatedFileError(path, i, f"expected {nbytes} data bytes, {len(raw) - offset} left")
        data = np.frombuffer(raw, dtype="<f4", count=n_channels * n_samples, offset=offset)
        trials.append(Trial(data.reshape(n_channels, n_samples).astype(np.float32), label))
        offset += nbytes
    if offset != len(raw):
        raise SessionFormatError(f"{path}: {len(raw) - offset} trailing bytes after last trial")

    return SessionDataset(subject_id, session_idx, PARADIGMS[paradigm], trials, float(fs))


# --------------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: int
    session_idx: int
    paradigm: str
    path: Path


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    channel_names: list[str] = field(default_factory=list)

    def subjects(self, paradigm: str | None = None) -> list[int]:
        return sorted({e.subject_id for e in self.entries if paradigm is None or e.paradigm == paradigm})

    def paradigms(self) -> list[str]:
        return [p for p in PARADIGMS if any(e.paradigm == p for e in self.entries)]

    def session_paths(self, subject_id: int, paradigm: str) -> list[Path]:
        """Paths ordered by session index."""
        hits = sorted(
            (e for e in self.entries if e.subject_id == subject_id and e.paradigm == paradigm),
            key=lambda e: e.session_idx,
        )
        return [e.path for e in hits]

    def session_count(self, subject_id: int, paradigm: str) -> int:
        return len(self.session_paths(subject_id, paradigm))

    def validate(self) -> None:
        groups: dict[tuple[int, str], list[int]] = {}
        for e in self.entries:
            if not Path(e.path).exists():
                raise FileNotFoundError(f"manifest references missing file {e.path}")
            groups.setdefault((e.subject_id, e.paradigm), []).append(e.session_idx)
        for (subject, paradigm), idx in groups.items():
            if sorted(idx) != list(range(1, len(idx) + 1)):
                raise ValueError(
                    f"subject {subject} {paradigm}: session indices {sorted(idx)} not contiguous from 1"
                )


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    lines = []
    if manifest.channel_names:
        lines.append("# channels: " + ",".join(manifest.channel_names))
    for e in sorted(manifest.entries, key=lambda e: (e.paradigm, e.subject_id, e.session_idx)):
        p = Path(e.path)
        try:
            p = p.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(f"{e.subject_id},{e.session_idx},{e.paradigm},{p.as_posix()}")
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path, validate: bool = True) -> DatasetManifest:
    path = Path(path)
    entries, channels = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("channels:"):
                channels = [c.strip() for c in body[len("channels:"):].split(",") if c.strip()]
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
        subject, session, paradigm, rel = fields
        if paradigm not in PARADIGMS:
            raise ValueError(f"{path}:{lineno}: unknown paradigm {paradigm!r}")
        p = Path(rel)
        if not p.is_absolute():
            p = path.parent / p
        entries.append(ManifestEntry(int(subject), int(session), paradigm, p))
    manifest = DatasetManifest(entries, channels)
    if validate:
        manifest.validate()
    return manifest


def build_source_set(manifest: DatasetManifest, held_out_subject: int, paradigm: str) -> list[SessionDataset]:
    """First-session datasets of every subject except ``held_out_subject``."""
    subjects = manifest.subjects(paradigm)
    if held_out_subject not in subjects:
        raise KeyError(f"subject {held_out_subject} not in manifest for paradigm {paradigm}")
    out = []
    for e in manifest.entries:
        if e.paradigm == paradigm and e.session_idx == 1 and e.subject_id != held_out_subject:
            out.append(load_session(e.path))
    out.sort(key=lambda d: d.subject_id)
    return out


def source_set_from_cohort(cohort: dict[int, list[SessionDataset]], held_out_subject: int) -> list[SessionDataset]:
    """In-memory counterpart of :func:`build_source_set`."""
    if held_out_subject not in cohort:
        raise KeyError(f"subject {held_out_subject} not in cohort")
    out = []
    for subject in sorted(cohort):
        if subject == held_out_subject:
            continue
        out.extend(d for d in cohort[subject] if d.session_idx == 1)
    return out


# -------------------------------------------------------------------- synthetic


@dataclass
class SynthConfig:
    n_subjects: int = 8
    n_sessions: int = 5
    trials_per_session: int = 40
    n_channels: int = 8
    sample_rate: float = 250.0
    trial_len_s: float = 2.0
    cue_s: float = 0.5
    class_separation_start: float = 1.0
    class_separation_growth: float = 0.25
    session_shift_scale: float = 0.3
    noise_std: float = 10.0
    subject_variability: float = 0.6
    paradigm: str = "LR"
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_subjects", "n_sessions", "trials_per_session", "n_channels"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("sample_rate", "trial_len_s", "noise_std"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.cue_s < 0:
            raise ValueError("cue_s must be non-negative")
        if self.class_separation_start < 0:
            raise ValueError("class_separation_start must be >= 0")
        if self.class_separation_growth < 0:
            raise ValueError("class_separation_growth must be >= 0")
        if self.session_shift_scale < 0:
            raise ValueError("session_shift_scale must be >= 0")
        if not 0 <= self.subject_variability <= 1:
            raise ValueError("subject_variability must be in [0, 1]")
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}")
        if self.sample_rate / 2 <= 30:
            raise ValueError("sample_rate too low for an 8-30 Hz signal band")


def random_mixing(rng: np.random.Generator, n_channels: int, scale: float) -> np.ndarray:
    """Near-identity channel mixing ``I + scale * G / sqrt(C)``, G standard normal."""
    g = rng.standard_normal((n_channels, n_channels)) / np.sqrt(n_channels)
    return np.eye(n_channels) + scale * g


def _band_noise(rng, sos, n_sources: int, n_samples: int, warm: int) -> np.ndarray:
    """Unit-variance 8-30 Hz noise, one row per source."""
    white = rng.standard_normal((n_sources, n_samples + warm))
    band = signal.sosfilt(sos, white, axis=-1)[:, warm:]
    return band / np.sqrt(np.mean(band**2, axis=-1, keepdims=True) + 1e-12)


def synth_generate(config: SynthConfig) -> list[SessionDataset]:
    """Seeded longitudinal cohort for one paradigm.

    Each subject carries two class-specific spatial patterns (a blend of
    patterns shared by the cohort and subject-specific ones).  During the
    feedback phase the pattern of the cued class carries extra 8-30 Hz power
    whose amplitude is ``separation * noise_std``; the separation grows by
    ``class_separation_growth`` per session.  Every session multiplies the
    whole recording by a fresh near-identity mixing matrix.
    """
    config.validate()
    C = config.n_channels
    fs = config.sample_rate
    n_cue = int(round(config.cue_s * fs))
    n_fb = int(round(config.trial_len_s * fs))
    n_total = n_cue + n_fb
    sos = signal.butter(4, [8.0, 30.0], btype="bandpass", fs=fs, output="sos")
    warm = int(fs)

    root = np.random.SeedSequence(config.seed)
    cohort_rng = np.random.default_rng(root.spawn(1)[0])
    shared = cohort_rng.standard_normal((2, C))

    subject_seeds = np.random.SeedSequence([config.seed, 1]).spawn(config.n_subjects)
    out = []
    for s_i, s_seed in enumerate(subject_seeds):
        subject_id = s_i + 1
        rng = np.random.default_rng(s_seed)
        own = rng.standard_normal((2, C))
        v = config.subject_variability
        patterns = (1 - v) * shared + v * own
        patterns /= np.linalg.norm(patterns, axis=1, keepdims=True)
        noise_mix = rng.standard_normal((C, C)) / np.sqrt(C)
        noise_mix /= np.sqrt(np.sum(noise_mix**2, axis=1, keepdims=True))

        for session_idx in range(1, config.n_sessions + 1):
            mixing = random_mixing(rng, C, config.session_shift_scale)
            sep = config.class_separation_start + config.class_separation_growth * (session_idx - 1)
            n = config.trials_per_session
            labels = np.array([i % 2 for i in range(n)])
            rng.shuffle(labels)
            trials = []
            for label in labels:
                sources = _band_noise(rng, sos, 2, n_total, warm)
                gain = np.zeros((2, n_total))
                gain[label, n_cue:] = sep
                class_part = patterns.T @ (gain * sources)
                background = noise_mix @ _band_noise(rng, sos, C, n_total, warm)
                white = 0.3 * rng.standard_normal((C, n_total))
                x = config.noise_std * (class_part + background + white)
                trials.append(Trial((mixing @ x).astype(np.float32), int(label)))
            out.append(SessionDataset(subject_id, session_idx, config.paradigm, trials, fs))
    return out


def group_by_subject(sessions: list[SessionDataset]) -> dict[int, list[SessionDataset]]:
    cohort: dict[int, list[SessionDataset]] = {}
    for d in sessions:
        cohort.setdefault(d.subject_id, []).append(d)
    for subject in cohort:
        cohort[subject].sort(key=lambda d: d.session_idx)
    return cohort
