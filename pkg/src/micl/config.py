"""Experiment configuration read from a sectioned key=value file.

Sections: ``[experiment]``, ``[data]``, ``[synth]``, ``[preprocess]``,
``[model]``, ``[train]``.  Unknown keys are rejected so typos surface early.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .continual import BASE_STRATEGIES, Strategy
from .dataio import SynthConfig
from .dsp import FilterSpec
from .net import ModelConfig
from .optim import TrainConfig
from .otta import DEFAULT_RHO, OttaFlags


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    low_hz: float = 8.0
    high_hz: float = 30.0
    order: int = 4
    resample_hz: float | None = None
    channels: tuple[int, ...] | None = None
    cue_s: float = 0.5

    @property
    def filter(self) -> FilterSpec:
        return FilterSpec(self.low_hz, self.high_hz, self.order)


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    manifest: str | None = None  # when set, sessions are read from disk instead of synthesized
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig | None = None  # channel count filled in from the data when None
    train: TrainConfig = field(default_factory=TrainConfig)
    strategies: tuple[Strategy, ...] = BASE_STRATEGIES
    buffers: tuple[int, ...] = ()
    otta: OttaFlags = OttaFlags()
    rho: float = DEFAULT_RHO
    seed: int = 0
    out: str = "runs/default"
    jobs: int = 1
    eval_matrix: bool = True
    max_failed_subjects: int = 0

    def __post_init__(self):
        if not self.strategies and not self.buffers:
            raise ConfigError("at least one strategy is required")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        if any(k < 2 for k in self.buffers):
            raise ConfigError("buffer sizes must be >= 2")

    @property
    def all_strategies(self) -> tuple[Strategy, ...]:
        extra = tuple(Strategy("last_k", "sequential", k) for k in self.buffers)
        seen, out = set(), []
        for s in self.strategies + extra:
            if s.tag not in seen:
                seen.add(s.tag)
                out.append(s)
        return tuple(out)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Root seed fans out to data, initialisation and fine-tuning."""
        return replace(self, seed=seed, synth=replace(self.synth, seed=seed),
                       train=replace(self.train, seed=seed))


def _coerce(raw: str, default, name: str):
    text = raw.strip()
    kind = type(default)
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            if default is None and text.lower() in ("", "none"):
                return None
            return float(text)
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc


def _section(parser, name: str, cls, base=None, skip=()):
    base = base if base is not None else cls()
    if not parser.has_section(name):
        return base
    known = {f.name for f in fields(cls)} - set(skip)
    updates = {}
    for key, raw in parser.items(name):
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        updates[key] = _coerce(raw, getattr(base, key), f"[{name}] {key}")
    try:
        return replace(base, **updates)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def _int_list(text: str, name: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.replace(" ", "").split(",") if x)
    except ValueError as exc:
        raise ConfigError(f"{name}: expected a comma-separated integer list, got {text!r}") from exc


def parse_strategies(text: str) -> tuple[Strategy, ...]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if items == ["all"]:
        return BASE_STRATEGIES
    try:
        return tuple(Strategy.parse(t) for t in items)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    allowed = {"experiment", "data", "synth", "preprocess", "model", "train"}
    unknown = set(parser.sections()) - allowed
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")

    try:
        synth = _section(parser, "synth", SynthConfig)
        synth.validate()
    except ValueError as exc:
        raise ConfigError(f"[synth] {exc}") from exc
    pre_base = PreprocessConfig(cue_s=synth.cue_s)
    pre = _section(parser, "preprocess", PreprocessConfig, pre_base, skip=("channels",))
    if parser.has_option("preprocess", "channels"):
        pre = replace(pre, channels=_int_list(parser.get("preprocess", "channels"), "channels") or None)
    try:
        pre.filter.check((pre.resample_hz or synth.sample_rate))
    except ValueError as exc:
        raise ConfigError(f"[preprocess] {exc}") from exc

    model = None
    if parser.has_section("model"):
        n_chan = len(pre.channels) if pre.channels else synth.n_channels
        model = _section(parser, "model", ModelConfig, _ModelDefaults(n_chan))
    train = _section(parser, "train", TrainConfig)

    manifest = None
    if parser.has_option("data", "manifest"):
        manifest = parser.get("data", "manifest").strip() or None
        if manifest and base_dir is not None and not Path(manifest).is_absolute():
            manifest = str(base_dir / manifest)

    exp = dict(parser.items("experiment")) if parser.has_section("experiment") else {}
    known = {"strategies", "buffer", "otta", "rho", "seed", "out", "jobs", "eval_matrix", "max_failed_subjects"}
    bad = set(exp) - known
    if bad:
        raise ConfigError(f"[experiment] unknown key(s): {sorted(bad)}")
    kwargs = {}
    if "strategies" in exp:
        kwargs["strategies"] = parse_strategies(exp["strategies"])
    if "buffer" in exp:
        kwargs["buffers"] = _int_list(exp["buffer"], "buffer")
    if "otta" in exp:
        try:
            kwargs["otta"] = OttaFlags.parse(exp["otta"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    for key, default in (("rho", DEFAULT_RHO), ("seed", 0), ("jobs", 1), ("eval_matrix", True),
                         ("max_failed_subjects", 0)):
        if key in exp:
            kwargs[key] = _coerce(exp[key], default, f"[experiment] {key}")
    if "out" in exp:
        kwargs["out"] = exp["out"].strip()
    cfg = ExperimentConfig(synth=synth, manifest=manifest, preprocess=pre, model=model, train=train, **kwargs)
    return cfg.with_seed(cfg.seed) if "seed" in kwargs else cfg


def _ModelDefaults(n_channels: int) -> ModelConfig:
    return ModelConfig(n_channels=n_channels)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, p.parent)


def model_for(cfg: ExperimentConfig, n_channels: int) -> ModelConfig:
    if cfg.model is None:
        return ModelConfig(n_channels=n_channels)
    if cfg.model.n_channels != n_channels:
        return replace(cfg.model, n_channels=n_channels)
    return cfg.model
