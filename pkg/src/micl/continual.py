"""Causal session scheduler: fine-tuning strategies, per-session OTTA evaluation,
evaluation matrices and lineage audits."""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field

import numpy as np

from .analysis import EvalMatrix, causal_mask, session_accuracy
from .dataio import SessionDataset
from .dsp import WindowSpec, session_windows
from .optim import Checkpoint, TrainConfig, finetune
from .otta import DEFAULT_RHO, OttaFlags, otta_session

log = logging.getLogger(__name__)

DATA_MODES = ("exemplar_free", "joint", "last_k")
INIT_MODES = ("independent", "sequential")
_DATA_TAGS = {"exemplar_free": "ef", "joint": "joint"}
_INIT_TAGS = {"independent": "ind", "sequential": "seq"}


@dataclass(frozen=True)
class Strategy:
    data_mode: str
    init_mode: str
    k: int = 0

    def __post_init__(self):
        if self.data_mode not in DATA_MODES:
            raise ValueError(f"unknown data mode {self.data_mode!r}")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"unknown init mode {self.init_mode!r}")
        if self.data_mode == "last_k" and self.k < 2:
            raise ValueError("last_k needs k >= 2")

    @property
    def tag(self) -> str:
        data = f"last{self.k}" if self.data_mode == "last_k" else _DATA_TAGS[self.data_mode]
        return f"{data}-{_INIT_TAGS[self.init_mode]}"

    @classmethod
    def parse(cls, tag: str) -> "Strategy":
        """``ef-ind``, ``ef-seq``, ``joint-ind``, ``joint-seq`` or ``last<k>-seq``/``last<k>-ind``."""
        m = re.fullmatch(r"(ef|joint|last(\d+))-(ind|seq)", tag.strip().lower())
        if not m:
            raise ValueError(f"unrecognised strategy tag {tag!r}")
        init = "independent" if m.group(3) == "ind" else "sequential"
        if m.group(2):
            return cls("last_k", init, int(m.group(2)))
        return cls("exemplar_free" if m.group(1) == "ef" else "joint", init)


BASE_STRATEGIES = tuple(Strategy.parse(t) for t in ("ef-ind", "ef-seq", "joint-ind", "joint-seq"))


@dataclass(frozen=True)
class FinetunePlan:
    step: int
    target_eval_session: int
    init: str | int  # "source" or the step of the checkpoint to continue from
    data_sessions: tuple[int, ...]


def plan(strategy: Strategy, t: int, history) -> FinetunePlan:
    """Fine-tuning plan for step ``t`` given the recorded session indices ``history``."""
    if t < 1:
        raise ValueError("steps start at 1")
    missing = sorted(set(range(1, t + 1)) - set(history))
    if missing:
        raise ValueError(f"history lacks session(s) {missing} needed at step {t}")
    if strategy.data_mode == "exemplar_free":
        data = (t,)
    elif strategy.data_mode == "joint":
        data = tuple(range(1, t + 1))
    else:
        data = tuple(range(max(1, t - strategy.k + 1), t + 1))
    init = "source" if strategy.init_mode == "independent" or t == 1 else t - 1
    return FinetunePlan(t, t + 1, init, data)


def derive_seed(*parts) -> int:
    text = "/".join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little") >> 2


@dataclass
class SessionEval:
    session: int
    accuracy: float
    n_trials: int
    window_accuracy: float


def evaluate_session(ckpt: Checkpoint, session: SessionDataset, flags: OttaFlags,
                     rho: float = DEFAULT_RHO, spec: WindowSpec | None = None) -> SessionEval:
    """Pseudo-online replay of one session with fresh OTTA states."""
    spec = spec or WindowSpec(ckpt.config.win_len, ckpt.config.hop)
    X, y, trial_idx = session_windows(session, spec)
    if len(X) == 0:
        raise ValueError(f"session {session.session_idx} has no complete window")
    logits, _ = otta_session(ckpt, X, flags, rho)
    pred = logits.argmax(axis=1)
    acc, n = session_accuracy(pred, y, trial_idx)
    return SessionEval(session.session_idx, acc, n, float((pred == y).mean()))


@dataclass
class SubjectRun:
    subject_id: int
    paradigm: str
    strategy: Strategy
    flags: OttaFlags
    source: Checkpoint
    checkpoints: dict = field(default_factory=dict)  # step -> Checkpoint
    accuracies: dict = field(default_factory=dict)  # eval session -> SessionEval
    plans: dict = field(default_factory=dict)  # step -> FinetunePlan
    gaps: list = field(default_factory=list)  # (step, reason)

    def checkpoint(self, key) -> Checkpoint:
        return self.source if key == "source" else self.checkpoints[key]


def run_subject(sessions: list[SessionDataset], source: Checkpoint, strategy: Strategy,
                cfg: TrainConfig, flags: OttaFlags = OttaFlags(), *, rho: float = DEFAULT_RHO,
                seed: int = 0) -> SubjectRun:
    """Causal loop: fine-tune on sessions <= t, evaluate on session t+1."""
    by_idx = {s.session_idx: s for s in sessions}
    if len(by_idx) != len(sessions):
        raise ValueError("duplicate session index")
    subjects = {s.subject_id for s in sessions}
    if len(subjects) != 1:
        raise ValueError(f"sessions from several subjects: {sorted(subjects)}")
    T = max(by_idx)
    if T < 2:
        raise ValueError("need at least two sessions")
    subject = subjects.pop()
    run = SubjectRun(subject, sessions[0].paradigm, strategy, flags, source)
    for t in range(1, T):
        if t + 1 not in by_idx:
            run.gaps.append((t, f"session {t + 1} missing"))
            continue
        p = plan(strategy, t, by_idx)
        if p.init != "source" and p.init not in run.checkpoints:
            run.gaps.append((t, f"init checkpoint {p.init} unavailable"))
            continue
        init = run.checkpoint(p.init)
        try:
            ckpt = finetune(init, [by_idx[s] for s in p.data_sessions], cfg,
                            strategy=strategy.tag, ckpt_id=f"{strategy.tag}/t{t}",
                            seed=derive_seed(seed, subject, t))
        except ValueError as exc:
            run.gaps.append((t, f"fine-tuning failed: {exc}"))
            log.warning("subject %s %s step %d skipped: %s", subject, strategy.tag, t, exc)
            continue
        run.plans[t] = p
        run.checkpoints[t] = ckpt
        ev = evaluate_session(ckpt, by_idx[t + 1], flags, rho)
        audit_pair(ckpt, ev.session)
        run.accuracies[t + 1] = ev
    return run


class CausalityError(AssertionError):
    pass


def audit_pair(ckpt: Checkpoint, eval_session: int) -> None:
    if ckpt.lineage.init == "source" and ckpt.lineage.strategy == "source":
        # source model: trained on other subjects only
        if ckpt.lineage.subject_id in ckpt.lineage.source_subjects:
            raise CausalityError(f"source model {ckpt.id} saw its held-out subject")
        return
    if eval_session <= max(ckpt.lineage.data_sessions):
        raise CausalityError(f"checkpoint {ckpt.id} trained on sessions {ckpt.lineage.data_sessions} "
                             f"evaluated on session {eval_session}")


def lineage_violations(records) -> list:
    """``records``: iterable of (lineage, eval_session) pairs; returns the violating ones."""
    bad = []
    for lineage, s in records:
        if lineage.strategy == "source":
            if lineage.subject_id in lineage.source_subjects:
                bad.append((lineage, s))
        elif s <= max(lineage.data_sessions):
            bad.append((lineage, s))
    return bad


def run_eval_matrix(run: SubjectRun, sessions: list[SessionDataset], *,
                    rho: float = DEFAULT_RHO, source_evals: dict | None = None) -> EvalMatrix:
    """Evaluate every checkpoint of ``run`` on every later session.

    ``source_evals`` (session -> accuracy) lets callers share the source
    column between strategies of one subject.
    """
    by_idx = {s.session_idx: s for s in sessions}
    T = max(by_idx)
    rows = [s for s in range(2, T + 1) if s in by_idx]
    cols = ["source"] + sorted(run.checkpoints)
    data = {"source": ()}
    data.update({c: run.checkpoints[c].lineage.data_sessions for c in cols[1:]})
    mask = causal_mask(rows, cols, data)
    values = np.full(mask.shape, np.nan)
    for i, s in enumerate(rows):
        for j, c in enumerate(cols):
            if not mask[i, j]:
                continue
            if c == "source" and source_evals is not None and s in source_evals:
                values[i, j] = source_evals[s]
            elif c != "source" and c == s - 1 and s in run.accuracies:
                values[i, j] = run.accuracies[s].accuracy
            else:
                ckpt = run.checkpoint(c)
                audit_pair(ckpt, s)
                values[i, j] = evaluate_session(ckpt, by_idx[s], run.flags, rho).accuracy
    return EvalMatrix(rows, cols, values, mask)
