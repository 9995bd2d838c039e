"""Cohort-level experiment execution and the aggregate tables derived from it.

Every aggregate (summary, curves, matrices, upper bounds, distances) is
computed here from the per-cell result rows, so the report layer only renders.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .analysis import (
    EvalMatrix,
    cohort_distance_matrix,
    distance_matrix,
    paired_ttest,
    summarize,
    task_vector,
    upper_bound,
)
from .config import ExperimentConfig, model_for
from .continual import derive_seed, evaluate_session, lineage_violations, run_eval_matrix, run_subject
from .dataio import SessionDataset, group_by_subject, load_session, read_manifest, source_set_from_cohort, synth_generate
from .dsp import preprocess_session
from .optim import pretrain, save_checkpoint
from .otta import OttaFlags

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["subject", "paradigm", "strategy", "eval_session", "checkpoint_step", "accuracy", "n_trials", "flags"]
SUMMARY_COLUMNS = ["paradigm", "strategy", "flags", "n_subjects", "mean", "std", "p_vs_source",
                   "upper_bound_mean", "upper_bound_std"]
CURVE_COLUMNS = ["paradigm", "strategy", "flags", "eval_session", "mean", "std", "n_subjects"]
MATRIX_COLUMNS = ["paradigm", "strategy", "flags", "eval_session", "checkpoint", "accuracy", "n_subjects"]
DISTANCE_COLUMNS = ["paradigm", "strategy", "flags", "step_i", "step_j", "distance", "n_subjects"]
SOURCE = "source"


class RunFailure(RuntimeError):
    pass


def load_cohort(cfg: ExperimentConfig) -> dict[int, list[SessionDataset]]:
    """Sessions grouped by subject, preprocessed and sorted by session index."""
    if cfg.manifest:
        manifest = read_manifest(cfg.manifest)
        raw = [load_session(e.path) for e in manifest.entries]
    else:
        raw = synth_generate(cfg.synth)
    pre = cfg.preprocess
    sessions = [preprocess_session(s, keep=pre.channels, to_hz=pre.resample_hz, filt=pre.filter, cue_s=pre.cue_s)
                for s in raw]
    paradigms = {s.paradigm for s in sessions}
    if len(paradigms) > 1:
        raise ValueError(f"one paradigm per run; found {sorted(paradigms)}")
    return {k: sorted(v, key=lambda d: d.session_idx) for k, v in group_by_subject(sessions).items()}


@dataclass
class SubjectOutcome:
    subject: int
    rows: list = field(default_factory=list)
    matrices: dict = field(default_factory=dict)  # strategy tag -> EvalMatrix
    distances: dict = field(default_factory=dict)  # strategy tag -> (steps, matrix)
    lineage: list = field(default_factory=list)  # (Lineage, eval_session)
    gaps: list = field(default_factory=list)


def _row(subject, paradigm, strategy, session, step, acc, n, flags):
    return {"subject": subject, "paradigm": paradigm, "strategy": strategy, "eval_session": session,
            "checkpoint_step": step, "accuracy": f"{acc:.6f}", "n_trials": n, "flags": flags}


def _source_model(cfg: ExperimentConfig, cohort, subject, ea: bool):
    sessions = cohort[subject]
    model = model_for(cfg, sessions[0].n_channels)
    train = replace(cfg.train, ea=ea, seed=derive_seed(cfg.seed, subject, "source") % (2**31))
    source = source_set_from_cohort(cohort, subject)
    return pretrain(source, train, model, held_out_subject=subject,
                    ckpt_id=SOURCE if ea else f"{SOURCE}-noea")


def _subject_job(args) -> SubjectOutcome:
    cfg, cohort, subject, out_dir, flag_sets, source_only = args
    sessions = cohort[subject]
    paradigm = sessions[0].paradigm
    out = SubjectOutcome(subject)
    sub_dir = Path(out_dir) / f"sub-{subject:03d}" if out_dir else None
    sources = {}
    for flags in flag_sets:
        if flags.ea not in sources:
            ckpt = _source_model(cfg, cohort, subject, flags.ea)
            sources[flags.ea] = ckpt
            if sub_dir:
                (sub_dir / SOURCE).mkdir(parents=True, exist_ok=True)
                save_checkpoint(ckpt, sub_dir / SOURCE / f"{ckpt.id}.ckpt")
        src = sources[flags.ea]
        source_acc = {}
        for s in sessions[1:]:
            ev = evaluate_session(src, s, flags, cfg.rho)
            source_acc[s.session_idx] = ev.accuracy
            out.rows.append(_row(subject, paradigm, SOURCE, s.session_idx, 0, ev.accuracy, ev.n_trials, flags.tag))
            out.lineage.append((src.lineage, s.session_idx))
        if source_only:
            continue
        train = replace(cfg.train, ea=flags.ea)
        for strategy in cfg.all_strategies:
            run = run_subject(sessions, src, strategy, train, flags, rho=cfg.rho, seed=cfg.seed)
            out.gaps.extend((strategy.tag, *g) for g in run.gaps)
            for s, ev in run.accuracies.items():
                out.rows.append(_row(subject, paradigm, strategy.tag, s, s - 1, ev.accuracy, ev.n_trials, flags.tag))
                out.lineage.append((run.checkpoints[s - 1].lineage, s))
            key = (strategy.tag, flags.tag)
            if cfg.eval_matrix and run.checkpoints:
                m = run_eval_matrix(run, sessions, rho=cfg.rho, source_evals=source_acc)
                out.matrices[key] = m
                for i, s in enumerate(m.sessions):
                    for j, c in enumerate(m.columns):
                        if c == SOURCE or not m.mask[i, j] or c == s - 1:
                            continue
                        n = next(r["n_trials"] for r in out.rows if r["eval_session"] == s)
                        out.rows.append(_row(subject, paradigm, strategy.tag, s, c, m.values[i, j], n, flags.tag))
                        out.lineage.append((run.checkpoints[c].lineage, s))
            steps = sorted(run.checkpoints)
            if len(steps) >= 2:
                taus = [task_vector(run.checkpoints[t].params.flat, src.params.flat, t) for t in steps]
                try:
                    out.distances[key] = (steps, distance_matrix(taus))
                except ValueError as exc:
                    out.gaps.append((strategy.tag, 0, f"distance matrix skipped: {exc}"))
            if sub_dir:
                d = sub_dir / f"{strategy.tag}_{flags.tag}"
                d.mkdir(parents=True, exist_ok=True)
                for t, ck in run.checkpoints.items():
                    save_checkpoint(ck, d / f"t{t}.ckpt")
    return out


@dataclass
class RunResult:
    out_dir: Path | None
    rows: list
    outcomes: list
    failures: list
    violations: list

    def accuracy_table(self):
        return aggregate(self.rows, self.outcomes)


def run_experiment(cfg: ExperimentConfig, out_dir=None, *, flag_sets=None, source_only: bool = False,
                   cohort=None) -> RunResult:
    """Pre-train a source model per held-out subject, then run every strategy.

    Writes the per-cell results CSV and the aggregate CSVs into ``out_dir``
    when given.
    """
    cohort = cohort if cohort is not None else load_cohort(cfg)
    if len(cohort) < 2:
        raise ValueError("leave-one-subject-out needs at least two subjects")
    flag_sets = tuple(flag_sets or (cfg.otta,))
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, cohort, s, str(out_path) if out_path else None, flag_sets, source_only) for s in sorted(cohort)]
    outcomes, failures = [], []
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [(j[2], pool.submit(_subject_job, j)) for j in jobs]
            for subject, fut in futures:
                try:
                    outcomes.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - recorded, tolerance checked below
                    failures.append((subject, repr(exc)))
    else:
        for j in jobs:
            try:
                outcomes.append(_subject_job(j))
            except Exception as exc:  # noqa: BLE001
                log.exception("subject %s failed", j[2])
                failures.append((j[2], repr(exc)))
    if len(failures) > cfg.max_failed_subjects:
        raise RunFailure(f"{len(failures)} subject(s) failed: {failures}")
    rows = sorted((r for o in outcomes for r in o.rows), key=_row_key)
    violations = lineage_violations(rec for o in outcomes for rec in o.lineage)
    if violations:
        raise RunFailure(f"causality violated: {violations[:3]}")
    result = RunResult(out_path, rows, outcomes, failures, violations)
    if out_path:
        write_csv(out_path / "results.csv", RESULT_COLUMNS, rows)
        write_aggregates(out_path, rows, outcomes)
        _write_gaps(out_path / "gaps.csv", outcomes, failures)
    return result


def _row_key(r):
    return (r["paradigm"], r["flags"], r["strategy"], int(r["subject"]), int(r["eval_session"]),
            int(r["checkpoint_step"]))


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in columns})


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _write_gaps(path: Path, outcomes, failures) -> None:
    rows = [{"subject": o.subject, "strategy": g[0], "step": g[1], "reason": g[2]} for o in outcomes for g in o.gaps]
    rows += [{"subject": s, "strategy": "*", "step": "*", "reason": msg} for s, msg in failures]
    write_csv(path, ["subject", "strategy", "step", "reason"], rows)


# --------------------------------------------------------------- aggregates


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def _matrices_from_rows(rows):
    """Per (paradigm, strategy, flags, subject) EvalMatrix rebuilt from result rows."""
    cells = {}
    source = {}
    for r in rows:
        key = (r["paradigm"], r["flags"], int(r["subject"]))
        acc = float(r["accuracy"])
        if r["strategy"] == SOURCE:
            source.setdefault(key, {})[int(r["eval_session"])] = acc
        else:
            cells.setdefault((r["paradigm"], r["strategy"], r["flags"], int(r["subject"])), {})[
                (int(r["eval_session"]), int(r["checkpoint_step"]))] = acc
    out = {}
    for (par, strat, flags, subj), c in cells.items():
        src = source.get((par, flags, subj), {})
        sessions = sorted({s for s, _ in c} | set(src))
        steps = sorted({k for _, k in c})
        cols = [SOURCE] + steps
        values = np.full((len(sessions), len(cols)), np.nan)
        mask = np.zeros(values.shape, dtype=bool)
        for i, s in enumerate(sessions):
            if s in src:
                values[i, 0], mask[i, 0] = src[s], True
            for j, k in enumerate(steps, start=1):
                if (s, k) in c:
                    values[i, j], mask[i, j] = c[(s, k)], True
        out[(par, strat, flags, subj)] = EvalMatrix(sessions, cols, values, mask)
    return out


def aggregate(rows, outcomes=None) -> dict:
    """All derived tables as lists of row dicts, keyed by table name."""
    recent = {}  # (paradigm, strategy, flags) -> subject -> {session: acc}
    for r in rows:
        step, s = int(r["checkpoint_step"]), int(r["eval_session"])
        if r["strategy"] == SOURCE or step == s - 1:
            recent.setdefault((r["paradigm"], r["strategy"], r["flags"]), {}).setdefault(
                int(r["subject"]), {})[s] = float(r["accuracy"])
    matrices = _matrices_from_rows(rows)
    bounds = {}
    for (par, strat, flags, subj), m in matrices.items():
        rows_ok = [i for i in range(len(m.sessions)) if m.mask[i].any()]
        if rows_ok:
            bounds.setdefault((par, strat, flags), {})[subj] = list(upper_bound(m).values())

    summary, curves = [], []
    for key in sorted(recent, key=lambda k: (k[0], k[2], k[1] != SOURCE, k[1])):
        par, strat, flags = key
        per_subject = recent[key]
        summ = summarize({s: list(v.values()) for s, v in per_subject.items()})
        p = None
        src = recent.get((par, SOURCE, flags))
        if strat != SOURCE and src:
            common = sorted(set(per_subject) & set(src))
            if len(common) >= 2:
                p = paired_ttest([summ.subject_means[s] for s in common],
                                 [np.mean(list(src[s].values())) for s in common]).p
        ub = bounds.get(key)
        ub_summ = summarize(ub) if ub and strat != SOURCE else None
        summary.append({"paradigm": par, "strategy": strat, "flags": flags, "n_subjects": summ.n_subjects,
                        "mean": _fmt(summ.mean), "std": _fmt(summ.std), "p_vs_source": _fmt(p),
                        "upper_bound_mean": _fmt(ub_summ.mean if ub_summ else None),
                        "upper_bound_std": _fmt(ub_summ.std if ub_summ else None)})
        sessions = sorted({s for v in per_subject.values() for s in v})
        for s in sessions:
            vals = np.array([v[s] for v in per_subject.values() if s in v])
            curves.append({"paradigm": par, "strategy": strat, "flags": flags, "eval_session": s,
                           "mean": _fmt(vals.mean()), "std": _fmt(vals.std(ddof=1) if vals.size > 1 else 0.0),
                           "n_subjects": vals.size})

    matrix_rows = []
    grouped = {}
    for (par, strat, flags, subj), m in matrices.items():
        grouped.setdefault((par, strat, flags), []).append(m)
    for (par, strat, flags) in sorted(grouped):
        ms = grouped[(par, strat, flags)]
        sessions = sorted({s for m in ms for s in m.sessions})
        cols = [SOURCE] + sorted({c for m in ms for c in m.columns if c != SOURCE})
        for s in sessions:
            for c in cols:
                vals = [m.get(s, c) for m in ms if s in m.sessions and c in m.columns]
                vals = [v for v in vals if v is not None]
                matrix_rows.append({"paradigm": par, "strategy": strat, "flags": flags, "eval_session": s,
                                    "checkpoint": c, "accuracy": _fmt(np.mean(vals)) if vals else "X",
                                    "n_subjects": len(vals)})

    distance_rows = []
    if outcomes:
        paradigm = rows[0]["paradigm"] if rows else ""
        dist = {}
        for o in outcomes:
            for (strat, flags), (steps, d) in o.distances.items():
                dist.setdefault((strat, flags, tuple(steps)), []).append(d)
        for (strat, flags, steps) in sorted(dist):
            mean = cohort_distance_matrix(dist[(strat, flags, steps)])
            n = len(dist[(strat, flags, steps)])
            for i, a in enumerate(steps):
                for j, b in enumerate(steps):
                    distance_rows.append({"paradigm": paradigm, "strategy": strat, "flags": flags, "step_i": a,
                                          "step_j": b, "distance": _fmt(mean[i, j]), "n_subjects": n})
    return {"summary": summary, "curves": curves, "matrix": matrix_rows, "distances": distance_rows}


def write_aggregates(out_dir: Path, rows, outcomes=None) -> dict:
    tables = aggregate(rows, outcomes)
    write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, tables["summary"])
    write_csv(out_dir / "session_curves.csv", CURVE_COLUMNS, tables["curves"])
    write_csv(out_dir / "eval_matrix.csv", MATRIX_COLUMNS, tables["matrix"])
    write_csv(out_dir / "distances.csv", DISTANCE_COLUMNS, tables["distances"])
    return tables


ABLATION_FLAGS = (OttaFlags(True, True), OttaFlags(True, False), OttaFlags(False, True), OttaFlags(False, False))
