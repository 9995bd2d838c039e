"""Metrics and weight-space geometry: trial accuracy, cohort summaries, task
vectors, cosine distances, evaluation matrices and paired t-tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def trial_accuracy(window_predictions, label: int) -> bool:
    """A trial succeeds iff strictly more than half of its windows are correct."""
    preds = np.asarray(window_predictions)
    if preds.size == 0:
        raise ValueError("trial has no window predictions")
    correct = int(np.count_nonzero(preds == label))
    return 2 * correct > preds.size


def session_accuracy(predictions: np.ndarray, labels: np.ndarray, trial_idx: np.ndarray) -> tuple[float, int]:
    """Trial-wise accuracy in percent over the trials of one session, and the trial count."""
    trials = np.unique(trial_idx)
    if trials.size == 0:
        raise ValueError("no trials to score")
    hits = 0
    for t in trials:
        sel = trial_idx == t
        hits += trial_accuracy(predictions[sel], int(labels[sel][0]))
    return 100.0 * hits / trials.size, int(trials.size)


@dataclass(frozen=True)
class AccuracySummary:
    subject_means: dict
    mean: float
    std: float

    @property
    def n_subjects(self) -> int:
        return len(self.subject_means)


def summarize(per_subject) -> AccuracySummary:
    """Average sessions within each subject, then mean and sample std across subjects.

    ``per_subject`` maps subject id to a sequence of per-session accuracies.
    The spread of a single subject is defined as 0.
    """
    if not per_subject:
        raise ValueError("nothing to summarize")
    means = {}
    for subject, values in per_subject.items():
        v = np.asarray(list(values), dtype=np.float64)
        if v.size == 0:
            raise ValueError(f"subject {subject} has no session values")
        means[subject] = float(v.mean())
    m = np.array([means[k] for k in sorted(means)])
    std = float(m.std(ddof=1)) if m.size > 1 else 0.0
    return AccuracySummary(means, float(m.mean()), std)


@dataclass(frozen=True)
class TaskVector:
    tau: np.ndarray
    step: int
    subject: int = 0
    strategy: str = ""


def task_vector(theta_t, theta_src, step: int = 0, subject: int = 0, strategy: str = "") -> TaskVector:
    a = np.asarray(theta_t, dtype=np.float64)
    b = np.asarray(theta_src, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"parameter vectors differ in length: {a.shape} vs {b.shape}")
    return TaskVector(a - b, step, subject, strategy)


def cosine_distance(tau_i, tau_j) -> float:
    """``1 - cos(angle)``; ranges over [0, 2] and is deliberately not clamped."""
    a = np.asarray(getattr(tau_i, "tau", tau_i), dtype=np.float64).ravel()
    b = np.asarray(getattr(tau_j, "tau", tau_j), dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("task vectors differ in length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance is undefined for a zero vector")
    if np.array_equal(a, b):
        return 0.0
    return float(1.0 - np.dot(a / na, b / nb))


def distance_matrix(vectors) -> np.ndarray:
    n = len(vectors)
    if n < 2:
        raise ValueError("need at least two task vectors")
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = cosine_distance(vectors[i], vectors[j])
    return d


def cohort_distance_matrix(matrices) -> np.ndarray:
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in matrices])
    return stack.mean(axis=0)


def first_vs_late_distances(d: np.ndarray) -> tuple[float, float]:
    """Mean distance of the first vector to all later ones, and mean consecutive
    distance among the later vectors (steps 2 onward)."""
    n = d.shape[0]
    if n < 3:
        raise ValueError("need at least three task vectors")
    first = float(d[0, 1:].mean())
    consecutive = float(np.mean([d[i, i + 1] for i in range(1, n - 1)]))
    return first, consecutive


@dataclass
class EvalMatrix:
    """Accuracies [eval session x checkpoint]; masked cells hold NaN.

    Rows are evaluation sessions 2..T, columns are ``source`` then
    checkpoints 1..T-1.
    """

    sessions: list
    columns: list
    values: np.ndarray
    mask: np.ndarray  # True where the cell is causal (may carry a value)

    def get(self, session: int, column) -> float | None:
        i, j = self.sessions.index(session), self.columns.index(column)
        return None if not self.mask[i, j] else float(self.values[i, j])

    def diagonal(self) -> dict:
        """Accuracy of the most recent checkpoint on each session."""
        return {s: self.get(s, s - 1) for s in self.sessions if (s - 1) in self.columns}


def causal_mask(sessions, columns, data_sessions) -> np.ndarray:
    """``data_sessions`` maps column -> sessions its checkpoint was trained on."""
    m = np.zeros((len(sessions), len(columns)), dtype=bool)
    for j, c in enumerate(columns):
        last = max(data_sessions[c], default=0)
        for i, s in enumerate(sessions):
            m[i, j] = last < s
    return m


def upper_bound(matrix: EvalMatrix) -> dict:
    """Best populated cell per evaluation session."""
    out = {}
    for i, s in enumerate(matrix.sessions):
        row = matrix.values[i][matrix.mask[i]]
        row = row[~np.isnan(row)]
        if row.size == 0:
            raise ValueError(f"session {s} has no populated cell")
        out[s] = float(row.max())
    return out


# --------------------------------------------------------------- statistics


def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 500) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) of Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


def t_cdf(t: float, df: float) -> float:
    return 1.0 - t_sf(t, df)


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float


def paired_ttest(a, b) -> TTestResult:
    """Two-sided paired t-test on per-subject values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1-D and equal length, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, n - 1, 1.0)
        return TTestResult(math.copysign(math.inf, mean), n - 1, 0.0)
    t = mean / (sd / math.sqrt(n))
    p = min(1.0, 2.0 * t_sf(abs(t), n - 1))
    return TTestResult(t, n - 1, p)
