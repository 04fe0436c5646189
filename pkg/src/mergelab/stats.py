"""Merge deltas, coefficient of variation, bootstrap CIs, and correlations."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from os import PathLike

import numpy as np
from scipy import stats as _sps

from .errors import ArgumentError, DegenerateError, SchemaError

__all__ = [
    "DeltaRecord",
    "BootstrapCI",
    "CorrelationReport",
    "ScoreTable",
    "merge_delta",
    "cv_percent",
    "bootstrap_ci",
    "average_ranks",
    "pearson",
    "spearman",
    "permutation_p",
    "correlate_measures",
    "read_score_table",
    "correlation_rows_to_csv",
]

Z95 = 1.96
DEFAULT_RESAMPLES = 1000
DEFAULT_PERMUTATIONS = 10_000


@dataclass(frozen=True)
class DeltaRecord:
    pair: tuple[str, str]
    expert_scores: tuple[float, float]
    merged_scores: tuple[float, float]
    delta: float


@dataclass(frozen=True)
class BootstrapCI:
    mean: float
    se: float
    ci_low: float
    ci_high: float
    n_resamples: int
    seed: int


@dataclass(frozen=True)
class CorrelationReport:
    n: int
    spearman_rho: float
    spearman_p: float
    pearson_r: float
    pearson_p: float


def merge_delta(
    expert_scores: Sequence[float],
    merged_scores: Sequence[float],
    pair: tuple[str, str] = ("A", "B"),
) -> DeltaRecord:
    """Mean accuracy drop from experts to the merged model over both tasks.

    Positive means merging hurt. Scores are fractions in [0, 1].
    """
    e = tuple(float(s) for s in expert_scores)
    m = tuple(float(s) for s in merged_scores)
    if len(e) != 2 or len(m) != 2:
        raise ArgumentError("merge_delta expects exactly two expert and two merged scores")
    for s in e + m:
        if not (0.0 <= s <= 1.0):
            raise ArgumentError(f"score {s} outside [0, 1]")
    delta = ((e[0] - m[0]) + (e[1] - m[1])) / 2.0
    return DeltaRecord(tuple(pair), e, m, delta)  # type: ignore[arg-type]


def cv_percent(values: Sequence[float]) -> float:
    """100 * sample std (n-1) / mean."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ArgumentError("cv_percent needs at least two values")
    mean = float(v.mean())
    if mean == 0.0:
        raise DegenerateError("coefficient of variation is undefined for zero mean")
    if np.all(v == v[0]):
        return 0.0
    return 100.0 * float(v.std(ddof=1)) / mean


def bootstrap_ci(items: Sequence[float], n_resamples: int = DEFAULT_RESAMPLES, seed: int = 0, chunk: int = 256) -> BootstrapCI:
    """Bootstrap SE of the mean and a 1.96 * SE interval.

    Resample indices are drawn from one seeded generator in fixed-size chunks,
    so the result depends only on (items, n_resamples, seed).
    """
    x = np.asarray(items, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ArgumentError("bootstrap_ci needs a non-empty 1-D sequence")
    if n_resamples < 1:
        raise ArgumentError("n_resamples must be >= 1")
    mean = float(x.mean())
    rng = np.random.default_rng(seed)
    n = x.size
    means = np.empty(n_resamples)
    for start in range(0, n_resamples, chunk):
        stop = min(start + chunk, n_resamples)
        idx = rng.integers(0, n, size=(stop - start, n))
        means[start:stop] = x[idx].mean(axis=1)
    se = float(means.std(ddof=1)) if n_resamples > 1 else 0.0
    return BootstrapCI(mean, se, mean - Z95 * se, mean + Z95 * se, int(n_resamples), int(seed))


def _paired(x: Sequence[float], y: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ArgumentError(f"need two 1-D sequences of equal length, got {a.shape} and {b.shape}")
    if a.size < 3:
        raise ArgumentError("correlation needs at least 3 pairs")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ArgumentError("correlation inputs must be finite")
    return a, b


def _t_pvalue(r: float, n: int) -> float:
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return float(min(1.0, 2.0 * _sps.t.sf(abs(t), n - 2)))


def _pearson_r(a: np.ndarray, b: np.ndarray) -> float:
    ac, bc = a - a.mean(), b - b.mean()
    saa, sbb = float(ac @ ac), float(bc @ bc)
    if saa == 0.0 or sbb == 0.0:
        raise DegenerateError("correlation undefined for a constant input")
    r = float(ac @ bc) / math.sqrt(saa * sbb)
    return min(1.0, max(-1.0, r))


def pearson(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Sample Pearson r with a two-sided Student-t p-value (n - 2 dof)."""
    a, b = _paired(x, y)
    r = _pearson_r(a, b)
    return r, _t_pvalue(r, a.size)


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    return _sps.rankdata(np.asarray(x, dtype=np.float64), method="average")


def spearman(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Spearman rho as Pearson r of average ranks; p from the same t approximation."""
    a, b = _paired(x, y)
    rho = _pearson_r(average_ranks(a), average_ranks(b))
    return rho, _t_pvalue(rho, a.size)


def permutation_p(
    x: Sequence[float],
    y: Sequence[float],
    method: str = "pearson",
    n_permutations: int = DEFAULT_PERMUTATIONS,
    seed: int = 0,
) -> float:
    """Two-sided permutation p-value, (hits + 1) / (n_permutations + 1)."""
    a, b = _paired(x, y)
    if method == "spearman":
        a, b = average_ranks(a), average_ranks(b)
    elif method != "pearson":
        raise ArgumentError(f"unknown method {method!r}")
    observed = abs(_pearson_r(a, b))
    rng = np.random.default_rng(seed)
    ac = a - a.mean()
    bc = b - b.mean()
    denom = math.sqrt(float(ac @ ac) * float(bc @ bc))
    hits = 0
    for start in range(0, n_permutations, 1000):
        m = min(1000, n_permutations - start)
        perms = rng.permuted(np.tile(bc, (m, 1)), axis=1)
        r = np.abs(perms @ ac) / denom
        hits += int(np.sum(r >= observed - 1e-12))
    return (hits + 1) / (n_permutations + 1)


def correlate_measures(
    records: Iterable[tuple[float, float]],
    permutation: bool = False,
    n_permutations: int = DEFAULT_PERMUTATIONS,
    seed: int = 0,
) -> CorrelationReport:
    """Spearman and Pearson between a similarity measure and a target (e.g. -delta)."""
    pairs = list(records)
    if len(pairs) < 3:
        raise ArgumentError("correlate_measures needs at least 3 records")
    m = [p[0] for p in pairs]
    d = [p[1] for p in pairs]
    rho, p_s = spearman(m, d)
    r, p_p = pearson(m, d)
    if permutation:
        p_s = permutation_p(m, d, "spearman", n_permutations, seed)
        p_p = permutation_p(m, d, "pearson", n_permutations, seed)
    return CorrelationReport(len(pairs), rho, p_s, r, p_p)


# -- score tables ---------------------------------------------------------------

@dataclass
class ScoreTable:
    """Per-item scores keyed by (model_id, task_id), in item order."""

    scores: dict[tuple[str, str], list[float]]

    def accuracy(self, model_id: str, task_id: str) -> float:
        return float(np.mean(self.items(model_id, task_id)))

    def items(self, model_id: str, task_id: str) -> list[float]:
        try:
            return self.scores[(model_id, task_id)]
        except KeyError:
            raise SchemaError(f"no scores for model {model_id!r} on task {task_id!r}") from None


SCORE_COLUMNS = ("model_id", "task_id", "item_id", "score")


def read_score_table(path_or_text: str | PathLike, is_text: bool = False) -> ScoreTable:
    text = path_or_text if is_text else open(path_or_text, newline="").read()
    reader = csv.DictReader(io.StringIO(str(text)))
    if reader.fieldnames is None or tuple(reader.fieldnames) != SCORE_COLUMNS:
        raise SchemaError(f"score table columns must be {', '.join(SCORE_COLUMNS)}; got {reader.fieldnames}")
    scores: dict[tuple[str, str], list[float]] = defaultdict(list)
    seen: set[tuple[str, str, str]] = set()
    for lineno, row in enumerate(reader, start=2):
        key = (row["model_id"], row["task_id"], row["item_id"])
        if key in seen:
            raise SchemaError(f"line {lineno}: duplicate item {key}")
        seen.add(key)
        try:
            s = float(row["score"])
        except (TypeError, ValueError):
            raise SchemaError(f"line {lineno}: score {row['score']!r} is not a number") from None
        if not (0.0 <= s <= 1.0):
            raise SchemaError(f"line {lineno}: score {s} outside [0, 1]")
        scores[(row["model_id"], row["task_id"])].append(s)
    if not scores:
        raise SchemaError("score table has no rows")
    return ScoreTable(dict(scores))


CORRELATION_COLUMNS = ("measure", "n", "spearman_rho", "spearman_p", "pearson_r", "pearson_p")


def correlation_rows_to_csv(reports: dict[str, CorrelationReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CORRELATION_COLUMNS)
    for measure, rep in reports.items():
        w.writerow([measure, rep.n, repr(rep.spearman_rho), repr(rep.spearman_p), repr(rep.pearson_r), repr(rep.pearson_p)])
    return buf.getvalue()
