import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from mergelab import ArgumentError, DegenerateError, SchemaError
from mergelab.stats import (
    CorrelationReport,
    average_ranks,
    bootstrap_ci,
    correlate_measures,
    correlation_rows_to_csv,
    cv_percent,
    merge_delta,
    pearson,
    permutation_p,
    read_score_table,
    spearman,
)

import oracles

finite = st.integers(-60, 60).map(float)  # integer-valued: plenty of ties, no subnormals
paired = st.integers(3, 30).flatmap(lambda n: st.tuples(st.lists(finite, min_size=n, max_size=n), st.lists(finite, min_size=n, max_size=n)))


# -- delta --------------------------------------------------------------------------------

def test_delta_examples():
    assert merge_delta((0.9, 0.8), (0.9, 0.8)).delta == 0.0
    assert merge_delta((0.99, 0.98), (0.60, 0.52)).delta == pytest.approx(0.425, abs=1e-12)
    assert merge_delta((0.5, 0.5), (0.6, 0.6)).delta == pytest.approx(-0.1, abs=1e-12)


@given(st.tuples(st.floats(0, 1), st.floats(0, 1)), st.tuples(st.floats(0, 1), st.floats(0, 1)))
def test_delta_antisymmetric(e, m):
    assert merge_delta(e, m).delta == -merge_delta(m, e).delta


def test_delta_rejects_out_of_range():
    with pytest.raises(ArgumentError):
        merge_delta((1.2, 0.5), (0.5, 0.5))
    with pytest.raises(ArgumentError):
        merge_delta((0.5,), (0.5, 0.5))


# -- CV ----------------------------------------------------------------------------------

def test_cv_examples():
    assert cv_percent([5, 5, 5]) == 0.0
    assert cv_percent([1, 2, 3]) == pytest.approx(50.0, abs=1e-12)


def test_cv_errors():
    with pytest.raises(DegenerateError):
        cv_percent([-1, 1])
    with pytest.raises(ArgumentError):
        cv_percent([1])


@given(st.lists(st.floats(0.1, 100), min_size=2, max_size=20), st.floats(0.01, 100))
def test_cv_scale_invariant(xs, c):
    assert cv_percent([c * x for x in xs]) == pytest.approx(cv_percent(xs), rel=1e-9, abs=1e-9)


@given(st.lists(st.floats(0.1, 100), min_size=2, max_size=20))
def test_cv_zero_iff_constant(xs):
    assert (cv_percent(xs) == 0.0) == (len(set(xs)) == 1)


# -- bootstrap ----------------------------------------------------------------------------

def test_bootstrap_constant_items():
    ci = bootstrap_ci([1, 1, 1, 1], seed=3)
    assert (ci.mean, ci.se, ci.ci_low, ci.ci_high) == (1.0, 0.0, 1.0, 1.0)


def test_bootstrap_deterministic_and_interval_shape():
    a = bootstrap_ci([0, 1], n_resamples=1000, seed=11)
    b = bootstrap_ci([0, 1], n_resamples=1000, seed=11)
    assert a == b
    assert a.ci_low == a.mean - 1.96 * a.se and a.ci_high == a.mean + 1.96 * a.se
    assert a.ci_low <= a.mean <= a.ci_high
    assert bootstrap_ci([0, 1], seed=12) != a


def test_bootstrap_se_matches_reference_resampler():
    items = np.array([0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0])
    rng = np.random.default_rng(5)
    means = [items[rng.integers(0, 7, size=7)].mean() for _ in range(300)]
    ref = np.std(means, ddof=1)
    assert bootstrap_ci(items, n_resamples=300, seed=5, chunk=300).se == pytest.approx(ref, rel=1e-12)


def test_bootstrap_se_close_to_analytic():
    items = np.random.default_rng(0).random(400) < 0.3
    ci = bootstrap_ci(items.astype(float), n_resamples=2000, seed=1)
    analytic = math.sqrt(items.mean() * (1 - items.mean()) / 400)
    assert ci.se == pytest.approx(analytic, rel=0.1)


def test_bootstrap_errors():
    with pytest.raises(ArgumentError):
        bootstrap_ci([])
    with pytest.raises(ArgumentError):
        bootstrap_ci([1.0], n_resamples=0)


# -- correlations -----------------------------------------------------------------------

def test_pearson_examples():
    r, p = pearson([1, 2, 3, 4], [3, 5, 7, 9])
    assert r == 1.0 and p == 0.0
    assert pearson([1, 2, 3], [3, 2, 1])[0] == -1.0


def test_pearson_against_direct_formula_and_t_cdf():
    x, y = [1, 2, 3, 4, 5], [2, 1, 4, 3, 5]
    r, p = pearson(x, y)
    ref_r = oracles.pearson_r(x, y)
    assert abs(r - ref_r) <= 1e-10
    assert abs(p - oracles.t_two_sided_p(ref_r, 5)) <= 1e-6


def test_spearman_ties_against_rank_table():
    x, y = [1, 2, 2, 4], [3, 1, 1, 2]
    assert list(average_ranks(x)) == oracles.ranks(x) == [1.0, 2.5, 2.5, 4.0]
    rho, p = spearman(x, y)
    ref = oracles.pearson_r(oracles.ranks(x), oracles.ranks(y))
    assert abs(rho - ref) <= 1e-12
    assert abs(p - oracles.t_two_sided_p(ref, 4)) <= 1e-6


@given(paired)
def test_pearson_and_spearman_match_oracles(xy):
    x, y = xy
    assume(len(set(x)) > 1 and len(set(y)) > 1)
    ref_r = oracles.pearson_r(x, y)
    assert abs(pearson(x, y)[0] - ref_r) <= 1e-10
    ref_rho = oracles.pearson_r(oracles.ranks(x), oracles.ranks(y))
    assert abs(spearman(x, y)[0] - ref_rho) <= 1e-10


@given(st.permutations(list(range(12))))
def test_spearman_classic_formula_without_ties(perm):
    n = len(perm)
    d2 = sum((i - p) ** 2 for i, p in enumerate(perm))
    classic = 1 - 6 * d2 / (n * (n * n - 1))
    assert abs(spearman(list(range(n)), perm)[0] - classic) <= 1e-12


def test_spearman_monotone_examples():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 400])[0] == 1.0
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1])[0] == -1.0


@given(paired)
def test_spearman_invariant_to_monotone_transform(xy):
    x, y = xy
    assume(len(set(x)) > 1 and len(set(y)) > 1)
    assert spearman(x, y)[0] == pytest.approx(spearman(np.exp(np.asarray(x) / 20), y)[0], abs=1e-12)


@given(paired, st.floats(0.1, 10), st.floats(-10, 10))
def test_pearson_affine_invariance(xy, a, b):
    x, y = xy
    assume(np.std(x) > 1e-3 and np.std(y) > 1e-3)
    r = pearson(x, y)[0]
    assert pearson([a * v + b for v in x], y)[0] == pytest.approx(r, abs=1e-9)
    assert pearson([-a * v for v in x], y)[0] == pytest.approx(-r, abs=1e-9)


def test_correlation_errors():
    with pytest.raises(DegenerateError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(DegenerateError):
        spearman([2, 2, 2], [1, 2, 3])
    with pytest.raises(ArgumentError):
        pearson([1, 2], [1, 2])
    with pytest.raises(ArgumentError):
        pearson([1, 2, 3], [1, 2])


def test_correlate_measures_self():
    d = [0.1, 0.5, 0.3, 0.9, 0.2]
    rep = correlate_measures(list(zip(d, d)))
    assert rep.n == 5 and rep.spearman_rho == 1.0 and rep.pearson_r == 1.0


def test_correlate_measures_planted_correlation():
    # average estimate over 200 independent 45-pair samples with true r = 0.5
    rng = np.random.default_rng(7)
    cov = [[1, 0.5], [0.5, 1]]
    rs = [correlate_measures(rng.multivariate_normal([0, 0], cov, size=45).tolist()).pearson_r for _ in range(200)]
    assert abs(np.mean(rs) - 0.5) <= 0.15
    assert abs(np.median(rs) - 0.5) <= 0.15


def test_correlate_measures_bounds():
    rng = np.random.default_rng(0)
    rep = correlate_measures(rng.standard_normal((30, 2)).tolist())
    assert -1 <= rep.spearman_rho <= 1 and -1 <= rep.pearson_r <= 1
    assert 0 <= rep.spearman_p <= 1 and 0 <= rep.pearson_p <= 1


def exact_permutation_p(x, y):
    obs = abs(oracles.pearson_r(x, y))
    hits = total = 0
    for perm in itertools.permutations(y):
        total += 1
        hits += abs(oracles.pearson_r(x, list(perm))) >= obs - 1e-12
    return hits / total


def test_permutation_p_agrees_with_exact_enumeration():
    x, y = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [2.0, 1.0, 4.0, 3.0, 6.0, 5.0]
    exact = exact_permutation_p(x, y)
    p = permutation_p(x, y, "pearson", n_permutations=10_000, seed=1)
    assert abs(p - exact) <= 4 * math.sqrt(exact * (1 - exact) / 10_000) + 1e-4


def test_permutation_p_floor_and_determinism():
    x = list(range(20))
    p = permutation_p(x, x, "spearman", n_permutations=999, seed=2)
    assert p == pytest.approx(1 / 1000)
    assert permutation_p([1, 3, 2, 5, 4], [2, 1, 3, 5, 4], seed=4) == permutation_p([1, 3, 2, 5, 4], [2, 1, 3, 5, 4], seed=4)


def test_correlate_measures_permutation_mode():
    pairs = [(float(i), float(i % 3)) for i in range(10)]
    rep = correlate_measures(pairs, permutation=True, n_permutations=2000, seed=0)
    assert rep.spearman_rho == correlate_measures(pairs).spearman_rho
    assert rep.pearson_p != correlate_measures(pairs).pearson_p


def test_correlation_csv():
    text = correlation_rows_to_csv({"mean_cka": CorrelationReport(45, 0.4, 0.006, 0.45, 0.002)})
    assert text == "measure,n,spearman_rho,spearman_p,pearson_r,pearson_p\nmean_cka,45,0.4,0.006,0.45,0.002\n"


# -- score tables ---------------------------------------------------------------------------

def test_read_score_table():
    text = "model_id,task_id,item_id,score\nm,t,1,1\nm,t,2,0\nm,u,1,0.5\n"
    table = read_score_table(text, is_text=True)
    assert table.accuracy("m", "t") == 0.5
    assert table.items("m", "u") == [0.5]
    with pytest.raises(SchemaError):
        table.accuracy("x", "t")


@pytest.mark.parametrize(
    "text",
    [
        "model,task,item,score\nm,t,1,1\n",
        "model_id,task_id,item_id,score\n",
        "model_id,task_id,item_id,score\nm,t,1,1\nm,t,1,0\n",
        "model_id,task_id,item_id,score\nm,t,1,1.5\n",
        "model_id,task_id,item_id,score\nm,t,1,abc\n",
    ],
    ids=["columns", "empty", "duplicate", "range", "non-numeric"],
)
def test_score_table_schema_errors(text):
    with pytest.raises(SchemaError):
        read_score_table(text, is_text=True)
