import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import cohen_kappa_score, roc_auc_score

from amenable.controller import Controller
from amenable.evaluation import (
    auroc,
    bootstrap_std,
    cohen_kappa,
    contingency,
    paired_t_test,
    rejection_sweep,
    select_holdout,
    sweep_from_scores,
    table_from_counts,
)
from amenable.nets import zero_
from amenable.predictor import ArchSpec, Predictor

scores_st = st.lists(st.floats(0, 1), min_size=1, max_size=60)


def test_select_examples():
    assert np.array_equal(select_holdout([0.3, 0.2, 0.9], 0.0), [0, 1, 2])
    assert np.array_equal(select_holdout([0.1, 0.9, 0.5], 1 / 3), [1, 2])


def test_select_ties_broken_by_id():
    assert np.array_equal(select_holdout([0.5, 0.5, 0.5, 0.5], 0.5), [2, 3])
    assert np.array_equal(select_holdout([0.5, 0.5, 0.5, 0.5], 0.5, ids=[4, 3, 2, 1]), [0, 1])


def test_select_rejects_bad_input():
    with pytest.raises(ValueError):
        select_holdout([0.1], 1.0)
    with pytest.raises(ValueError):
        select_holdout([math.nan], 0.1)


def test_retained_counts_random_cases():
    g = np.random.default_rng(0)
    for _ in range(100):
        n = int(g.integers(1, 500))
        r = float(g.random() * 0.99)
        kept = select_holdout(g.random(n), r)
        assert kept.size == n - math.floor(r * n)
        assert kept.size == math.ceil((1 - r) * n - 1e-9)


@given(scores_st, st.floats(0, 0.98), st.floats(0, 0.98))
def test_select_monotone(scores, r1, r2):
    r1, r2 = sorted((r1, r2))
    assert set(select_holdout(scores, r2)) <= set(select_holdout(scores, r1))


def test_oracle_scores_retain_exactly_clean_set():
    flags = np.zeros(100, dtype=bool)
    flags[np.random.default_rng(3).choice(100, 70, replace=False)] = True
    kept = select_holdout(flags.astype(float), 0.3)
    assert set(kept) == set(np.flatnonzero(flags))
    t = contingency(flags.astype(float), flags, 0.3)
    assert t.kappa == 1.0 and t.accuracy == 1.0


def test_constant_predictor_gives_flat_curve():
    images = np.random.default_rng(0).random((50, 8, 8))
    pred = Predictor(ArchSpec("classification", (8, 8)))
    zero_(pred.net)
    with torch.no_grad():
        pred.net[-1].bias.copy_(torch.tensor([1.0, 0.0]))  # always class 0
    labels = np.zeros(50, dtype=int)
    res = rejection_sweep(Controller((8, 8)), pred, images, labels, [0.0, 0.1, 0.3, 0.5])
    assert res.metric_mean == [1.0] * 4
    assert res.n_retained == [50, 45, 35, 25]


def test_sweep_skips_tiny_sets():
    with pytest.warns(UserWarning):
        res = sweep_from_scores([0.1, 0.2, 0.3], [1, 0, 1], [0.0, 0.7])
    assert res.ratios == [0.0]


def test_sweep_needs_sorted_ratios():
    with pytest.raises(ValueError):
        sweep_from_scores([0.1, 0.2, 0.3], [1, 0, 1], [0.3, 0.1])


def test_bootstrap_deterministic():
    v = np.random.default_rng(0).random(200)
    a = bootstrap_std(v, np.random.default_rng(7))
    b = bootstrap_std(v, np.random.default_rng(7))
    assert a == b
    # close to the analytic standard error of the mean
    assert a == pytest.approx(v.std() / math.sqrt(v.size), rel=0.15)


# -- kappa / contingency -------------------------------------------------------


def test_kappa_hand_example():
    t = table_from_counts([[9, 3], [3, 85]])
    p_o, p_e = Fraction(94, 100), Fraction(12, 100) ** 2 + Fraction(88, 100) ** 2
    assert t.kappa == pytest.approx(float((p_o - p_e) / (1 - p_e)), abs=1e-12)
    assert t.kappa == pytest.approx(0.716, abs=5e-4)
    assert (t.accuracy, t.precision, t.recall) == pytest.approx((0.94, 0.75, 0.75), abs=1e-12)
    rater_a = [0] * 9 + [0] * 3 + [1] * 3 + [1] * 85
    rater_b = [0] * 9 + [1] * 3 + [0] * 3 + [1] * 85
    assert t.kappa == pytest.approx(cohen_kappa_score(rater_a, rater_b), abs=1e-12)


def test_perfect_agreement():
    assert table_from_counts([[10, 0], [0, 90]]).kappa == 1.0


def test_random_scores_near_zero_kappa():
    g = np.random.default_rng(11)
    flags = g.random(1000) > 0.3
    assert abs(contingency(g.random(1000), flags, 0.3).kappa) < 0.1


def test_one_class_oracle_flagged():
    t = contingency(np.linspace(0, 1, 20), np.ones(20, dtype=bool), 0.2)
    assert not t.kappa_defined and math.isnan(t.kappa)
    assert t.to_json()["kappa"] is None


@given(st.lists(st.integers(0, 50), min_size=4, max_size=4))
def test_kappa_transpose_symmetric(cells):
    counts = np.array(cells).reshape(2, 2)
    if counts.sum() == 0:
        return
    a, b = cohen_kappa(counts), cohen_kappa(counts.T)
    assert (math.isnan(a) and math.isnan(b)) or a == pytest.approx(b, abs=1e-12)
    if not math.isnan(a):
        assert -1 - 1e-12 <= a <= 1 + 1e-12


@given(scores_st.filter(lambda s: len(s) >= 5), st.floats(0, 0.9), st.randoms(use_true_random=False))
def test_contingency_counts_sum_to_n(scores, ratio, rnd):
    flags = np.array([rnd.random() < 0.7 for _ in scores])
    t = contingency(scores, flags, ratio)
    assert t.counts.sum() == len(scores)
    assert t.counts[0].sum() == math.floor(ratio * len(scores) + 1e-9)


# -- AUROC ---------------------------------------------------------------------


@given(st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), st.booleans()), min_size=2, max_size=80))
def test_auroc_matches_sklearn(pairs):
    scores, pos = map(np.array, zip(*pairs))
    if pos.all() or not pos.any():
        assert math.isnan(auroc(scores, pos))
        return
    assert auroc(scores, pos) == pytest.approx(roc_auc_score(pos, scores), abs=1e-12)


# -- paired t-test ---------------------------------------------------------------


def mp_two_sided_p(t, df):
    mpmath.mp.dps = 30
    x = mpmath.mpf(df) / (df + mpmath.mpf(t) ** 2)
    return float(mpmath.betainc(mpmath.mpf(df) / 2, mpmath.mpf(1) / 2, 0, x, regularized=True))


def test_identical_pairs():
    r = paired_t_test([0.1, 0.5, 0.9], [0.1, 0.5, 0.9])
    assert (r.t_statistic, r.p_value, r.degenerate) == (0.0, 1.0, True)


def test_constant_difference_degenerate():
    r = paired_t_test(np.arange(10) + 1.0, np.arange(10))
    assert r.degenerate and r.p_value == 0.0


def test_t_test_against_mpmath():
    a = np.array([0.91, 0.87, 0.93, 0.88, 0.95, 0.90, 0.86, 0.92])
    b = np.array([0.89, 0.86, 0.90, 0.88, 0.91, 0.87, 0.86, 0.90])
    r = paired_t_test(a, b)
    d = [Fraction(str(x)) - Fraction(str(y)) for x, y in zip(a, b)]
    mean = sum(d) / len(d)
    var = sum((x - mean) ** 2 for x in d) / (len(d) - 1)
    t_ref = float(mean) / math.sqrt(float(var) / len(d))
    assert r.t_statistic == pytest.approx(t_ref, abs=1e-9)
    assert r.p_value == pytest.approx(mp_two_sided_p(t_ref, len(d) - 1), abs=1e-3)
    assert r.p_value == pytest.approx(mp_two_sided_p(t_ref, len(d) - 1), abs=1e-12)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=3, max_size=30))
def test_t_test_p_value_property(pairs):
    a, b = map(np.array, zip(*pairs))
    r = paired_t_test(a, b)
    if r.degenerate:
        return
    assert r.p_value == pytest.approx(mp_two_sided_p(r.t_statistic, len(a) - 1), abs=1e-6)
