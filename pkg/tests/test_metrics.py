import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gleason.metrics import (NINETEEN, TEN, RatingTable, accuracy, adjusted_accuracy,
                             bootstrap_ci, cohens_kappa, cohort29_median, cohort29_probabilities,
                             cohort29_sample, cohort_matrix, permutation_test_vs_cohort,
                             quantitation_mae, roc_auc)

grade_lists = st.lists(st.integers(1, 4), min_size=1, max_size=40)


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([1, 1], [2, 2]) == 0.0
    assert accuracy([1] * 7 + [2] * 3, [1] * 10) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([1], [1, 2])


def test_adjusted_accuracy_examples():
    ref = [1, 2, 3, 4]
    assert adjusted_accuracy(ref, ref) == 1.0
    assert adjusted_accuracy([1, 1, 3, 3], ref, weights=(1, 1, 1, 1)) == 0.5
    with pytest.raises(ValueError):
        adjusted_accuracy([1, 2], [1, 2])  # GG3 and GG4-5 weighted but absent
    assert adjusted_accuracy([1, 2], [1, 1], weights=(1, 0, 0, 0)) == 0.5


@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=60))
def test_adjusted_accuracy_with_empirical_weights_is_accuracy(pairs):
    pred, ref = map(np.array, zip(*pairs))
    w = np.bincount(ref, minlength=5)[1:].astype(float)
    assert adjusted_accuracy(pred, ref, w) == pytest.approx(accuracy(pred, ref), abs=1e-12)


def test_uniform_weights_give_macro_recall():
    rng = np.random.default_rng(0)
    ref = rng.integers(1, 5, 200)
    pred = np.where(rng.random(200) < 0.6, ref, rng.integers(1, 5, 200))
    macro = np.mean([np.mean(pred[ref == c] == c) for c in range(1, 5)])
    assert adjusted_accuracy(pred, ref, (1, 1, 1, 1)) == pytest.approx(macro)


def test_kappa_examples():
    assert cohens_kappa([1, 2, 3, 1], [1, 2, 3, 1]) == 1.0
    # 2x2 table [[35, 15], [15, 35]]: p_o = 0.7, p_e = 0.5
    a = [0] * 50 + [1] * 50
    b = [0] * 35 + [1] * 15 + [0] * 15 + [1] * 35
    assert cohens_kappa(a, b) == pytest.approx(0.4)
    rng = np.random.default_rng(0)
    assert abs(cohens_kappa(rng.integers(1, 5, 10**4), rng.integers(1, 5, 10**4))) < 0.05
    with pytest.warns(RuntimeWarning):
        assert cohens_kappa([2, 2], [2, 2], return_flag=True) == (0.0, True)


def test_kappa_matches_sklearn():
    skm = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(1)
    for _ in range(30):
        n = int(rng.integers(2, 80))
        a = rng.integers(1, 5, n)
        b = np.where(rng.random(n) < 0.5, a, rng.integers(1, 5, n))
        if len(set(a) | set(b)) < 2:
            continue
        assert cohens_kappa(a, b) == pytest.approx(skm.cohen_kappa_score(a, b), abs=1e-12)


@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=2, max_size=40),
       st.randoms())
def test_metrics_permutation_invariant(pairs, rnd):
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    a, b = map(list, zip(*pairs))
    c, d = map(list, zip(*shuffled))
    assert accuracy(a, b) == accuracy(c, d)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert cohens_kappa(a, b) == pytest.approx(cohens_kappa(c, d), abs=1e-12)


def test_quantitation_mae():
    ref = np.array([[50, 50, 0], [30, 70, 0]])
    assert quantitation_mae(ref, ref, "gp4") == 0.0
    pred = np.array([[60, 40, 0], [10, 90, 0]])
    assert quantitation_mae(pred, ref, "gp3") == 15.0
    assert quantitation_mae(pred[::-1], ref[::-1], 3) == 15.0
    with pytest.raises(ValueError):
        quantitation_mae(np.zeros((0, 3)), np.zeros((0, 3)), "gp5")


def _pair_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p, n in itertools.product(pos, neg))
    return wins / (pos.size * neg.size)


def test_roc_auc_examples_and_oracle():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])[0] == 1.0
    assert roc_auc([0.5] * 6, [0, 1] * 3)[0] == 0.5
    rng = np.random.default_rng(2)
    for _ in range(30):
        n = int(rng.integers(2, 120))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        s = np.round(rng.random(n), 1)  # coarse scores force ties
        assert abs(roc_auc(s, y)[0] - _pair_auc(s, y)) < 1e-12
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


def test_roc_curve_shape_and_reversal():
    rng = np.random.default_rng(3)
    s = rng.random(50)
    y = rng.integers(0, 2, 50)
    auc, curve = roc_auc(s, y)
    assert curve.fpr[0] == 0 and curve.tpr[-1] == 1 and curve.fpr[-1] == 1
    assert (np.diff(curve.fpr) >= 0).all() and (np.diff(curve.tpr) >= 0).all()
    assert roc_auc(-s, y)[0] == pytest.approx(1 - auc, abs=1e-12)


def _design(n_slides=40, seed=0, dls=None):
    """The 10 + 19 design: ten raters read every slide, three of nineteen per slide."""
    rng = np.random.default_rng(seed)
    ref = rng.integers(1, 5, n_slides)
    rows = []
    for s in range(n_slides):
        for r in range(10):
            rows.append((s, f"T{r:02d}", TEN, int(rng.integers(1, 5))))
        for r in rng.choice(19, 3, replace=False):
            rows.append((s, f"N{r:02d}", NINETEEN, int(rng.integers(1, 5))))
    s_, r_, g_, v_ = zip(*rows)
    return RatingTable([f"s{i}" for i in range(n_slides)], ref,
                       ref if dls is None else dls, s_, r_, g_, v_)


def test_rating_table_accessors():
    t = _design()
    assert len(t.raters()) <= 29 and t.n_slides == 40
    assert set(t.rater_accuracies(TEN)) == {f"T{r:02d}" for r in range(10)}
    with pytest.raises(ValueError):
        RatingTable(["a"], [1], [1], [0], ["x"], ["Other"], [1])
    with pytest.raises(ValueError):
        RatingTable(["a"], [1], [1], [3], ["x"], [TEN], [1])


def test_bootstrap_ci_basics():
    x = np.full(30, 2.5)
    assert bootstrap_ci(np.mean, x, replicates=50, seed=1) == (2.5, 2.5)
    y = np.random.default_rng(0).normal(size=100)
    assert bootstrap_ci(np.mean, y, 200, seed=4) == bootstrap_ci(np.mean, y, 200, seed=4)
    lo, hi = bootstrap_ci(np.mean, y, 200, seed=4)
    assert lo < y.mean() < hi


def test_bootstrap_resamples_subgroups_separately():
    t = _design(12, seed=5)
    rng = np.random.default_rng(0)
    for _ in range(20):
        rep = t.resample(rng)
        groups = rep.rater_subgroups()
        bases = {}
        for name, g in groups.items():
            base = name.split("#")[0]
            bases.setdefault(base, g)
            assert (base[0] == "T") == (g == TEN)
        # ten draws from the Ten pool, copies counted
        ten_copies = {n for n, g in groups.items() if g == TEN}
        assert len(ten_copies) == 10
        assert rep.n_slides == 12


def test_permutation_identical_ratings_p_one():
    n = 15
    ref = np.arange(n) % 4 + 1
    rows = [(s, f"T{r}", TEN, int(ref[s])) for s in range(n) for r in range(10)]
    rows += [(s, f"N{(s + r) % 19}", NINETEEN, int(ref[s])) for s in range(n) for r in range(3)]
    s_, r_, g_, v_ = zip(*rows)
    t = RatingTable([f"s{i}" for i in range(n)], ref, ref, s_, r_, g_, v_)
    p, stat = permutation_test_vs_cohort(t, iterations=200, seed=0, return_statistic=True)
    assert stat == 0.0 and p == 1.0


def test_permutation_statistic_and_reproducibility():
    t = _design(30, seed=1)
    p1, stat = permutation_test_vs_cohort(t, iterations=300, seed=7, return_statistic=True)
    assert stat == pytest.approx(1.0 - t.mean_rater_accuracy())
    assert p1 == permutation_test_vs_cohort(t, iterations=300, seed=7)
    assert p1 < 0.01  # DLS equals the reference, raters are random


def test_cohort_matrix_validation():
    t = _design(5)
    cm = cohort_matrix(t)
    assert cm.values.shape == (5, 14)
    bad = RatingTable(t.slide_ids, t.reference, t.dls, t.rating_slide[:-1], t.rating_rater[:-1],
                      t.rating_subgroup[:-1], t.rating_value[:-1])
    with pytest.raises(ValueError):
        cohort_matrix(bad)


def test_cohort29_probabilities_and_sampling():
    p = cohort29_probabilities()
    assert p.sum() == pytest.approx(1.0, abs=1e-15)
    assert p[:10] == pytest.approx(1 / 29) and p[10:] == pytest.approx(19 / 87)
    t = _design(8, seed=2)
    a = cohort29_sample(t, seed=3)
    assert a.shape == (8,) and np.array_equal(a, cohort29_sample(t, seed=3))
    sample, value = cohort29_median(t, lambda s: accuracy(s, t.reference), iterations=99, seed=0)
    values = sorted(accuracy(cohort29_sample(t, int(s)), t.reference)
                    for s in np.random.SeedSequence(0).generate_state(99))
    assert value == values[49]
    assert accuracy(sample, t.reference) == value
