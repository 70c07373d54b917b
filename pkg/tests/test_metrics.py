import math

import numpy as np
import pytest

from nancymil.errors import DataError, NumericalError
from nancymil.metrics import (ConfusionMatrix, accuracy, confusion,
                              evaluate_grades, macro_prs, spearman,
                              weighted_kappa)


# --- independent scalar oracles -------------------------------------------------

def kappa_oracle(counts, scheme):
    """From-first-principles scalar computation, no numpy vector tricks."""
    K = len(counts)
    n = sum(sum(row) for row in counts)
    row_marg = [sum(counts[i][j] for j in range(K)) / n for i in range(K)]
    col_marg = [sum(counts[i][j] for i in range(K)) / n for j in range(K)]
    num = den = 0.0
    for i in range(K):
        for j in range(K):
            if scheme == "quadratic":
                w = ((i - j) / (K - 1)) ** 2
            else:
                w = abs(i - j) / (K - 1)
            num += w * counts[i][j] / n
            den += w * row_marg[i] * col_marg[j]
    return 1.0 - num / den


def spearman_rho_oracle(x, y):
    """Pearson correlation of average ranks, computed with plain loops."""
    def ranks(v):
        order = sorted(range(len(v)), key=lambda i: v[i])
        r = [0.0] * len(v)
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            for k in range(i, j + 1):
                r[order[k]] = (i + j) / 2.0 + 1.0
            i = j + 1
        return r

    rx, ry = ranks(list(x)), ranks(list(y))
    n = len(rx)
    mx, my = sum(rx) / n, sum(ry) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    return cov / math.sqrt(vx * vy)


# --- confusion ------------------------------------------------------------------

def test_confusion_diagonal():
    cm = confusion([0, 1, 2, 3, 4], [0, 1, 2, 3, 4])
    assert np.all(cm.counts == np.eye(5, dtype=int))
    assert accuracy(cm) == 1.0


def test_confusion_single_pair():
    cm = confusion([2], [3])
    assert cm.counts[2, 3] == 1 and cm.counts.sum() == 1


def test_confusion_matches_tally():
    rng = np.random.default_rng(0)
    true = rng.integers(0, 5, 20)
    pred = rng.integers(0, 5, 20)
    cm = confusion(true, pred)
    for i in range(5):
        for j in range(5):
            assert cm.counts[i, j] == sum(
                1 for t, p in zip(true, pred) if t == i and p == j)


def test_confusion_length_mismatch():
    with pytest.raises(DataError):
        confusion([0, 1], [0])


def test_confusion_normalized_rows():
    cm = confusion([0, 0, 1], [0, 1, 1])
    norm = cm.normalized()
    np.testing.assert_allclose(norm[0], [0.5, 0.5, 0, 0, 0])
    assert np.all(norm[3] == 0)  # empty row stays zero


# --- macro P/R/S ----------------------------------------------------------------

def test_macro_prs_perfect():
    cm = confusion([0, 1, 2] * 4, [0, 1, 2] * 4)
    rep = macro_prs(cm, include=["0", "1", "2"])
    assert rep.macro_precision == rep.macro_recall == 1.0
    assert rep.macro_specificity == 1.0


def test_macro_prs_hand_tally():
    cm = ConfusionMatrix(np.array([[8, 2], [3, 7]]), ("a", "b"))
    rep = macro_prs(cm, include=["a", "b"])
    assert rep.macro_precision == pytest.approx((8 / 11 + 7 / 9) / 2)
    assert rep.macro_recall == pytest.approx((0.8 + 0.7) / 2)
    assert rep.macro_specificity == pytest.approx((0.7 + 0.8) / 2)


def test_macro_prs_degenerate_flagged():
    cm = ConfusionMatrix(np.array([[0, 0, 0], [0, 0, 0], [0, 0, 9]]),
                         ("0", "1", "2"))
    rep = macro_prs(cm, include=["0", "1"])
    assert rep.per_class["0"].degenerate
    assert rep.per_class["0"].recall == 0.0


def test_macro_prs_permuted_class_order():
    rng = np.random.default_rng(1)
    counts = rng.integers(0, 9, size=(3, 3))
    counts += np.eye(3, dtype=int)  # keep things non-degenerate
    cm = ConfusionMatrix(counts, ("a", "b", "c"))
    perm = [2, 0, 1]
    cm2 = ConfusionMatrix(counts[np.ix_(perm, perm)], ("c", "a", "b"))
    r1 = macro_prs(cm)
    r2 = macro_prs(cm2)
    assert r1.macro_precision == pytest.approx(r2.macro_precision)
    for lab in "abc":
        assert r1.per_class[lab].recall == pytest.approx(
            r2.per_class[lab].recall)


# --- weighted kappa -------------------------------------------------------------

def test_kappa_perfect_agreement():
    cm = confusion([0, 1, 2, 3, 4] * 3, [0, 1, 2, 3, 4] * 3)
    assert weighted_kappa(cm, "quadratic") == pytest.approx(1.0)
    assert weighted_kappa(cm, "linear") == pytest.approx(1.0)


def test_kappa_chance_level():
    rng = np.random.default_rng(2)
    true = rng.integers(0, 5, 20000)
    pred = rng.integers(0, 5, 20000)
    assert abs(weighted_kappa(confusion(true, pred), "quadratic")) < 0.03


def test_kappa_banded_matrix_oracle():
    counts = [[2, 1, 0, 0, 0], [1, 2, 1, 0, 0], [0, 1, 2, 1, 0],
              [0, 0, 1, 2, 1], [0, 0, 0, 1, 2]]
    cm = ConfusionMatrix(np.array(counts), tuple("01234"))
    for scheme in ("quadratic", "linear"):
        assert weighted_kappa(cm, scheme) == pytest.approx(
            kappa_oracle(counts, scheme), abs=1e-12)


def test_kappa_random_matrices_vs_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        counts = rng.integers(0, 20, size=(5, 5)).tolist()
        if sum(map(sum, counts)) == 0:
            continue
        cm = ConfusionMatrix(np.array(counts), tuple("01234"))
        for scheme in ("quadratic", "linear"):
            assert weighted_kappa(cm, scheme) == pytest.approx(
                kappa_oracle(counts, scheme), abs=1e-12)


def test_kappa_duplication_invariance():
    rng = np.random.default_rng(4)
    counts = rng.integers(0, 10, size=(5, 5))
    cm1 = ConfusionMatrix(counts, tuple("01234"))
    cm2 = ConfusionMatrix(counts * 2, tuple("01234"))
    assert weighted_kappa(cm1) == pytest.approx(weighted_kappa(cm2), abs=1e-12)


def test_kappa_undefined():
    cm = ConfusionMatrix(np.array([[7, 0], [0, 0]]), ("0", "1"))
    with pytest.raises(NumericalError):
        weighted_kappa(cm)
    with pytest.raises(DataError):
        weighted_kappa(ConfusionMatrix(np.zeros((2, 2), int), ("0", "1")))


# --- spearman -------------------------------------------------------------------

def test_spearman_identity_and_reverse():
    rho, p = spearman([1, 2, 3, 4, 5], [1, 2, 3, 4, 5])
    assert rho == 1.0 and p == 0.0
    rho, _ = spearman([1, 2, 3, 4, 5], [5, 4, 3, 2, 1])
    assert rho == -1.0


def test_spearman_worked_example():
    # d^2 sum is 4, so rho = 1 - 6*4/(5*24) = 0.8
    rho, p = spearman([1, 2, 3, 4, 5], [2, 1, 4, 3, 5])
    assert rho == pytest.approx(0.8, abs=1e-12)
    t = 0.8 * math.sqrt(3 / (1 - 0.64))
    assert 0 < p < 1
    assert t == pytest.approx(0.8 * math.sqrt((5 - 2) / (1 - 0.8 ** 2)))


def test_spearman_vs_oracle_with_ties():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = rng.integers(0, 5, 30)
        y = rng.integers(0, 5, 30)
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        rho, _ = spearman(x, y)
        assert rho == pytest.approx(spearman_rho_oracle(x, y), abs=1e-12)


def test_spearman_all_tied_is_error():
    with pytest.raises(NumericalError):
        spearman([1, 1, 1, 1], [1, 2, 3, 4])


def test_spearman_requires_three():
    with pytest.raises(DataError):
        spearman([1, 2], [1, 2])


# --- full report ----------------------------------------------------------------

def test_evaluate_grades_report():
    rep = evaluate_grades([0, 1, 2, 3, 4], [0, 1, 2, 3, 4])
    assert rep.accuracy == 1.0 and rep.kappa == pytest.approx(1.0)
    assert rep.rho == 1.0 and not rep.errors


def test_evaluate_grades_records_undefined_metrics():
    rep = evaluate_grades([0, 0, 0], [0, 0, 0])
    assert rep.kappa is None and rep.rho is None
    assert len(rep.errors) == 2
