import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from milfuse.errors import ContractError, UndefinedAUCError
from milfuse.metrics import (accuracy, auc_macro_ovr, binary_auc, confusion_matrix, evaluate_scores,
                             predict)
from milfuse.numerics import make_rng


def pair_count_auc(scores, positive):
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def test_accuracy_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([1, 2, 0], [0, 1, 2]) == 0.0
    assert accuracy([0, 1, 2, 3], [0, 1, 2, 0]) == 0.75


def test_accuracy_empty():
    with pytest.raises(ContractError):
        accuracy([], [])


def test_predict_tie_lowest_index():
    np.testing.assert_array_equal(predict([[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]]), [0, 1])


def test_binary_auc_example():
    assert binary_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_binary_auc_separated_and_ties():
    assert binary_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert binary_auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_matches_pair_counting_with_ties():
    rng = make_rng(0)
    for _ in range(100):
        m, n = int(rng.integers(4, 40)), int(rng.integers(2, 5))
        labels = rng.integers(0, n, size=m)
        labels[:n] = np.arange(n)
        scores = np.round(rng.random((m, n)), 1)  # coarse grid forces ties
        macro, per = auc_macro_ovr(scores, labels)
        oracle = [pair_count_auc(scores[:, c], labels == c) for c in range(n)]
        np.testing.assert_allclose(per, oracle, atol=1e-12)
        assert abs(macro - np.mean(oracle)) <= 1e-12


def test_auc_agrees_with_sklearn_ovr():
    rng = make_rng(1)
    labels = np.repeat(np.arange(4), 10)
    scores = rng.dirichlet(np.ones(4), size=40)
    macro, _ = auc_macro_ovr(scores, labels)
    assert macro == pytest.approx(roc_auc_score(labels, scores, multi_class="ovr", average="macro"), abs=1e-12)


def test_auc_absent_class_skipped():
    scores = make_rng(2).random((6, 3))
    macro, per = auc_macro_ovr(scores, np.array([0, 0, 0, 1, 1, 1]))
    assert np.isnan(per[2])
    assert macro == pytest.approx(np.nanmean(per))


def test_auc_single_class():
    with pytest.raises(UndefinedAUCError):
        auc_macro_ovr(np.ones((3, 2)), np.array([1, 1, 1]))


def test_confusion_and_acc_identity():
    rng = make_rng(3)
    for _ in range(50):
        labels = np.concatenate([np.arange(4), rng.integers(0, 4, 16)])
        scores = rng.random((20, 4))
        r = evaluate_scores(scores, labels, 4)
        assert r.confusion.sum() == 20 == r.total
        assert r.acc == np.trace(r.confusion) / r.confusion.sum()
        assert r.acc == accuracy(predict(scores), labels)


def test_confusion_orientation():
    cm = confusion_matrix([1, 1, 0], [0, 1, 0], 2)
    np.testing.assert_array_equal(cm, [[1, 1], [0, 1]])
