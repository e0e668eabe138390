import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from speechemo.harness.metrics import (
    EvalReport,
    MetricError,
    accuracy,
    confusion,
    load_confusion_csv,
    macro_f1,
    per_class_from_confusion,
    top_k_accuracy,
)


def _f1_oracle(preds, labels, n):
    """Per-class F1 from explicit TP/FP/FN counts."""
    out = []
    for c in range(n):
        tp = sum(p == c and y == c for p, y in zip(preds, labels))
        fp = sum(p == c and y != c for p, y in zip(preds, labels))
        fn = sum(p != c and y == c for p, y in zip(preds, labels))
        out.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return out


def test_hand_case():
    labels, preds = [0, 0, 1, 2], [0, 1, 1, 2]
    assert accuracy(preds, labels) == 0.75
    _, _, f1 = per_class_from_confusion(confusion(preds, labels, 3))
    np.testing.assert_allclose(f1, [2 / 3, 2 / 3, 1.0])
    assert macro_f1(preds, labels, 3) == pytest.approx(7 / 9, abs=1e-15)


def test_all_correct_is_diagonal():
    y = [0, 1, 2, 2, 1]
    cm = confusion(y, y, 3)
    assert accuracy(y, y) == 1.0
    np.testing.assert_array_equal(cm, np.diag([1, 2, 2]))


def test_confusion_rows_are_true_columns_predicted():
    cm = confusion([2], [0], 3)
    assert cm[0, 2] == 1 and cm.sum() == 1


def test_rank_three_counts_for_top3_only():
    p = np.array([[0.5, 0.3, 0.15, 0.05]])
    assert top_k_accuracy(p, [2], 2) == 0.0
    assert top_k_accuracy(p, [2], 3) == 1.0


def test_top_k_ties_go_to_lower_index():
    p = np.array([[0.25, 0.25, 0.25, 0.25]])
    assert top_k_accuracy(p, [1], 2) == 1.0
    assert top_k_accuracy(p, [2], 2) == 0.0
    assert accuracy(p, [0]) == 1.0


def test_absent_class_contributes_zero_f1():
    # class 2 has no support and is never predicted
    assert macro_f1([0, 1], [0, 1], 3) == pytest.approx(2 / 3)


def _prob_rows(draw_n, n_classes, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n_classes), size=draw_n)
    y = rng.integers(0, n_classes, draw_n)
    return p, y


@given(st.integers(1, 60), st.integers(2, 14), st.integers(0, 2**32 - 1))
def test_metric_properties(n, c, seed):
    p, y = _prob_rows(n, c, seed)
    assert top_k_accuracy(p, y, 1) == accuracy(p, y)
    rep = EvalReport.from_predictions(p, y, [f"c{i}" for i in range(c)], "s")
    assert rep.confusion.sum() == n == rep.n_examples
    assert rep.accuracy == np.trace(rep.confusion) / n
    for v in [rep.accuracy, rep.macro_f1, *rep.precision, *rep.recall, *rep.top_k_accuracy.values()]:
        assert 0.0 <= v <= 1.0
    ks = sorted(rep.top_k_accuracy)
    assert all(rep.top_k_accuracy[a] <= rep.top_k_accuracy[b] for a, b in zip(ks, ks[1:]))
    np.testing.assert_allclose(
        per_class_from_confusion(rep.confusion)[2], _f1_oracle(np.argmax(p, 1), y, c), atol=1e-12
    )


@given(st.integers(1, 60), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_shuffling_changes_nothing(n, c, seed):
    p, y = _prob_rows(n, c, seed)
    order = np.random.default_rng(seed + 1).permutation(n)
    names = [str(i) for i in range(c)]
    a = EvalReport.from_predictions(p, y, names, "s")
    b = EvalReport.from_predictions(p[order], y[order], names, "s")
    assert a.to_dict() == b.to_dict()


@given(st.integers(1, 60), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_regeneration_from_confusion_csv_is_exact(tmp_path_factory, n, c, seed):
    p, y = _prob_rows(n, c, seed)
    rep = EvalReport.from_predictions(p, y, [f"k{i}" for i in range(c)], "s")
    path = tmp_path_factory.mktemp("cm") / "confusion.csv"
    rep.save_confusion_csv(path)
    names, cm = load_confusion_csv(path)
    again = EvalReport.from_confusion(cm, names, "s")
    assert names == rep.class_names
    assert again.accuracy == rep.accuracy
    assert again.macro_f1 == rep.macro_f1
    assert again.precision == rep.precision and again.recall == rep.recall


def test_report_json_round_trip(tmp_path):
    p = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8], [0.3, 0.4, 0.3]])
    rep = EvalReport.from_predictions(p, [0, 2, 0], ["a", "b", "c"], "demo", extra={"epochs": 3})
    path = tmp_path / "r.json"
    rep.save_json(path)
    back = EvalReport.from_dict(json.loads(path.read_text()))
    assert back.to_dict() == rep.to_dict()
    assert rep.top_k_accuracy == {1: 2 / 3, 2: 1.0, 3: 1.0}
    assert "acc=0.6667" in rep.summary()


def test_errors():
    with pytest.raises(MetricError, match="at least one"):
        accuracy([], [])
    with pytest.raises(MetricError, match="predictions for"):
        accuracy([0, 1], [0])
    with pytest.raises(MetricError, match="probability rows"):
        top_k_accuracy([0, 1], [0, 1], 1)
    with pytest.raises(MetricError, match="outside"):
        confusion([0, 3], [0, 1], 3)
    with pytest.raises(MetricError, match="empty"):
        EvalReport.from_confusion(np.zeros((2, 2)), ["a", "b"], "s")
