import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tfk.core import ContractError, Rng
from tfk.metrics import METRICS, binary_metrics, compute_metrics, confusion, emit_report
from tfk.schema import DERM7PT, LabelSchema

BINARY = LabelSchema(names=("X",), classes=(("ABS", "PRS"),))


def random_labels(rng, n):
    return np.stack([rng.integers(0, k, size=n) for k in DERM7PT.class_counts], axis=1)


def test_hand_computed_metrics():
    # SEN = 40/50, SPE = 30/50, PRE = 40/60, F1 = 2 * PRE * SEN / (PRE + SEN) = 0.8/1.1
    values, bad = binary_metrics(tp=40, fp=20, tn=30, fn=10)
    assert values["SEN"] == pytest.approx(0.8, abs=1e-6)
    assert values["SPE"] == pytest.approx(0.6, abs=1e-6)
    assert values["PRE"] == pytest.approx(0.6667, abs=1e-4)
    assert values["F1"] == pytest.approx(0.7273, abs=1e-4)
    assert values["F1"] == pytest.approx(8 / 11, abs=1e-12)
    assert values["ACC"] == pytest.approx(0.7, abs=1e-12)
    assert bad == []


def test_binary_hand_count():
    c = confusion(np.array([1, 0, 1, 1]), np.array([1, 1, 0, 1]), BINARY)
    tp, fp, tn, fn = c.counts[0][1]
    assert (tp, fn, fp, tn) == (2, 1, 1, 0)


def test_degenerate_division_is_flagged():
    values, bad = binary_metrics(tp=0, fp=0, tn=5, fn=0)
    assert values["SEN"] == 0.0 and values["PRE"] == 0.0 and values["F1"] == 0.0
    assert set(bad) == {"SEN", "PRE", "F1"}


def test_perfect_classifier():
    y = np.array([[0], [1], [1], [0]])
    report = compute_metrics(confusion(y, y, BINARY))
    assert report.avg == 1.0
    for m in METRICS:
        np.testing.assert_array_equal(report.per_class[0][m], 1.0)
    c = confusion(y, y, BINARY)
    assert (c.fp(0) == 0).all() and (c.fn(0) == 0).all()


@given(st.integers(0, 10_000), st.integers(1, 40))
def test_counts_partition_n(seed, n):
    rng = Rng(seed)
    c = confusion(random_labels(rng, n), random_labels(rng, n))
    for table in c.counts:
        np.testing.assert_array_equal(table.sum(axis=1), n)
    assert c.n == n


@given(st.integers(0, 10_000))
def test_f1_is_harmonic_mean(seed):
    tp, fp, tn, fn = (int(v) for v in Rng(seed).integers(1, 50, size=4))
    v, _ = binary_metrics(tp, fp, tn, fn)
    assert v["F1"] == pytest.approx(2 / (1 / v["PRE"] + 1 / v["SEN"]), rel=1e-12)


@given(st.integers(0, 10_000))
def test_binary_complement_symmetry(seed):
    rng = Rng(seed)
    p, t = random_labels(rng, 30), random_labels(rng, 30)
    report = compute_metrics(confusion(p, t))
    for i in (DERM7PT.names.index("BWV"), DERM7PT.names.index("RS")):
        sen, spe = report.per_class[i]["SEN"], report.per_class[i]["SPE"]
        assert sen[1] == pytest.approx(spe[0], abs=1e-12)
        # one-vs-rest accuracy of a binary label equals its exact-match accuracy
        tp, fp, tn, fn = confusion(p, t).counts[i][1]
        assert (tp + tn) / 30 == pytest.approx(report.accuracy[i], abs=1e-12)


@given(st.integers(0, 10_000))
def test_metrics_invariant_under_class_relabeling(seed):
    rng = Rng(seed)
    p, t = random_labels(rng, 40), random_labels(rng, 40)
    perms = [rng.permutation(k) for k in DERM7PT.class_counts]
    pp = np.stack([perms[i][p[:, i]] for i in range(8)], axis=1)
    tt = np.stack([perms[i][t[:, i]] for i in range(8)], axis=1)
    a, b = compute_metrics(confusion(p, t)), compute_metrics(confusion(pp, tt))
    np.testing.assert_array_equal(a.accuracy, b.accuracy)
    for i in range(8):
        for m in METRICS:
            np.testing.assert_allclose(b.per_class[i][m][perms[i]], a.per_class[i][m], atol=1e-12)
            assert a.macro[i][m] == pytest.approx(b.macro[i][m], abs=1e-12)


def test_length_mismatch():
    with pytest.raises(ContractError):
        confusion(np.zeros((3, 8), int), np.zeros((4, 8), int))
    with pytest.raises(ContractError):
        confusion(np.zeros((3, 7), int), np.zeros((3, 7), int))


def test_avg_is_mean_label_accuracy():
    rng = Rng(4)
    p, t = random_labels(rng, 50), random_labels(rng, 50)
    report = compute_metrics(confusion(p, t))
    np.testing.assert_allclose(report.accuracy, (p == t).mean(axis=0))
    assert report.avg == pytest.approx((p == t).mean(), abs=1e-12)
    assert all(0.0 <= v <= 1.0 for v in report.accuracy)


def test_emit_report(tmp_path):
    rng = Rng(5)
    report = compute_metrics(confusion(random_labels(rng, 60), random_labels(rng, 60)))
    paths = emit_report(report, tmp_path / "a")
    with open(paths["per_class"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 24
    assert {(r["label"], r["class"]) for r in rows} == {
        (n, c) for n, cls in zip(DERM7PT.names, DERM7PT.classes) for c in cls}
    with open(paths["per_label"]) as fh:
        acc = [float(r["accuracy"]) for r in csv.DictReader(fh)]
    with open(paths["summary"]) as fh:
        summary = {r["metric"]: float(r["value"]) for r in csv.DictReader(fh)}
    assert summary["avg"] == pytest.approx(np.mean(acc), abs=1e-4)
    assert set(summary) == {"avg", "AVE_ACC", "AVE_SEN", "AVE_SPE", "AVE_PRE", "AVE_F1"}
    again = emit_report(report, tmp_path / "b")
    for k in paths:
        assert paths[k].read_bytes() == again[k].read_bytes()
