import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gblend.ogr import (CURVE_COLUMNS, CheckpointRecord, accuracy, generalization_at, mean_average_precision,
                        ogr_between, overfitting_at, write_curves_csv)


def rec(epoch, tl, vl, ta=0.5, va=0.5, source="h"):
    return CheckpointRecord(epoch, tl, vl, ta, va, source)


def test_overfitting_example():
    assert overfitting_at(rec(0, 2.0, 2.0), rec(5, 1.0, 1.2)) == pytest.approx(0.2)


def test_equal_drops_mean_no_overfitting():
    assert overfitting_at(rec(0, 2.0, 3.0), rec(5, 1.5, 2.5)) == 0.0


def test_generalization_examples():
    assert generalization_at(rec(0, 2.0, 2.0), rec(3, 1.0, 1.2)) == pytest.approx(0.8)
    assert generalization_at(rec(0, 2.0, 2.0), rec(3, 1.0, 2.0)) == 0.0


def test_accuracy_variant_flips_signs():
    a, b = rec(0, 1, 1, ta=0.2, va=0.2), rec(4, 1, 1, ta=0.9, va=0.5)
    assert overfitting_at(a, b, "accuracy") == pytest.approx(0.4)
    assert generalization_at(a, b, "accuracy") == pytest.approx(0.3)


def test_ogr_example():
    r = ogr_between(rec(0, 2.0, 2.0), rec(5, 1.0, 1.2))
    assert r.delta_o == pytest.approx(0.2) and r.delta_g == pytest.approx(0.8)
    assert r.ogr == pytest.approx(0.25)


def test_pure_generalization_has_zero_ogr():
    assert ogr_between(rec(0, 2.0, 2.0), rec(1, 1.0, 1.0)).ogr == 0.0


def test_flat_validation_is_undefined_not_a_division_error():
    r = ogr_between(rec(0, 2.0, 2.0), rec(1, 1.0, 2.0))
    assert r.ogr is None and not r.defined


def test_worsening_validation_is_flagged_negative():
    r = ogr_between(rec(0, 2.0, 1.0), rec(1, 1.0, 1.5))
    assert r.delta_g < 0 and r.negative_g and r.defined


@pytest.mark.parametrize("a,b", [(rec(3, 1, 1), rec(3, 1, 1)), (rec(4, 1, 1), rec(2, 1, 1)),
                                 (rec(0, 1, 1, source="x"), rec(1, 1, 1, source="y"))])
def test_mismatched_records_rejected(a, b):
    with pytest.raises(ValueError):
        ogr_between(a, b)


def test_record_invariants():
    with pytest.raises(ValueError):
        CheckpointRecord(-1, 1, 1, 0.5, 0.5)
    with pytest.raises(ValueError):
        CheckpointRecord(0, -1, 1, 0.5, 0.5)
    with pytest.raises(ValueError):
        CheckpointRecord(0, 1, 1, 1.5, 0.5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 5), st.floats(0, 5), st.floats(0, 1), st.floats(0, 1)),
                min_size=3, max_size=8), st.sampled_from(["loss", "accuracy"]))
def test_deltas_telescope(points, kind):
    recs = [rec(i, *p) for i, p in enumerate(points)]
    total = ogr_between(recs[0], recs[-1], kind)
    parts = [ogr_between(a, b, kind) for a, b in zip(recs, recs[1:])]
    assert abs(total.delta_o - sum(p.delta_o for p in parts)) <= 1e-12
    assert abs(total.delta_g - sum(p.delta_g for p in parts)) <= 1e-12
    # the delta over a window equals the difference of O measured from epoch 0
    if len(recs) > 2:
        o_n = overfitting_at(recs[0], recs[-1], kind) - overfitting_at(recs[0], recs[1], kind)
        assert abs(ogr_between(recs[1], recs[-1], kind).delta_o - o_n) <= 1e-12


def test_top1_accuracy():
    logits = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 0.0]])
    assert accuracy(logits, np.array([0, 1, 1])) == pytest.approx(2 / 3)


def test_average_precision_hand_example():
    # class 0 ranks: pos, neg, pos -> AP = (1 + 2/3) / 2
    scores = np.array([[0.9, 0.1], [0.8, 0.7], [0.3, 0.2]])
    labels = np.array([[1, 0], [0, 1], [1, 0]])
    ap0 = (1 + 2 / 3) / 2
    ap1 = 1.0
    assert mean_average_precision(scores, labels) == pytest.approx((ap0 + ap1) / 2)
    assert accuracy(scores, labels) == pytest.approx((ap0 + ap1) / 2)


def test_curves_csv(tmp_path):
    curves = {"V": [rec(0, 2.0, 2.0, source="V"), rec(1, 1.0, 1.2, source="V")]}
    path = tmp_path / "c.csv"
    write_curves_csv(path, curves)
    rows = list(csv.DictReader(open(path)))
    assert tuple(rows[0].keys()) == CURVE_COLUMNS
    assert float(rows[1]["O"]) == pytest.approx(0.2) and float(rows[1]["G"]) == pytest.approx(0.8)
