import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfseg.errors import ConfigError, ShapeError
from sfseg.metrics import (CSV_HEADER, aggregate, confusion, entropy_map, group_miou, mean_per_image_iou,
                           per_class_iou, report_from_confusion, retained_miou)

from oracles import FIXTURES, enumerate_iou


@pytest.mark.parametrize("gt,pred,c", FIXTURES)
def test_iou_matches_enumeration(gt, pred, c):
    gt, pred = np.array(gt), np.array(pred)
    got = per_class_iou(pred, gt, c)
    want = enumerate_iou(pred, gt, c)
    assert np.array_equal(np.isnan(got), np.isnan(want))
    assert np.array_equal(got[~np.isnan(got)], np.array(want)[~np.isnan(want)])


def test_2x2_example():
    gt = np.array([[0, 0], [1, 1]])
    iou = per_class_iou(np.zeros((2, 2), int), gt, 2)
    assert iou[0] == 0.5 and iou[1] == 0.0


def test_perfect_and_unknown():
    gt = np.array([[0, 1], [1, 0]])
    assert np.all(per_class_iou(gt, gt, 2) == 1)
    all_unknown = np.full((3, 3), 4)
    rep = aggregate([(np.zeros((3, 3), int), all_unknown)], 4)
    assert np.all(np.isnan(rep.per_class_iou)) and rep.counted_pixels == 0


def test_predicted_unknown_counts_as_wrong():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 2], [1, 1]])  # UNKNOWN id 2 for C=2
    iou = per_class_iou(pred, gt, 2)
    assert iou[0] == 0.5 and iou[1] == 1.0


def test_shape_error():
    with pytest.raises(ShapeError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)), 2)


def test_aggregate_pooling():
    a = (np.array([[0, 0], [1, 1]]), np.array([[0, 0], [1, 1]]))
    single = aggregate([a], 2)
    assert np.array_equal(single.per_class_iou, per_class_iou(a[0], a[1], 2))
    dup = aggregate([a, a], 2)
    assert dup.per_class_iou == single.per_class_iou and dup.miou == single.miou


def test_pooled_differs_from_per_image():
    # image 1: class 1 absent from gt but predicted once; image 2: class 1 everywhere and right
    p1, g1 = np.array([[0, 1], [0, 0]]), np.zeros((2, 2), int)
    p2, g2 = np.ones((2, 2), int), np.ones((2, 2), int)
    pooled = aggregate([(p1, g1), (p2, g2)], 2).miou
    # pooled: IoU0 = 3/4, IoU1 = 4/5 -> 0.775 ; per image: (0.75 + 0)/2 and 1.0 -> 0.6875
    assert pooled == pytest.approx((3 / 4 + 4 / 5) / 2)
    assert mean_per_image_iou([(p1, g1), (p2, g2)], 2) == pytest.approx(((3 / 4 + 0) / 2 + 1.0) / 2)


def test_group_miou():
    per = np.array([0.5, np.nan, 0.25, 1.0])
    assert group_miou(per, {"a": [0]})["a"] == 0.5
    assert group_miou(per, {"b": [0, 1, 2]})["b"] == pytest.approx(0.375)
    assert math.isnan(group_miou(per, {"c": [1]})["c"])
    with pytest.raises(ConfigError):
        group_miou(per, {"x": [4]}, 4)


def test_group_miou_on_report():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 8, (16, 16))
    pred = np.where(rng.random((16, 16)) < 0.7, gt, rng.integers(0, 8, (16, 16)))
    groups = {"BG": [0, 3], "RIG": [1, 2], "OBJ": [4, 5, 6, 7]}
    rep = aggregate([(pred, gt)], 8, groups)
    iou = per_class_iou(pred, gt, 8)
    for name, members in groups.items():
        assert rep.group_mious[name] == pytest.approx(np.nanmean(iou[members]))


def test_entropy_map():
    one_hot = np.zeros((8, 2, 2))
    one_hot[3] = 1
    assert np.all(entropy_map(one_hot) == 0)
    assert np.allclose(entropy_map(np.full((8, 2, 2), 1 / 8)), np.log(8))


@given(st.integers(0, 2**31 - 1), st.integers(2, 5))
@settings(max_examples=30, deadline=None)
def test_iou_symmetry_and_range(seed, c):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, c, (5, 6))
    b = rng.integers(0, c, (5, 6))
    x, y = per_class_iou(a, b, c), per_class_iou(b, a, c)
    assert np.array_equal(np.isnan(x), np.isnan(y))
    assert np.allclose(x[~np.isnan(x)], y[~np.isnan(y)])
    m = aggregate([(a, b)], c).miou
    assert 0 <= m <= 1
    assert (m == 1) == bool(np.array_equal(a, b))


def test_report_serialization():
    cm = confusion(np.array([[0, 1], [1, 1]]), np.array([[0, 1], [1, 1]]), 3)
    rep = report_from_confusion(cm, {"g": [0, 1]})
    d = rep.to_dict()
    assert d["per_class_iou"][2] is None
    lines = rep.to_csv().splitlines()
    assert lines[0].split(",") == CSV_HEADER
    vals = {r.split(",")[2]: r.split(",")[3] for r in lines[1:] if r.startswith("summary")}
    assert float(vals["miou"]) == d["miou"]
    assert rep.risk == 1 - rep.miou


def test_miou_over_gt_classes():
    # class 2 is predicted but absent from gt: IoU 0, yet it does not enter the mean
    rep = aggregate([(np.array([[0, 2], [1, 1]]), np.array([[0, 0], [1, 1]]))], 3, {"x": [0, 2]})
    assert rep.per_class_iou[2] == 0.0
    assert rep.miou == pytest.approx((0.5 + 1.0) / 2)
    assert rep.group_mious["x"] == pytest.approx(0.5)


def test_retained_miou_ignores_unknown():
    gt = np.array([[0, 1], [1, 0]])
    pl = np.array([[0, 2], [1, 2]])
    assert retained_miou(pl, gt, 2) == 1.0
