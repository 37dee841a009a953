import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlkit import losses as L
from mtlkit import metrics as M
from mtlkit.errors import ContractViolation, DegenerateTargetError


def brute_confusion(pred, gt, s):
    cm = np.zeros((s, s), dtype=np.int64)
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g != s:
            cm[g, p] += 1
    return cm


def brute_miou(cm):
    ious = []
    for c in range(len(cm)):
        tp = cm[c, c]
        union = cm[c, :].sum() + cm[:, c].sum() - tp
        if union > 0:
            ious.append(tp / union)
    return float(np.mean(ious))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_confusion_and_miou_match_brute_force(seed, s):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, s, (8, 8))
    gt = rng.integers(0, s + 1, (8, 8))
    gt[0, 0] = 0
    cm = M.confusion(pred, gt, s)
    np.testing.assert_array_equal(cm, brute_confusion(pred, gt, s))
    assert M.miou(cm) == brute_miou(cm)


def test_miou_only_over_present_classes():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 0], [1, 0]])
    cm = M.confusion(pred, gt, 4)
    assert M.miou(cm) == pytest.approx((2 / 3 + 1 / 2) / 2)
    assert M.pixel_accuracy(cm) == 0.75


def test_confusion_range_checks():
    with pytest.raises(ContractViolation):
        M.confusion(np.array([5]), np.array([0]), 3)
    with pytest.raises(ContractViolation):
        M.confusion(np.zeros((2, 2)), np.zeros((2, 3)), 3)
    with pytest.raises(DegenerateTargetError):
        M.miou(np.zeros((3, 3)))


def test_depth_errors_frozen():
    pred = np.array([[[1.0, 2.0], [3.0, 8.0]]])
    gt = np.array([[[2.0, 2.0], [3.0, 4.0]]])
    mask = np.array([[True, True], [True, False]])
    rmse, rel = M.depth_errors(pred, gt, mask)
    assert rmse == pytest.approx(np.sqrt(1 / 3))
    assert rel == pytest.approx(0.5 / 3)
    with pytest.raises(DegenerateTargetError):
        M.depth_errors(pred, gt, np.zeros((2, 2), bool))


def test_normal_angle_error_with_codes():
    book = L.NormalCodebook(np.array([[0, 0, 1.0], [1.0, 0, 0]]))
    gt = np.zeros((3, 1, 2))
    gt[2] = 1.0
    assert M.normal_angle_error(np.array([[0, 1]]), gt, book) == pytest.approx(45.0)
    assert M.normal_angle_error(np.array([[0, 0]]), gt, book) == 0.0


def test_delta_m_identity_and_hand_example():
    r = M.MetricReport(miou=0.5, depth_rmse=0.2, normal_mean_angle=30.0)
    assert M.delta_m(r, r).value == 0.0
    m = M.MetricReport(miou=0.55, depth_rmse=0.18, normal_mean_angle=33.0)
    assert abs(M.delta_m(m, r).value - (-10 / 3)) <= 1e-9


def test_delta_m_needs_all_terms():
    with pytest.raises(ContractViolation):
        M.delta_m(M.MetricReport(miou=0.5), M.MetricReport(miou=0.5))


def test_report_json_round_trip_and_ranges():
    r = M.MetricReport(miou=0.25, pixel_acc=0.5, depth_rmse=1.0, loss_seg=0.3)
    back = M.MetricReport.from_json(r.to_json())
    assert back == r
    assert set(r.to_dict()) == {"miou", "pixel_acc", "depth_rmse", "depth_abs_rel", "normal_mean_angle",
                                "loss_seg", "loss_depth", "loss_normal"}
    with pytest.raises(ContractViolation):
        M.MetricReport(miou=1.5).check_ranges()
