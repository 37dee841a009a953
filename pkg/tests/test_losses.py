import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlkit import gradcore as gc
from mtlkit import losses as L
from mtlkit.errors import ContractViolation, DegenerateTargetError


def param_tape(**arrays):
    store = gc.ParamStore()
    for k, v in arrays.items():
        store.add(k, v)
    tape = gc.Tape(store)
    return tape, {k: tape.param(k) for k in arrays}


def test_cross_entropy_uniform_logits_is_log_classes():
    tape = gc.Tape()
    logits = tape.constant(np.zeros((5, 4, 6)))
    labels = np.random.default_rng(0).integers(0, 5, (4, 6))
    assert L.seg_cross_entropy(logits, labels).item() == pytest.approx(np.log(5), abs=1e-12)


def test_cross_entropy_frozen_value():
    logits = np.array([[[2.0, 0.0]], [[0.0, 1.0]], [[-1.0, 0.5]]])  # 3 classes, 1 x 2 image
    labels = np.array([[0, 2]])
    tape = gc.Tape()
    value = L.seg_cross_entropy(tape.constant(logits), labels).item()
    lse0 = np.log(np.exp(2) + 1 + np.exp(-1))
    lse1 = np.log(1 + np.e + np.exp(0.5))
    assert value == pytest.approx(((lse0 - 2.0) + (lse1 - 0.5)) / 2, abs=1e-14)


def test_cross_entropy_ignores_sentinel():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(3, 2, 4))
    labels = rng.integers(0, 3, (2, 4))
    masked = labels.copy()
    masked[0, :2] = 3  # sentinel defaults to the class count
    tape = gc.Tape()
    full = L.seg_cross_entropy(tape.constant(logits[:, :, 2:]), labels[:, 2:]).item()
    part = L.seg_cross_entropy(tape.constant(logits), masked).item()
    ref_rows = np.concatenate([logits[:, 0, 2:], logits[:, 1, :]], axis=1)
    ref_lab = np.concatenate([labels[0, 2:], labels[1]])
    ref = np.mean(np.log(np.exp(ref_rows).sum(0)) - ref_rows[ref_lab, np.arange(len(ref_lab))])
    assert part == pytest.approx(ref, abs=1e-13)
    assert full != part


def test_cross_entropy_all_ignored_raises():
    with pytest.raises(DegenerateTargetError):
        L.seg_cross_entropy(gc.Tape().constant(np.zeros((2, 2, 2))), np.full((2, 2), 2))


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ContractViolation):
        L.seg_cross_entropy(gc.Tape().constant(np.zeros((2, 2, 2))), np.full((2, 2), 5), ignore_index=9)


def test_codebook_geometry():
    book = L.build_codebook(20)
    c = book.codes
    assert c.shape == (20, 3)
    np.testing.assert_allclose(np.linalg.norm(c, axis=1), 1.0, atol=1e-12)
    assert np.all(c[:, 2] > 0)
    angles = [np.degrees(np.arccos(np.clip(c[i] @ c[j], -1, 1))) for i, j in itertools.combinations(range(20), 2)]
    assert min(angles) > 10.0
    np.testing.assert_array_equal(L.build_codebook(20).codes, c)


def test_codebook_first_code_frozen():
    c = L.build_codebook(20).codes[0]
    np.testing.assert_allclose(c, [np.sqrt(1 - 0.975 ** 2), 0.0, 0.975], atol=1e-15)


def test_assign_codes_exact_and_tie_break():
    book = L.NormalCodebook(np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]]))
    n = np.array([[0.0, 0, 1], [1 / np.sqrt(2), 1 / np.sqrt(2), 0]]).T.reshape(3, 1, 2)
    np.testing.assert_array_equal(L.assign_codes(n, book), [[2, 0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_assign_codes_picks_max_dot(seed):
    rng = np.random.default_rng(seed)
    book = L.build_codebook(20)
    v = rng.normal(size=(3, 4, 5))
    v[2] = np.abs(v[2])
    v /= np.linalg.norm(v, axis=0)
    idx = L.assign_codes(v, book)
    dots = np.einsum("kc,chw->khw", book.codes, v)
    np.testing.assert_array_equal(np.take_along_axis(dots, idx[None], 0)[0], dots.max(0))


def test_assign_codes_rejects_non_unit():
    with pytest.raises(ContractViolation):
        L.assign_codes(np.ones((3, 2, 2)), L.build_codebook(4))


def test_normal_loss_normalized_by_pixels():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(6, 2, 3))
    codes = rng.integers(0, 6, (2, 3))
    tape = gc.Tape()
    small = L.normal_codebook_loss(tape.constant(logits), codes).item()
    big = L.normal_codebook_loss(tape.constant(np.tile(logits, (1, 2, 2))), np.tile(codes, (2, 2))).item()
    assert big == pytest.approx(small, rel=1e-13)


def test_disparity_head_range_and_default():
    tape = gc.Tape()
    d = L.disparity_head(tape.constant(np.array([-30.0, 0.0, 30.0])), 16.0).data
    assert np.all((d > 0) & (d < 16.0))
    assert d[1] == 8.0
    assert L.default_d_max(64) == 16.0


def test_bilinear_warp_integer_shift():
    rng = np.random.default_rng(5)
    right = rng.uniform(size=(3, 2, 6))
    tape = gc.Tape()
    out = L.bilinear_warp(tape.constant(right), tape.constant(np.full((1, 2, 6), 2.0))).data
    np.testing.assert_array_equal(out[:, :, 2:], right[:, :, :-2])
    np.testing.assert_array_equal(out[:, :, :2], np.repeat(right[:, :, :1], 2, axis=2))


def test_bilinear_warp_rejects_negative():
    tape = gc.Tape()
    with pytest.raises(ContractViolation):
        L.bilinear_warp(tape.constant(np.ones((1, 2, 2))), tape.constant(np.full((1, 2, 2), -0.5)))


def test_recon_loss_normalizer_counts_valid_pixels_times_channels():
    left = np.zeros((2, 1, 3))
    right = np.zeros((2, 1, 3))
    left[:, 0, 0] = 1.0  # error of 1 in both channels at pixel 0
    valid = np.array([[True, True, False]])
    tape = gc.Tape()
    loss = L.depth_recon_loss(L.StereoPair(left, right, valid), tape.constant(np.full((1, 1, 3), 0.5))).item()
    assert loss == pytest.approx(2.0 / 4.0, abs=1e-15)


def test_recon_loss_empty_mask():
    pair = L.StereoPair(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(DegenerateTargetError):
        L.depth_recon_loss(pair, gc.Tape().constant(np.ones((1, 2, 2))))


def test_depth_from_disparity():
    d = np.array([1.0, 2.0, 4.0])
    np.testing.assert_array_equal(L.depth_from_disparity(d, 64.0, 0.1), 6.4 / d)
    with pytest.raises(ContractViolation):
        L.depth_from_disparity(np.array([0.0]), 1.0, 1.0)


def test_supervised_depth_l2_frozen():
    tape = gc.Tape()
    pred = tape.constant(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    gt = np.array([[[1.5, 2.0], [1.0, 4.0]]])
    mask = np.array([[True, True], [False, True]])
    assert L.supervised_depth_l2(pred, gt, mask).item() == pytest.approx(0.25 / 3, abs=1e-15)


# gradient checks for every loss


def test_seg_loss_gradient():
    rng = np.random.default_rng(11)
    tape, p = param_tape(z=rng.normal(size=(2, 4, 3, 3)))
    labels = rng.integers(0, 5, (2, 3, 3))  # label 4 is the ignore sentinel
    assert gc.finite_diff_check(tape, L.seg_cross_entropy(p["z"], labels)).passed


def test_normal_loss_gradient():
    rng = np.random.default_rng(12)
    tape, p = param_tape(z=rng.normal(size=(2, 6, 3, 3)))
    assert gc.finite_diff_check(tape, L.normal_codebook_loss(p["z"], rng.integers(0, 6, (2, 3, 3)))).passed


def test_recon_loss_gradient():
    rng = np.random.default_rng(13)
    raw = rng.normal(size=(2, 1, 4, 8))
    tape, p = param_tape(raw=raw)
    d = L.disparity_head(p["raw"], 3.0)
    pair = L.StereoPair(rng.uniform(size=(2, 3, 4, 8)), rng.uniform(size=(2, 3, 4, 8)), rng.uniform(size=(2, 4, 8)) > 0.3)
    report = gc.finite_diff_check(tape, L.depth_recon_loss(pair, d))
    assert report.passed, str(report)


def test_supervised_depth_gradient():
    rng = np.random.default_rng(14)
    tape, p = param_tape(raw=rng.normal(size=(2, 1, 3, 3)))
    pred = L.depth_from_disparity(L.disparity_head(p["raw"], 4.0), 4.0, 0.5)
    loss = L.supervised_depth_l2(pred, rng.uniform(1, 3, (2, 1, 3, 3)), rng.uniform(size=(2, 3, 3)) > 0.2)
    assert gc.finite_diff_check(tape, loss).passed
