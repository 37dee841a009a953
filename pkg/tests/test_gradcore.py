import numpy as np
import pytest

from mtlkit import gradcore as gc
from mtlkit.errors import ContractViolation, NumericError


def scalarize(tape, y, seed=0):
    """Random linear functional of y so every output entry matters."""
    w = np.random.default_rng(seed).normal(size=y.shape)
    return gc.total(gc.mul(y, tape.constant(w)))


def build(params, fn):
    store = gc.ParamStore()
    for name, value in params.items():
        store.add(name, value)
    tape = gc.Tape(store)
    ins = {name: tape.param(name) for name in params}
    return tape, scalarize(tape, fn(tape, ins))


def conv_reference(x, w, b, stride):
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, o, h // stride, wd // stride))
    for i in range(h // stride):
        for j in range(wd // stride):
            patch = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w)
    return out + (0 if b is None else b[None, :, None, None])


def away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(-1, 1, shape)
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-9) * margin, x)


PRIMITIVE_CASES = {
    "matmul": ({"a": (3, 4), "b": (4, 5)}, lambda t, p: gc.matmul(p["a"], p["b"])),
    "matmul_channels": ({"a": (3, 4), "b": (2, 4, 3, 3)}, lambda t, p: gc.matmul(p["a"], p["b"])),
    "conv_s1": ({"x": (2, 3, 6, 6), "w": (4, 3, 3, 3), "b": (4,)}, lambda t, p: gc.conv2d(p["x"], p["w"], p["b"])),
    "conv_s2": ({"x": (2, 3, 6, 8), "w": (2, 3, 3, 3)}, lambda t, p: gc.conv2d(p["x"], p["w"], stride=2)),
    "relu": ({"x": (2, 3, 4, 4)}, lambda t, p: gc.relu(p["x"])),
    "sigmoid": ({"x": (2, 3, 4, 4)}, lambda t, p: gc.sigmoid(p["x"])),
    "exp": ({"x": (5,)}, lambda t, p: gc.exp(p["x"])),
    "add": ({"x": (2, 3, 4, 4), "y": (3, 1, 1)}, lambda t, p: gc.add(p["x"], p["y"])),
    "mul": ({"x": (2, 3, 4, 4), "y": (3, 1, 1)}, lambda t, p: gc.mul(p["x"], p["y"])),
    "scale": ({"x": (2, 3)}, lambda t, p: gc.scale(p["x"], -2.5)),
    "concat": ({"x": (2, 2, 4, 4), "y": (2, 3, 4, 4)}, lambda t, p: gc.concat([p["x"], p["y"]])),
    "avgpool": ({"x": (2, 3, 4, 6)}, lambda t, p: gc.avgpool(p["x"], (2, 3))),
    "upsample": ({"x": (2, 3, 3, 4)}, lambda t, p: gc.upsample(p["x"])),
    "channelnorm": ({"x": (3, 4, 3, 3), "g": (4,), "b": (4,)},
                    lambda t, p: gc.channelnorm(p["x"], p["g"], p["b"])),
    "mean": ({"x": (3, 4)}, lambda t, p: gc.mean(p["x"])),
    "sum": ({"x": (3, 4)}, lambda t, p: gc.total(p["x"])),
    "log_softmax": ({"x": (2, 5, 3, 3)}, lambda t, p: gc.log_softmax(p["x"], axis=1)),
}


@pytest.mark.parametrize("case", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(case):
    shapes, fn = PRIMITIVE_CASES[case]
    rng = np.random.default_rng(7)
    params = {k: away_from_zero(rng, s) for k, s in shapes.items()}
    tape, root = build(params, fn)
    report = gc.finite_diff_check(tape, root)
    assert report.passed, str(report)
    assert report.checked > 0


def test_reciprocal_gradient():
    rng = np.random.default_rng(3)
    tape, root = build({"x": rng.uniform(0.5, 2.0, (4, 3))}, lambda t, p: gc.reciprocal(p["x"]))
    assert gc.finite_diff_check(tape, root).passed


def test_warp_gradient_off_integer():
    rng = np.random.default_rng(4)
    img = rng.uniform(0, 1, (2, 3, 4, 8))
    d = rng.uniform(0.1, 2.9, (2, 1, 4, 8))
    d = np.where(np.abs(d - np.round(d)) < 0.05, d + 0.1, d)
    tape, root = build({"img": img, "d": d}, lambda t, p: gc.warp(p["img"], p["d"]))
    report = gc.finite_diff_check(tape, root)
    assert report.passed, str(report)


def test_conv_matches_brute_force(rng):
    x = rng.normal(size=(2, 3, 6, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    tape = gc.Tape()
    for stride in (1, 2):
        out = gc.conv2d(tape.constant(x), tape.constant(w), tape.constant(b) if stride == 1 else None, stride)
        ref = conv_reference(x, w, b if stride == 1 else None, stride)
        np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-12)


def test_conv_frozen_value():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    w = np.ones((1, 1, 3, 3))
    tape = gc.Tape()
    out = gc.conv2d(tape.constant(x), tape.constant(w)).data[0, 0]
    # interior sums of 3x3 neighbourhoods, zero padded at the border
    expected = np.array([[10, 18, 24, 18], [27, 45, 54, 39], [51, 81, 90, 63], [42, 66, 72, 50]], dtype=float)
    np.testing.assert_array_equal(out, expected)


def test_relu_subgradient_at_zero_is_zero():
    store = gc.ParamStore()
    store.add("x", np.array([-1.0, 0.0, 2.0]))
    tape = gc.Tape(store)
    g = gc.backward(tape, gc.total(gc.relu(tape.param("x"))))
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_relu_kink_is_flagged_and_excluded():
    store = gc.ParamStore()
    store.add("x", np.array([0.0, 1.0, -1.0]))
    tape = gc.Tape(store)
    report = gc.finite_diff_check(tape, gc.total(gc.relu(tape.param("x"))))
    assert report.kinks["x"] == 1
    assert report.checked == 2
    assert report.passed


def test_warp_integer_offset_uses_left_cell():
    row = np.array([0.0, 1.0, 4.0, 9.0, 16.0])
    img = row.reshape(1, 1, 1, 5)
    store = gc.ParamStore()
    store.add("d", np.full((1, 1, 1, 5), 1.0))
    tape = gc.Tape(store)
    out = gc.warp(tape.constant(img), tape.param("d"))
    np.testing.assert_array_equal(out.data[0, 0, 0], [0.0, 0.0, 1.0, 4.0, 9.0])
    g = gc.backward(tape, gc.total(out))
    # d/dd of value at x - d with the cell [x - d - 1, x - d]: -(v[x-d] - v[x-d-1]);
    # x = 1 lands on position 0, at the clamped edge
    np.testing.assert_array_equal(g, [0.0, 0.0, -1.0, -3.0, -5.0])


def test_warp_clamps_at_edge():
    img = np.arange(4, dtype=float).reshape(1, 1, 1, 4)
    d = np.full((1, 1, 1, 4), 10.0)
    tape = gc.Tape()
    out = gc.warp(tape.constant(img), tape.constant(d))
    np.testing.assert_array_equal(out.data, np.zeros((1, 1, 1, 4)))


def test_unreached_parameters_get_zero():
    store = gc.ParamStore()
    store.add("a", np.ones(2))
    store.add("b", np.ones(3))
    tape = gc.Tape(store)
    tape.param("b")
    g = gc.backward(tape, gc.total(gc.scale(tape.param("a"), 3.0)))
    np.testing.assert_array_equal(g, [3, 3, 0, 0, 0])


def test_backward_requires_scalar_root():
    store = gc.ParamStore()
    store.add("a", np.ones(2))
    tape = gc.Tape(store)
    with pytest.raises(ContractViolation):
        gc.backward(tape, tape.param("a"))


def test_shape_mismatch_raises():
    tape = gc.Tape()
    with pytest.raises(ContractViolation):
        gc.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))
    with pytest.raises(ContractViolation):
        gc.conv2d(tape.constant(np.ones((1, 2, 4, 4))), tape.constant(np.ones((1, 3, 3, 3))))


def test_non_finite_forward_raises():
    tape = gc.Tape()
    with pytest.raises(NumericError):
        gc.exp(tape.constant(np.array([1000.0])))


def test_param_store_layout_and_flat_roundtrip(rng):
    store = gc.ParamStore()
    store.add("a", rng.normal(size=(2, 2)), "shared")
    store.add("b", rng.normal(size=3), "head:seg")
    assert store.size == 7
    assert store.offsets() == {"a": (0, 4), "b": (4, 7)}
    np.testing.assert_array_equal(store.group_index(lambda g: g == "shared"), np.arange(4))
    flat = store.flat()
    store.set_flat(flat * 2)
    np.testing.assert_array_equal(store.flat(), flat * 2)
    with pytest.raises(ContractViolation):
        store["a"] = np.zeros(3)


def test_channelnorm_normalizes_per_channel(rng):
    x = rng.normal(3.0, 2.0, size=(4, 3, 5, 5))
    tape = gc.Tape()
    y = gc.channelnorm(tape.constant(x), tape.constant(np.ones(3)), tape.constant(np.zeros(3))).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, rtol=1e-4)


def test_log_softmax_normalizes(rng):
    x = rng.normal(size=(2, 4, 3, 3)) * 50
    y = gc.log_softmax(gc.Tape().constant(x), axis=1).data
    np.testing.assert_allclose(np.exp(y).sum(axis=1), 1.0, rtol=0, atol=1e-12)
