"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` is built fresh for every evaluation (define-by-run). Each
primitive application appends one record holding the primitive kind, the
ids of its inputs, its attributes and whatever activations the adjoint
needs. :func:`backward` walks the records in reverse and returns a flat
gradient over the parameters of the tape's :class:`ParamStore`.

Because records keep their attributes and constants, a tape can also be
replayed with perturbed parameter values, which is what
:func:`finite_diff_check` does.

Shape rules (``N`` batch, ``C`` channels; image tensors may also be given
without the batch axis, i.e. ``C x H x W``):

============== ======================================= =======================
kind           inputs                                  output
============== ======================================= =======================
matmul         A (m,k), B (k,n) | B (N,k,H,W)          (m,n) | (N,m,H,W)
conv2d         x (N,C,H,W), w (O,C,3,3)[, b (O,)]      (N,O,H/s,W/s), pad 1
relu/sigmoid   x                                       same as x
exp/reciprocal x                                       same as x
add/mul        a, b (numpy broadcasting)               broadcast shape
scale          x, attr factor                          same as x
concat         x1..xn (N,Ci,H,W)                       (N,sum Ci,H,W)
avgpool        x (...,H,W), attr kernel (kh,kw)        (...,H/kh,W/kw)
upsample       x (...,h,w), attr factor (fh,fw)        (...,h*fh,w*fw)
warp           img (...,C,H,W), d (...,1,H,W)          same as img
channelnorm    x (N,C,H,W), gamma (C,), beta (C,)      same as x
mean/sum       x                                       scalar, shape ()
log_softmax    x, attr axis                            same as x
============== ======================================= =======================
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NumericError

DTYPE = np.float64
CHANNELNORM_EPS = 1e-5


class ParamStore:
    """Ordered registry of named parameter arrays.

    The order of registration fixes the layout of every flat gradient vector.
    Each parameter carries a group tag ("shared", "head:seg", "uw", ...).
    """

    def __init__(self):
        self._arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        self._groups: dict[str, str] = {}

    def add(self, name: str, array, group: str = "shared") -> None:
        if name in self._arrays:
            raise ContractViolation(f"parameter {name!r} already registered")
        self._arrays[name] = np.array(array, dtype=DTYPE)
        self._groups[name] = group

    def __contains__(self, name):
        return name in self._arrays

    def __getitem__(self, name) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name, value):
        arr = self._arrays[name]
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != arr.shape:
            raise ContractViolation(f"{name}: shape {value.shape} != {arr.shape}")
        self._arrays[name] = value.copy()

    def names(self) -> list[str]:
        return list(self._arrays)

    def group(self, name: str) -> str:
        return self._groups[name]

    def items(self):
        return self._arrays.items()

    @property
    def size(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def offsets(self) -> dict[str, tuple[int, int]]:
        out, start = {}, 0
        for name, arr in self._arrays.items():
            out[name] = (start, start + arr.size)
            start += arr.size
        return out

    def group_index(self, predicate) -> np.ndarray:
        """Flat indices of all parameters whose group satisfies ``predicate``."""
        idx = []
        for name, (a, b) in self.offsets().items():
            if predicate(self._groups[name]):
                idx.append(np.arange(a, b))
        return np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=DTYPE)
        if vec.shape != (self.size,):
            raise ContractViolation(f"flat vector length {vec.shape} != ({self.size},)")
        for name, (a, b) in self.offsets().items():
            self._arrays[name] = vec[a:b].reshape(self._arrays[name].shape).copy()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, arr in self._arrays.items():
            out.add(name, arr.copy(), self._groups[name])
        return out


class Tensor:
    """Handle to one value recorded on a tape."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", id_: int):
        self.tape = tape
        self.id = id_

    @property
    def data(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.requires[self.id]

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape})"

    # operator sugar keeps loss code readable
    def __add__(self, other):
        return add(self, _lift(self.tape, other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_lift(self.tape, other))


def _lift(tape, value):
    if isinstance(value, Tensor):
        return value
    return tape.constant(np.full((), value, dtype=DTYPE))


@dataclass
class Record:
    kind: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict
    saved: object = None


@dataclass
class Tape:
    """Ordered list of primitive records plus the values they produced."""

    store: ParamStore | None = None
    records: list[Record] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    requires: list[bool] = field(default_factory=list)
    param_ids: dict[str, int] = field(default_factory=dict)
    producer: dict[int, int] = field(default_factory=dict)

    def _leaf(self, array, requires) -> Tensor:
        self.values.append(array)
        self.requires.append(requires)
        return Tensor(self, len(self.values) - 1)

    def constant(self, array) -> Tensor:
        return self._leaf(np.asarray(array, dtype=DTYPE), False)

    def param(self, name: str) -> Tensor:
        if self.store is None or name not in self.store:
            raise ContractViolation(f"parameter {name!r} is not registered")
        if name not in self.param_ids:
            t = self._leaf(self.store[name], True)
            self.param_ids[name] = t.id
        return Tensor(self, self.param_ids[name])

    def replay(self, overrides: dict[str, np.ndarray]):
        """Re-run every record with some parameter values replaced.

        Returns the list of values and, for kinked primitives, the branch
        pattern each record took (used to detect non-differentiable points).
        """
        values = list(self.values)
        for name, arr in overrides.items():
            values[self.param_ids[name]] = arr
        branches = []
        for rec in self.records:
            prim = PRIMITIVES[rec.kind]
            xs = [values[i] for i in rec.inputs]
            out, saved = prim.forward(xs, rec.attrs)
            values[rec.output] = out
            if prim.kinked:
                branches.append(prim.branch(xs, rec.attrs, saved))
        return values, branches


class Primitive:
    kinked = False

    def check(self, xs, attrs):
        pass

    def forward(self, xs, attrs):
        raise NotImplementedError

    def backward(self, g, xs, out, saved, attrs, needs):
        raise NotImplementedError

    def branch(self, xs, attrs, saved):
        return None


PRIMITIVES: dict[str, Primitive] = {}


def primitive(kind):
    def deco(cls):
        PRIMITIVES[kind] = cls()
        return cls
    return deco


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _shapes(xs):
    return ", ".join(str(tuple(x.shape)) for x in xs)


@primitive("matmul")
class MatMul(Primitive):
    def check(self, xs, attrs):
        a, b = xs
        ok = a.ndim == 2 and (
            (b.ndim == 2 and a.shape[1] == b.shape[0])
            or (b.ndim == 4 and a.shape[1] == b.shape[1])
        )
        if not ok:
            raise ContractViolation(f"matmul: incompatible shapes {_shapes(xs)}")

    def forward(self, xs, attrs):
        a, b = xs
        if b.ndim == 2:
            return a @ b, None
        return np.einsum("mk,nkhw->nmhw", a, b, optimize=True), None

    def backward(self, g, xs, out, saved, attrs, needs):
        a, b = xs
        if b.ndim == 2:
            return [g @ b.T if needs[0] else None, a.T @ g if needs[1] else None]
        ga = np.einsum("nmhw,nkhw->mk", g, b, optimize=True) if needs[0] else None
        gb = np.einsum("mk,nmhw->nkhw", a, g, optimize=True) if needs[1] else None
        return [ga, gb]


def _tap_offsets(wp):
    return [i * wp + j for i in range(3) for j in range(3)]


def _shift_stack(u, shifts, length):
    out = np.empty((len(shifts), u.shape[0], length), dtype=DTYPE)
    for k, s in enumerate(shifts):
        out[k] = u[:, s:s + length]
    return out


@primitive("conv2d")
class Conv2d(Primitive):
    """3x3 convolution, zero padding 1, stride 1 or 2.

    Stride 1 works on a channel-major flat copy of the padded input, where a
    kernel tap is a constant offset. Either the taps are stacked into one
    GEMM and the outputs shift-summed, or the shifted inputs are stacked;
    whichever side has fewer channels gets stacked. Stride 2 uses im2col on
    the quarter-size output grid.
    """

    def check(self, xs, attrs):
        x, w = xs[0], xs[1]
        stride = attrs.get("stride", 1)
        ok = (
            x.ndim == 4 and w.ndim == 4 and w.shape[2:] == (3, 3)
            and w.shape[1] == x.shape[1] and stride in (1, 2)
            and (len(xs) == 2 or xs[2].shape == (w.shape[0],))
        )
        if ok and stride == 2:
            ok = x.shape[2] % 2 == 0 and x.shape[3] % 2 == 0
        if not ok:
            raise ContractViolation(f"conv2d: incompatible shapes {_shapes(xs)} stride={stride}")

    def forward(self, xs, attrs):
        if attrs.get("stride", 1) == 2:
            return self._forward_s2(xs)
        x, w = xs[0], xs[1]
        n, c, h, wd = x.shape
        o = w.shape[0]
        hp, wp = h + 2, wd + 2
        total = n * hp * wp
        xf = np.zeros((c, n, hp, wp), dtype=DTYPE)
        xf[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
        xf = xf.reshape(c, total)
        offs = _tap_offsets(wp)
        span = total - offs[-1]
        acc = np.zeros((o, total), dtype=DTYPE)
        x9 = None
        if o < c:
            # one GEMM for all taps, then shifted accumulation of o-row blocks
            z = (w.transpose(2, 3, 0, 1).reshape(9 * o, c) @ xf).reshape(9, o, total)
            for k, off in enumerate(offs):
                acc[:, :span] += z[k, :, off:off + span]
        else:
            x9 = _shift_stack(xf, offs, span)
            acc[:, :span] = w.transpose(0, 2, 3, 1).reshape(o, 9 * c) @ x9.reshape(9 * c, span)
        out = acc.reshape(o, n, hp, wp)[:, :, :h, :wd]
        if len(xs) == 3:
            out = out + xs[2][:, None, None, None]
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), (xf, x9)

    def backward(self, g, xs, out, saved, attrs, needs):
        if attrs.get("stride", 1) == 2:
            return self._backward_s2(g, xs, saved, needs)
        x, w = xs[0], xs[1]
        xf, x9 = saved
        n, c, h, wd = x.shape
        o = w.shape[0]
        hp, wp = h + 2, wd + 2
        total = n * hp * wp
        offs = _tap_offsets(wp)
        lead = offs[-1]
        span = total - lead
        # gradient laid out on the flat padded grid, preceded by `lead` zeros
        gpad = np.zeros((o, lead + total), dtype=DTYPE)
        gpad[:, lead:].reshape(o, n, hp, wp)[:, :, :h, :wd] = g.transpose(1, 0, 2, 3)
        back = [lead - off for off in offs]
        grads = [None, None] + ([None] if len(xs) == 3 else [])
        g9 = None
        if needs[0]:
            if c < o:
                z = (w.transpose(2, 3, 1, 0).reshape(9 * c, o) @ gpad).reshape(9, c, lead + total)
                dx = z[0, :, back[0]:back[0] + total].copy()
                for k in range(1, 9):
                    dx += z[k, :, back[k]:back[k] + total]
            else:
                g9 = _shift_stack(gpad, back, total)
                dx = w.transpose(1, 2, 3, 0).reshape(c, 9 * o) @ g9.reshape(9 * o, total)
            dx = dx.reshape(c, n, hp, wp)[:, :, 1:-1, 1:-1]
            grads[0] = np.ascontiguousarray(dx.transpose(1, 0, 2, 3))
        if needs[1]:
            if x9 is not None:
                gw = gpad[:, lead:lead + span] @ x9.reshape(9 * c, span).T
                grads[1] = gw.reshape(o, 3, 3, c).transpose(0, 3, 1, 2)
            else:
                if g9 is None:
                    g9 = _shift_stack(gpad, back, total)
                gw = g9.reshape(9 * o, total) @ xf.T
                grads[1] = gw.reshape(3, 3, o, c).transpose(2, 3, 0, 1)
            grads[1] = np.ascontiguousarray(grads[1])
        if len(xs) == 3 and needs[2]:
            grads[2] = g.sum(axis=(0, 2, 3))
        return grads

    def _forward_s2(self, xs):
        x, w = xs[0], xs[1]
        n, c, h, wd = x.shape
        o = w.shape[0]
        ho, wo = h // 2, wd // 2
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::2, ::2]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * 9)
        out = cols @ w.reshape(o, c * 9).T
        if len(xs) == 3:
            out += xs[2]
        out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), cols

    def _backward_s2(self, g, xs, cols, needs):
        x, w = xs[0], xs[1]
        n, c, h, wd = x.shape
        o = w.shape[0]
        ho, wo = h // 2, wd // 2
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        grads = [None, None] + ([None] if len(xs) == 3 else [])
        if needs[1]:
            grads[1] = (g2.T @ cols).reshape(w.shape)
        if len(xs) == 3 and needs[2]:
            grads[2] = g2.sum(axis=0)
        if needs[0]:
            dcols = (g2 @ w.reshape(o, c * 9)).reshape(n, ho, wo, c, 3, 3)
            dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros((n, c, h + 2, wd + 2), dtype=DTYPE)
            for i in range(3):
                for j in range(3):
                    dxp[:, :, i:i + 2 * ho:2, j:j + 2 * wo:2] += dcols[:, :, i, j]
            grads[0] = dxp[:, :, 1:-1, 1:-1]
        return grads


@primitive("relu")
class Relu(Primitive):
    kinked = True

    def forward(self, xs, attrs):
        return np.maximum(xs[0], 0.0), None

    def backward(self, g, xs, out, saved, attrs, needs):
        # subgradient at exactly 0 is 0
        return [g * (xs[0] > 0)]

    def branch(self, xs, attrs, saved):
        x = xs[0]
        return np.sign(x)


@primitive("sigmoid")
class Sigmoid(Primitive):
    def forward(self, xs, attrs):
        x = xs[0]
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)), None

    def backward(self, g, xs, out, saved, attrs, needs):
        return [g * out * (1.0 - out)]


@primitive("exp")
class Exp(Primitive):
    def forward(self, xs, attrs):
        with np.errstate(over="ignore"):
            return np.exp(xs[0]), None

    def backward(self, g, xs, out, saved, attrs, needs):
        return [g * out]


@primitive("reciprocal")
class Reciprocal(Primitive):
    def check(self, xs, attrs):
        if np.any(xs[0] == 0):
            raise NumericError("reciprocal: zero input")

    def forward(self, xs, attrs):
        return 1.0 / xs[0], None

    def backward(self, g, xs, out, saved, attrs, needs):
        return [-g * out * out]


@primitive("add")
class Add(Primitive):
    def check(self, xs, attrs):
        try:
            np.broadcast_shapes(xs[0].shape, xs[1].shape)
        except ValueError:
            raise ContractViolation(f"add: incompatible shapes {_shapes(xs)}") from None

    def forward(self, xs, attrs):
        return xs[0] + xs[1], None

    def backward(self, g, xs, out, saved, attrs, needs):
        return [
            _unbroadcast(g, xs[0].shape) if needs[0] else None,
            _unbroadcast(g, xs[1].shape) if needs[1] else None,
        ]


@primitive("mul")
class Mul(Add):
    def check(self, xs, attrs):
        try:
            np.broadcast_shapes(xs[0].shape, xs[1].shape)
        except ValueError:
            raise ContractViolation(f"mul: incompatible shapes {_shapes(xs)}") from None

    def forward(self, xs, attrs):
        return xs[0] * xs[1], None

    def backward(self, g, xs, out, saved, attrs, needs):
        a, b = xs
        return [
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        ]


@primitive("scale")
class Scale(Primitive):
    def forward(self, xs, attrs):
        return xs[0] * attrs["factor"], None

    def backward(self, g, xs, out, saved, attrs, needs):
        return [g * attrs["factor"]]


@primitive("concat")
class Concat(Primitive):
    def check(self, xs, attrs):
        first = xs[0].shape
        if any(x.ndim != 4 or x.shape[0] != first[0] or x.shape[2:] != first[2:] for x in xs):
            raise ContractViolation(f"concat: incompatible shapes {_shapes(xs)}")

    def forward(self, xs, attrs):
        return np.concatenate(xs, axis=1), None

    def backward(self, g, xs, out, saved, attrs, needs):
        grads, start = [], 0
        for x, need in zip(xs, needs):
            stop = start + x.shape[1]
            grads.append(g[:, start:stop] if need else None)
            start = stop
        return grads


@primitive("avgpool")
class AvgPool(Primitive):
    def check(self, xs, attrs):
        kh, kw = attrs["kernel"]
        x = xs[0]
        if x.ndim < 2 or x.shape[-2] % kh or x.shape[-1] % kw:
            raise ContractViolation(f"avgpool: shape {x.shape} not divisible by kernel {(kh, kw)}")

    def forward(self, xs, attrs):
        x = xs[0]
        kh, kw = attrs["kernel"]
        h, w = x.shape[-2:]
        r = x.reshape(x.shape[:-2] + (h // kh, kh, w // kw, kw))
        return r.mean(axis=(-3, -1)), None

    def backward(self, g, xs, out, saved, attrs, needs):
        kh, kw = attrs["kernel"]
        up = np.repeat(np.repeat(g, kh, axis=-2), kw, axis=-1)
        return [up / (kh * kw)]


@primitive("upsample")
class Upsample(Primitive):
    """Nearest-neighbour upsampling by integer factors (default 2x2)."""

    def forward(self, xs, attrs):
        fh, fw = attrs.get("factor", (2, 2))
        return np.repeat(np.repeat(xs[0], fh, axis=-2), fw, axis=-1), None

    def backward(self, g, xs, out, saved, attrs, needs):
        fh, fw = attrs.get("factor", (2, 2))
        h, w = xs[0].shape[-2:]
        r = g.reshape(g.shape[:-2] + (h, fh, w, fw))
        return [r.sum(axis=(-3, -1))]


@primitive("warp")
class Warp(Primitive):
    """Horizontal linear resampling: out(x) = img(x - d(x)), edge clamped.

    At integer sample positions the interpolation cell to the left is used,
    so the derivative w.r.t. ``d`` there is ``img[x] - img[x-1]``.
    """

    kinked = True

    def check(self, xs, attrs):
        img, d = xs
        ok = (
            img.ndim == d.ndim and img.ndim >= 3 and d.shape[-3] == 1
            and d.shape[-2:] == img.shape[-2:] and d.shape[:-3] == img.shape[:-3]
        )
        if not ok:
            raise ContractViolation(f"warp: incompatible shapes {_shapes(xs)}")

    def forward(self, xs, attrs):
        img, d = xs
        w = img.shape[-1]
        grid = np.arange(w, dtype=DTYPE)
        pos = grid - d
        inside = pos > 0.0
        pos = np.clip(pos, 0.0, w - 1)
        x0 = np.clip(np.ceil(pos).astype(np.int64) - 1, 0, max(w - 2, 0))
        x1 = np.minimum(x0 + 1, w - 1)
        t = pos - x0
        shape = img.shape
        i0 = np.broadcast_to(x0, shape)
        i1 = np.broadcast_to(x1, shape)
        v0 = np.take_along_axis(img, i0, axis=-1)
        v1 = np.take_along_axis(img, i1, axis=-1)
        out = (1.0 - t) * v0 + t * v1
        return out, (x0, x1, t, inside, v0, v1)

    def backward(self, g, xs, out, saved, attrs, needs):
        img, d = xs
        x0, x1, t, inside, v0, v1 = saved
        grads = [None, None]
        if needs[0]:
            gi = np.zeros_like(img)
            shape = img.shape
            lead = [np.arange(n).reshape((-1,) + (1,) * (len(shape) - 1 - k)) for k, n in enumerate(shape[:-1])]
            idx0 = tuple(lead) + (np.broadcast_to(x0, shape),)
            idx1 = tuple(lead) + (np.broadcast_to(x1, shape),)
            np.add.at(gi, idx0, g * (1.0 - t))
            np.add.at(gi, idx1, g * t)
            grads[0] = gi
        if needs[1]:
            # d(pos)/d(d) = -1 where the sample stays in frame
            gd = -(g * (v1 - v0)).sum(axis=-3, keepdims=True) * inside
            grads[1] = gd
        return grads

    def branch(self, xs, attrs, saved):
        x0, _, _, inside, _, _ = saved
        return np.stack([np.broadcast_to(x0, inside.shape), inside.astype(np.int64)])


@primitive("channelnorm")
class ChannelNorm(Primitive):
    """Per-channel normalization with batch statistics and affine (gamma, beta)."""

    def check(self, xs, attrs):
        x, gamma, beta = xs
        c = x.shape[1] if x.ndim == 4 else -1
        if x.ndim != 4 or gamma.shape != (c,) or beta.shape != (c,):
            raise ContractViolation(f"channelnorm: incompatible shapes {_shapes(xs)}")

    def forward(self, xs, attrs):
        x, gamma, beta = xs
        n, c = x.shape[:2]
        m = x.size // c
        x3 = x.reshape(n, c, -1)
        mu = x3.sum(axis=(0, 2)) / m
        xc = x3 - mu[None, :, None]
        var = np.einsum("nci,nci->c", xc, xc) / m
        inv = 1.0 / np.sqrt(var + CHANNELNORM_EPS)
        out = xc * (gamma * inv)[None, :, None] + beta[None, :, None]
        return out.reshape(x.shape), (xc, inv)

    def backward(self, g, xs, out, saved, attrs, needs):
        x, gamma, beta = xs
        xc, inv = saved
        n, c = x.shape[:2]
        m = x.size // c
        g3 = g.reshape(n, c, -1)
        sum_g = g3.sum(axis=(0, 2))
        sum_gxc = np.einsum("nci,nci->c", g3, xc)
        grads = [None, None, None]
        if needs[1]:
            grads[1] = sum_gxc * inv
        if needs[2]:
            grads[2] = sum_g
        if needs[0]:
            a = gamma * inv
            coef = (a * inv * inv * sum_gxc / m)[None, :, None]
            dx = g3 * a[None, :, None] - xc * coef - (a * sum_g / m)[None, :, None]
            grads[0] = dx.reshape(x.shape)
        return grads


@primitive("mean")
class Mean(Primitive):
    def forward(self, xs, attrs):
        return np.asarray(xs[0].mean()), None

    def backward(self, g, xs, out, saved, attrs, needs):
        return [np.full(xs[0].shape, g / xs[0].size)]


@primitive("sum")
class Sum(Primitive):
    def forward(self, xs, attrs):
        return np.asarray(xs[0].sum()), None

    def backward(self, g, xs, out, saved, attrs, needs):
        return [np.full(xs[0].shape, g, dtype=DTYPE)]


@primitive("log_softmax")
class LogSoftmax(Primitive):
    def forward(self, xs, attrs):
        x = xs[0]
        axis = attrs["axis"]
        z = x - x.max(axis=axis, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=axis, keepdims=True)), None

    def backward(self, g, xs, out, saved, attrs, needs):
        axis = attrs["axis"]
        return [g - np.exp(out) * g.sum(axis=axis, keepdims=True)]


def forward_primitive(kind: str, inputs, **attrs) -> Tensor:
    """Apply primitive ``kind`` to ``inputs`` and record it on their tape."""
    if kind not in PRIMITIVES:
        raise ContractViolation(f"unknown primitive {kind!r}")
    if not inputs:
        raise ContractViolation(f"{kind}: no inputs")
    tape = inputs[0].tape
    if any(t.tape is not tape for t in inputs):
        raise ContractViolation(f"{kind}: inputs live on different tapes")
    prim = PRIMITIVES[kind]
    xs = [t.data for t in inputs]
    prim.check(xs, attrs)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out, saved = prim.forward(xs, attrs)
    out = np.asarray(out, dtype=DTYPE)
    # a non-finite element makes the sum non-finite
    if not math.isfinite(float(np.sum(out))) and not np.isfinite(out).all():
        raise NumericError(f"{kind}: non-finite output for inputs {_shapes(xs)}")
    requires = any(t.requires_grad for t in inputs)
    result = tape._leaf(out, requires)
    rec = Record(kind, tuple(t.id for t in inputs), result.id, attrs, saved if requires else None)
    tape.producer[result.id] = len(tape.records)
    tape.records.append(rec)
    return result


def backward(tape: Tape, root: Tensor) -> np.ndarray:
    """Gradient of scalar ``root`` w.r.t. every parameter of ``tape.store``.

    Parameters not reached from ``root`` get exactly zero.
    """
    if root.tape is not tape or root.id >= len(tape.values):
        raise ContractViolation("backward: root was not produced by this tape")
    if root.data.size != 1:
        raise ContractViolation(f"backward: root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root.id: np.ones(root.shape, dtype=DTYPE)}
    stop = tape.producer.get(root.id, -1)
    for rec in reversed(tape.records[: stop + 1]):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        prim = PRIMITIVES[rec.kind]
        xs = [tape.values[i] for i in rec.inputs]
        needs = [tape.requires[i] for i in rec.inputs]
        if not any(needs):
            continue
        input_grads = prim.backward(g, xs, tape.values[rec.output], rec.saved, rec.attrs, needs)
        for i, gi, need in zip(rec.inputs, input_grads, needs):
            if not need or gi is None:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    store = tape.store
    if store is None:
        return np.zeros(0, dtype=DTYPE)
    flat = np.zeros(store.size, dtype=DTYPE)
    offsets = store.offsets()
    for name, tid in tape.param_ids.items():
        if tid in grads:
            a, b = offsets[name]
            flat[a:b] = np.broadcast_to(grads[tid], store[name].shape).ravel()
    if not np.isfinite(flat).all():
        raise NumericError("backward: non-finite gradient")
    return flat


@dataclass
class CheckReport:
    """Per-parameter outcome of a finite-difference gradient check."""

    per_param: dict[str, float]
    kinks: dict[str, int]
    checked: int
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def __str__(self):
        lines = [f"{'PASS' if self.passed else 'FAIL'} max rel err {self.max_error:.3e} (tol {self.tol:g})"]
        for name, err in self.per_param.items():
            kink = f" [{self.kinks[name]} kink(s) excluded]" if self.kinks.get(name) else ""
            lines.append(f"  {name}: {err:.3e}{kink}")
        return "\n".join(lines)


def finite_diff_check(
    tape: Tape,
    root: Tensor,
    h: float = 1e-6,
    tol: float = 1e-5,
    max_entries: int | None = None,
    floor: float = 1e-3,
    seed: int = 0,
) -> CheckReport:
    """Compare :func:`backward` against central differences of a tape replay.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps near-zero entries from turning round-off into huge ratios. Entries
    whose +h/-h replays take a different branch of a kinked primitive (relu
    sign, warp cell) are reported as kinks and excluded. ``max_entries``
    subsamples each parameter tensor (seeded) to bound the replay count.
    """
    if h <= 0 or tol <= 0:
        raise ContractViolation("finite_diff_check: h and tol must be positive")
    analytic = backward(tape, root)
    offsets = tape.store.offsets()
    rng = np.random.default_rng(seed)
    _, base_branches = tape.replay({})
    per_param, kinks, checked = {}, {}, 0
    for name, tid in tape.param_ids.items():
        base = tape.values[tid]
        a0, _ = offsets[name]
        idx = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            idx = np.sort(rng.choice(base.size, size=max_entries, replace=False))
        worst, nk = 0.0, 0
        for j in idx:
            vals = []
            branches = []
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert.flat[j] += sign * h
                values, br = tape.replay({name: pert})
                vals.append(float(values[root.id]))
                branches.append(br)
            if not (_same(branches[0], base_branches) and _same(branches[1], base_branches)):
                nk += 1
                continue
            num = (vals[0] - vals[1]) / (2 * h)
            ana = analytic[a0 + j]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
            checked += 1
        per_param[name] = worst
        kinks[name] = nk
    return CheckReport(per_param, kinks, checked, tol)


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


# Functional wrappers ------------------------------------------------------

def matmul(a, b):
    return forward_primitive("matmul", [a, b])


def conv2d(x, w, b=None, stride=1):
    inputs = [x, w] if b is None else [x, w, b]
    return forward_primitive("conv2d", inputs, stride=stride)


def relu(x):
    return forward_primitive("relu", [x])


def sigmoid(x):
    return forward_primitive("sigmoid", [x])


def exp(x):
    return forward_primitive("exp", [x])


def reciprocal(x):
    return forward_primitive("reciprocal", [x])


def add(a, b):
    return forward_primitive("add", [a, b])


def mul(a, b):
    return forward_primitive("mul", [a, b])


def scale(x, factor):
    return forward_primitive("scale", [x], factor=float(factor))


def concat(xs):
    return forward_primitive("concat", list(xs))


def avgpool(x, kernel):
    return forward_primitive("avgpool", [x], kernel=tuple(kernel))


def upsample(x, factor=(2, 2)):
    return forward_primitive("upsample", [x], factor=tuple(factor))


def warp(img, d):
    return forward_primitive("warp", [img, d])


def channelnorm(x, gamma, beta):
    return forward_primitive("channelnorm", [x, gamma, beta])


def mean(x):
    return forward_primitive("mean", [x])


def total(x):
    return forward_primitive("sum", [x])


def log_softmax(x, axis=1):
    return forward_primitive("log_softmax", [x], axis=axis)
