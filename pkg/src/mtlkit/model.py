"""Small encoder-decoder with a pooling pyramid and three task heads.

Layout for ``levels = L`` and widths ``c_l = base_width * 2**l``:

* encoder level ``l``: two [conv3x3, channelnorm, relu] blocks; every level
  but the last ends with a stride-2 [conv3x3, channelnorm, relu] into
  ``c_{l+1}`` channels. The output of each non-final level is kept as a skip.
* pyramid on the bottleneck: average pooling to 1x1, 2x2 and 4x4 grids, a
  channel matmul to ``c_{L-1} // 4`` channels, relu, nearest upsampling back,
  concatenation with the bottleneck and a fusing [conv3x3, channelnorm, relu].
* decoder level ``l`` (from ``L-2`` down to 0): 2x nearest upsampling,
  concatenation with the encoder skip, two [conv3x3, channelnorm, relu].
* heads: one 3x3 conv with bias each for segmentation logits, the raw
  disparity (through ``d_max * sigmoid``) and normal-code logits.

Parameters are registered shared-first, so the shared block is a prefix of
every flat gradient.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import container
from . import gradcore as gc
from . import losses as L
from .errors import ConfigError, ContractViolation

PYRAMID_GRIDS = (1, 2, 4)
HEADS = ("surface", "depth", "seg")


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 3
    base_width: int = 8
    levels: int = 3
    num_classes: int = 4
    num_codes: int = 20
    d_max: float = 16.0
    seed: int = 0

    def validate(self) -> None:
        if self.base_width < 4:
            raise ConfigError(f"base_width must be >= 4, got {self.base_width}")
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_codes < 2:
            raise ConfigError(f"num_codes must be >= 2, got {self.num_codes}")
        if not self.d_max > 0:
            raise ConfigError(f"d_max must be positive, got {self.d_max}")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2 ** i for i in range(self.levels)]

    @property
    def divisor(self) -> int:
        """Input extents must be multiples of this (downsampling plus the 4x4 grid)."""
        return 2 ** (self.levels - 1) * max(PYRAMID_GRIDS)


@dataclass
class TaskOutputs:
    seg: gc.Tensor | None        # N x s x H x W logits
    disparity: gc.Tensor | None  # N x 1 x H x W, inside (0, d_max)
    normal: gc.Tensor | None     # N x K x H x W logits


def _layer_table(cfg: NetworkConfig):
    """(name, shape, group) for every parameter, in registration order."""
    w = cfg.widths
    rows = []

    def conv(name, cout, cin, group="shared", bias=False, norm=True):
        rows.append((f"{name}.w", (cout, cin, 3, 3), group))
        if bias:
            rows.append((f"{name}.b", (cout,), group))
        if norm:
            rows.append((f"{name}.gamma", (cout,), group))
            rows.append((f"{name}.beta", (cout,), group))

    cin = cfg.in_channels
    for lvl in range(cfg.levels):
        conv(f"enc{lvl}.conv1", w[lvl], cin)
        conv(f"enc{lvl}.conv2", w[lvl], w[lvl])
        if lvl < cfg.levels - 1:
            conv(f"enc{lvl}.down", w[lvl + 1], w[lvl])
            cin = w[lvl + 1]
    top = w[-1]
    branch = max(top // 4, 1)
    for g in PYRAMID_GRIDS:
        rows.append((f"ppm.grid{g}.w", (branch, top), "shared"))
    conv("ppm.fuse", top, top + branch * len(PYRAMID_GRIDS))
    for lvl in range(cfg.levels - 2, -1, -1):
        conv(f"dec{lvl}.conv1", w[lvl], w[lvl + 1] + w[lvl])
        conv(f"dec{lvl}.conv2", w[lvl], w[lvl])
    conv("head.surface", cfg.num_codes, w[0], group="head:surface", bias=True, norm=False)
    conv("head.depth", 1, w[0], group="head:depth", bias=True, norm=False)
    conv("head.seg", cfg.num_classes, w[0], group="head:seg", bias=True, norm=False)
    return rows


class TinySegNet:
    """Model parameters plus the forward pass that reads them off a tape."""

    def __init__(self, config: NetworkConfig, params: gc.ParamStore | None = None):
        config.validate()
        self.config = config
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> gc.ParamStore:
        rng = np.random.default_rng(self.config.seed)
        store = gc.ParamStore()
        for name, shape, group in _layer_table(self.config):
            kind = name.rsplit(".", 1)[1]
            if kind == "w":
                fan_in = int(np.prod(shape[1:]))
                fan_out = shape[0] * int(np.prod(shape[2:]))
                a = np.sqrt(6.0 / (fan_in + fan_out))
                value = rng.uniform(-a, a, size=shape)
            elif kind == "gamma":
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            store.add(name, value, group)
        return store

    @property
    def shared_index(self) -> np.ndarray:
        return self.params.group_index(lambda g: g == "shared")

    @property
    def num_shared(self) -> int:
        return len(self.shared_index)

    def _block(self, tape, x, name, stride=1):
        p = tape.param
        h = gc.conv2d(x, p(f"{name}.w"), stride=stride)
        return gc.relu(gc.channelnorm(h, p(f"{name}.gamma"), p(f"{name}.beta")))

    def forward(self, tape: gc.Tape, images, heads=HEADS) -> TaskOutputs:
        """Run the network on ``N x 3 x H x W`` images (a 3-D image is batch 1).

        Heads not listed in ``heads`` are skipped and come back as None.
        """
        cfg = self.config
        x = images if isinstance(images, gc.Tensor) else tape.constant(np.asarray(images, dtype=float))
        if len(x.shape) == 3:
            x = tape.constant(x.data[None])
        n, c, h, w = x.shape
        if c != cfg.in_channels:
            raise ContractViolation(f"expected {cfg.in_channels} input channels, got {c}")
        if h % cfg.divisor or w % cfg.divisor:
            raise ContractViolation(f"input extents {h}x{w} must be multiples of {cfg.divisor}")
        skips = []
        for lvl in range(cfg.levels):
            x = self._block(tape, x, f"enc{lvl}.conv1")
            x = self._block(tape, x, f"enc{lvl}.conv2")
            if lvl < cfg.levels - 1:
                skips.append(x)
                x = self._block(tape, x, f"enc{lvl}.down", stride=2)
        bh, bw = x.shape[2:]
        branches = [x]
        for g in PYRAMID_GRIDS:
            pooled = gc.avgpool(x, (bh // g, bw // g))
            proj = gc.relu(gc.matmul(tape.param(f"ppm.grid{g}.w"), pooled))
            branches.append(gc.upsample(proj, (bh // g, bw // g)))
        x = self._block(tape, gc.concat(branches), "ppm.fuse")
        for lvl in range(cfg.levels - 2, -1, -1):
            x = gc.concat([gc.upsample(x), skips[lvl]])
            x = self._block(tape, x, f"dec{lvl}.conv1")
            x = self._block(tape, x, f"dec{lvl}.conv2")
        p = tape.param
        seg = disparity = normal = None
        if "seg" in heads:
            seg = gc.conv2d(x, p("head.seg.w"), p("head.seg.b"))
        if "depth" in heads:
            raw = gc.conv2d(x, p("head.depth.w"), p("head.depth.b"))
            disparity = L.disparity_head(raw, cfg.d_max)
        if "surface" in heads:
            normal = gc.conv2d(x, p("head.surface.w"), p("head.surface.b"))
        return TaskOutputs(seg, disparity, normal)

    def describe(self) -> list[dict]:
        rows = []
        for name, arr in self.params.items():
            rows.append({"name": name, "shape": list(arr.shape), "group": self.params.group(name), "count": int(arr.size)})
        return rows

    def describe_text(self) -> str:
        lines = [f"{'name':<24} {'shape':<18} {'group':<14} count"]
        for r in self.describe():
            lines.append(f"{r['name']:<24} {'x'.join(map(str, r['shape'])) or 'scalar':<18} {r['group']:<14} {r['count']}")
        shared = sum(r["count"] for r in self.describe() if r["group"] == "shared")
        lines.append(f"total {self.params.size}  shared {shared}  heads {self.params.size - shared}")
        return "\n".join(lines)

    def save(self, path) -> None:
        tensors = {f"config.{f.name}": np.asarray(float(getattr(self.config, f.name))) for f in fields(self.config)}
        tensors.update((name, arr) for name, arr in self.params.items())
        container.save(path, tensors)

    @classmethod
    def load(cls, path) -> "TinySegNet":
        tensors = container.load(path)
        kw = {}
        for f in fields(NetworkConfig):
            v = float(tensors.pop(f"config.{f.name}"))
            kw[f.name] = v if f.type in ("float", float) else int(v)
        model = cls(NetworkConfig(**kw))
        for name, arr in tensors.items():
            if name in model.params:
                model.params[name] = arr
            else:
                model.params.add(name, arr, group="uw" if name.startswith("uw.") else "extra")
        return model


def init_model(config: NetworkConfig) -> TinySegNet:
    return TinySegNet(config)


def config_dict(config: NetworkConfig) -> dict:
    return asdict(config)


@dataclass
class TaskTargets:
    """Per-batch supervision. ``stereo`` drives the depth loss when present,
    otherwise ``depth``/``depth_mask`` with ``focal``/``baseline``."""

    labels: np.ndarray                # N x H x W
    codes: np.ndarray                 # N x H x W
    stereo: L.StereoPair | None = None
    depth: np.ndarray | None = None   # N x 1 x H x W
    depth_mask: np.ndarray | None = None
    focal: float = 1.0
    baseline: float = 1.0


def compute_losses(out: TaskOutputs, targets: TaskTargets, tasks=HEADS) -> dict:
    """Loss tensors for the requested tasks, keyed by task name."""
    result = {}
    if "surface" in tasks:
        result["surface"] = L.normal_codebook_loss(out.normal, targets.codes)
    if "depth" in tasks:
        if targets.stereo is not None:
            result["depth"] = L.depth_recon_loss(targets.stereo, out.disparity)
        else:
            pred = L.depth_from_disparity(out.disparity, targets.focal, targets.baseline)
            result["depth"] = L.supervised_depth_l2(pred, targets.depth, targets.depth_mask)
    if "seg" in tasks:
        result["seg"] = L.seg_cross_entropy(out.seg, targets.labels)
    return result


def task_gradients(model: TinySegNet, images, targets: TaskTargets, tasks=HEADS):
    """Per-task losses and the gradient matrix over shared parameters.

    One forward tape, one backward pass per task; rows follow ``tasks``.
    """
    tape = gc.Tape(model.params)
    out = model.forward(tape, images)
    losses = compute_losses(out, targets, tasks)
    idx = model.shared_index
    rows = np.stack([gc.backward(tape, losses[t])[idx] for t in tasks])
    return np.array([losses[t].item() for t in tasks]), rows


class SGD:
    """Heavy-ball SGD: ``v <- momentum * v + direction``; ``theta <- theta - lr * v``."""

    def __init__(self, lr: float = 0.05, momentum: float = 0.9):
        if not lr > 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        if not 0 <= momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        self.lr = lr
        self.momentum = momentum
        self.velocity: np.ndarray | None = None

    def step(self, store: gc.ParamStore, direction) -> None:
        direction = np.asarray(direction, dtype=float)
        if direction.shape != (store.size,):
            raise ContractViolation(f"direction length {direction.shape} != ({store.size},)")
        if self.velocity is None:
            self.velocity = np.zeros(store.size)
        self.velocity = self.momentum * self.velocity + direction
        store.set_flat(store.flat() - self.lr * self.velocity)


def sgd_step(store: gc.ParamStore, direction, lr: float, momentum: float, velocity=None):
    """Functional form of :class:`SGD`; returns the new velocity."""
    opt = SGD(lr, momentum)
    opt.velocity = None if velocity is None else np.asarray(velocity, dtype=float)
    opt.step(store, direction)
    return opt.velocity
