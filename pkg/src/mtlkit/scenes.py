"""Procedural stereo scenes with exact ground truth, plus an RGB-D importer.

Scenes are a fronto-parallel background plane plus axis-aligned rectangles
and spheres, ray cast analytically from a rectified stereo pair (right camera
displaced by ``baseline`` along +x). Every surface has one flat colour, so a
left pixel equals the right image linearly interpolated at ``x - disparity``
wherever both interpolation taps see the same surface. Those pixels form the
valid mask.

Normals use a camera frame with x right, y up and z towards the viewer, so a
surface facing the camera has normal (0, 0, 1).
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import ConfigError, ContractViolation, ImportFormatError, StorageError

VISIBILITY_TOL = 1e-9

# base albedo per class; class 0 is the background
PALETTE = np.array([
    [0.55, 0.55, 0.60],
    [0.85, 0.25, 0.20],
    [0.20, 0.70, 0.30],
    [0.20, 0.35, 0.85],
    [0.90, 0.80, 0.20],
    [0.75, 0.30, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
])


@dataclass(frozen=True)
class SceneConfig:
    height: int = 48
    width: int = 64
    focal: float = 64.0
    baseline: float = 0.1
    min_shapes: int = 2
    max_shapes: int = 5
    num_classes: int = 4
    near: float = 0.5
    far: float = 3.0
    background_depth: tuple = (4.0, 6.0)
    color_jitter: float = 0.08
    d_max: float = 16.0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.num_classes > len(PALETTE):
            raise ConfigError(f"num_classes must be <= {len(PALETTE)}")
        if self.height < 4 or self.width < 4:
            raise ConfigError("image extents too small")
        if not 0 < self.near < self.far < self.background_depth[0] <= self.background_depth[1]:
            raise ConfigError("depth ranges must satisfy 0 < near < far < background")
        if self.focal * self.baseline / self.near > self.d_max:
            raise ConfigError(
                f"focal*baseline/near = {self.focal * self.baseline / self.near:.3f} exceeds d_max {self.d_max}"
            )
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("shape count range is empty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background_depth"] = list(self.background_depth)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        d["background_depth"] = tuple(d["background_depth"])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Sample:
    left: np.ndarray             # 3 x H x W in [0, 1]
    right: np.ndarray | None     # 3 x H x W, None without a stereo pair
    depth: np.ndarray            # 1 x H x W, > 0
    disparity: np.ndarray        # 1 x H x W, focal * baseline / depth
    normals: np.ndarray          # 3 x H x W, unit
    labels: np.ndarray           # H x W ints
    valid: np.ndarray            # H x W bools
    focal: float = 1.0
    baseline: float = 1.0

    @property
    def stereo(self) -> bool:
        return self.right is not None

    def to_tensors(self) -> dict:
        t = {
            "left": self.left,
            "depth": self.depth,
            "disparity": self.disparity,
            "normals": self.normals,
            "labels": self.labels.astype(float),
            "valid": self.valid.astype(float),
            "meta.focal": np.asarray(self.focal),
            "meta.baseline": np.asarray(self.baseline),
        }
        if self.right is not None:
            t["right"] = self.right
        return t

    @classmethod
    def from_tensors(cls, t: dict) -> "Sample":
        return cls(
            left=t["left"],
            right=t.get("right"),
            depth=t["depth"],
            disparity=t["disparity"],
            normals=t["normals"],
            labels=t["labels"].astype(np.int64),
            valid=t["valid"] > 0.5,
            focal=float(t["meta.focal"]),
            baseline=float(t["meta.baseline"]),
        )

    def save(self, path) -> None:
        container.save(path, self.to_tensors())

    @classmethod
    def load(cls, path) -> "Sample":
        return cls.from_tensors(container.load(path))


@dataclass
class _Shape:
    kind: str          # "rect" or "sphere"
    cls: int
    color: np.ndarray
    depth: float       # plane depth, or sphere centre depth
    box: tuple = ()    # rect: (x0, x1, y0, y1) world units at `depth`
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 0.0


def _make_scene(cfg: SceneConfig, rng: np.random.Generator):
    f = cfg.focal
    cx, cy = (cfg.width - 1) / 2, (cfg.height - 1) / 2
    bg_depth = float(rng.uniform(*cfg.background_depth))
    bg_color = np.clip(PALETTE[0] + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1)
    shapes = []
    for _ in range(int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))):
        c = int(rng.integers(1, cfg.num_classes))
        color = np.clip(PALETTE[c] + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1)
        u = rng.uniform(0, cfg.width - 1)
        v = rng.uniform(0, cfg.height - 1)
        if c % 2 == 0:
            rpx = rng.uniform(0.08, 0.2) * cfg.width
            zc = rng.uniform(cfg.near, cfg.far)
            r = rpx * zc / f
            zc = max(zc, cfg.near + r)
            center = np.array([(u - cx) * zc / f, (v - cy) * zc / f, zc])
            shapes.append(_Shape("sphere", c, color, zc, center=center, radius=r))
        else:
            z = rng.uniform(cfg.near, cfg.far)
            hw = rng.uniform(0.06, 0.2) * cfg.width
            hh = rng.uniform(0.08, 0.25) * cfg.height
            box = ((u - hw - cx) * z / f, (u + hw - cx) * z / f, (v - hh - cy) * z / f, (v + hh - cy) * z / f)
            shapes.append(_Shape("rect", c, color, z, box=box))
    return bg_depth, bg_color, shapes


def _cast(cfg, scene, xs, ys, cam_x):
    """Nearest hit for rays through pixel coords ``xs, ys`` from camera at ``cam_x``.

    Returns (depth, surface id, normal) with id 0 for the background and
    ``i + 1`` for shape ``i``.
    """
    bg_depth, _, shapes = scene
    f = cfg.focal
    cx, cy = (cfg.width - 1) / 2, (cfg.height - 1) / 2
    dx = (xs - cx) / f
    dy = (ys - cy) / f
    depth = np.full(xs.shape, bg_depth)
    ids = np.zeros(xs.shape, dtype=np.int64)
    normal = np.zeros(xs.shape + (3,))
    normal[..., 2] = -1.0  # outward normal of surfaces facing the camera, camera frame
    for i, sh in enumerate(shapes, start=1):
        if sh.kind == "rect":
            x0, x1, y0, y1 = sh.box
            wx = cam_x + sh.depth * dx
            wy = sh.depth * dy
            hit = (wx >= x0) & (wx <= x1) & (wy >= y0) & (wy <= y1) & (sh.depth < depth)
            depth = np.where(hit, sh.depth, depth)
            ids = np.where(hit, i, ids)
            normal[hit] = (0.0, 0.0, -1.0)
        else:
            ox = cam_x - sh.center[0]
            oy = -sh.center[1]
            oz = -sh.center[2]
            a = dx * dx + dy * dy + 1.0
            b = 2.0 * (dx * ox + dy * oy + oz)
            c = ox * ox + oy * oy + oz * oz - sh.radius ** 2
            disc = b * b - 4 * a * c
            ok = disc >= 0
            t = np.where(ok, (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2 * a), np.inf)
            hit = ok & (t > 0) & (t < depth)
            depth = np.where(hit, t, depth)
            ids = np.where(hit, i, ids)
            px = cam_x + t * dx
            py = t * dy
            n = np.stack([px - sh.center[0], py - sh.center[1], t - sh.center[2]], axis=-1) / sh.radius
            normal[hit] = n[hit]
    return depth, ids, normal


def generate_sample(cfg: SceneConfig, sample_seed: int) -> Sample:
    cfg.validate()
    rng = np.random.default_rng(sample_seed)
    scene = _make_scene(cfg, rng)
    h, w = cfg.height, cfg.width
    fb = cfg.focal * cfg.baseline
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    colors = np.vstack([scene[1][None]] + [s.color[None] for s in scene[2]])
    classes = np.array([0] + [s.cls for s in scene[2]])

    depth, ids, n_cam = _cast(cfg, scene, xs, ys, 0.0)
    _, ids_r, _ = _cast(cfg, scene, xs, ys, cfg.baseline)
    disparity = fb / depth

    # visibility in the right view at the exact continuous position x - d
    xr = xs - disparity
    zr, idr, _ = _cast(cfg, scene, xr, ys, cfg.baseline)
    valid = (xr >= 0) & (idr == ids) & (np.abs(zr - depth) <= VISIBILITY_TOL * np.maximum(1.0, depth))
    # both interpolation taps (left-cell convention) must show the same surface
    x0 = np.clip(np.ceil(np.clip(xr, 0, w - 1)).astype(np.int64) - 1, 0, w - 2)
    rows = ys.astype(np.int64)
    valid &= (ids_r[rows, x0] == ids) & (ids_r[rows, x0 + 1] == ids)

    normals = np.stack([n_cam[..., 0], -n_cam[..., 1], -n_cam[..., 2]])
    normals /= np.linalg.norm(normals, axis=0, keepdims=True)
    return Sample(
        left=colors[ids].transpose(2, 0, 1).copy(),
        right=colors[ids_r].transpose(2, 0, 1).copy(),
        depth=depth[None],
        disparity=disparity[None],
        normals=normals,
        labels=classes[ids],
        valid=valid,
        focal=cfg.focal,
        baseline=cfg.baseline,
    )


# Datasets -----------------------------------------------------------------

SEED_STRIDE = 1_000_000


def sample_seeds(root_seed: int, n: int) -> list[int]:
    """Per-sample seeds by counter; train takes the first block, test the rest."""
    return [root_seed * SEED_STRIDE + i for i in range(n)]


@dataclass
class DatasetManifest:
    config: dict
    root_seed: int
    train_seeds: list[int]
    test_seeds: list[int]
    stereo: bool = True
    source: str = "synthetic"
    focal: float = 1.0
    baseline: float = 1.0
    num_classes: int = 2
    config_hash: str = ""

    @property
    def n_train(self) -> int:
        return len(self.train_seeds)

    @property
    def n_test(self) -> int:
        return len(self.test_seeds)

    def to_json(self) -> str:
        d = {
            "format": "mtlkit-dataset",
            "version": 1,
            "source": self.source,
            "stereo": self.stereo,
            "focal": self.focal,
            "baseline": self.baseline,
            "num_classes": self.num_classes,
            "config": self.config,
            "config_hash": self.config_hash,
            "root_seed": self.root_seed,
            "splits": {
                "train": {"count": self.n_train, "seeds": self.train_seeds},
                "test": {"count": self.n_test, "seeds": self.test_seeds},
            },
        }
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        if d.get("format") != "mtlkit-dataset":
            raise StorageError("not an mtlkit dataset manifest")
        return cls(
            config=d["config"],
            root_seed=d["root_seed"],
            train_seeds=d["splits"]["train"]["seeds"],
            test_seeds=d["splits"]["test"]["seeds"],
            stereo=d["stereo"],
            source=d["source"],
            focal=d["focal"],
            baseline=d["baseline"],
            num_classes=d["num_classes"],
            config_hash=d["config_hash"],
        )


def manifest_hash(root) -> str:
    path = Path(root) / "manifest.json"
    try:
        return hashlib.sha256(path.read_bytes()).hexdigest()[:16]
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    try:
        return DatasetManifest.from_json(path.read_text())
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc


def _sample_path(root, split, i) -> Path:
    return Path(root) / split / f"{i:04d}.gbs"


def build_dataset(cfg: SceneConfig, n_train: int, n_test: int, root_seed: int, out_dir=None,
                  ensure_all_classes: bool = True, max_attempts: int = 20) -> DatasetManifest:
    """Generate train/test samples and, if ``out_dir`` is given, store them.

    With ``ensure_all_classes`` the root seed is advanced until every class
    occurs in the training labels; the seed actually used is recorded.
    """
    if n_train <= 0 or n_test <= 0:
        raise ContractViolation("sample counts must be positive")
    cfg.validate()
    for attempt in range(max_attempts):
        seed = root_seed + attempt
        seeds = sample_seeds(seed, n_train + n_test)
        train = [generate_sample(cfg, s) for s in seeds[:n_train]]
        if not ensure_all_classes:
            break
        present = np.zeros(cfg.num_classes, dtype=bool)
        for smp in train:
            present[np.unique(smp.labels)] = True
        if present.all():
            break
    else:
        raise ConfigError(f"no root seed in [{root_seed}, {root_seed + max_attempts}) covers all classes")
    manifest = DatasetManifest(
        config=cfg.to_dict(),
        root_seed=seed,
        train_seeds=seeds[:n_train],
        test_seeds=seeds[n_train:],
        stereo=True,
        focal=cfg.focal,
        baseline=cfg.baseline,
        num_classes=cfg.num_classes,
        config_hash=cfg.hash(),
    )
    if out_dir is not None:
        out = Path(out_dir)
        for i, smp in enumerate(train):
            smp.save(_sample_path(out, "train", i))
        for i, s in enumerate(manifest.test_seeds):
            generate_sample(cfg, s).save(_sample_path(out, "test", i))
        try:
            (out / "manifest.json").write_text(manifest.to_json())
        except OSError as exc:
            raise StorageError(f"cannot write manifest in {out}: {exc}") from exc
    return manifest


def regenerate(manifest: DatasetManifest, split: str) -> list[Sample]:
    cfg = SceneConfig.from_dict(manifest.config)
    seeds = manifest.train_seeds if split == "train" else manifest.test_seeds
    return [generate_sample(cfg, s) for s in seeds]


def load_split(root, split: str) -> list[Sample]:
    manifest = read_manifest(root)
    n = manifest.n_train if split == "train" else manifest.n_test
    return [Sample.load(_sample_path(root, split, i)) for i in range(n)]


# RGB-D import ---------------------------------------------------------------

_TRIPLE = re.compile(r"^(?P<stem>.+)_(?P<kind>rgb|depth|labels)\.png$")


def normals_from_depth(depth: np.ndarray, focal: float, valid: np.ndarray) -> np.ndarray:
    """Unit normals from back-projected depth by central differences.

    Pixels without a valid neighbourhood get (0, 0, 1).
    """
    h, w = depth.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    cx, cy = (w - 1) / 2, (h - 1) / 2
    p = np.stack([(xs - cx) * depth / focal, -(ys - cy) * depth / focal, -depth])  # y up, z to viewer
    du = np.gradient(p, axis=2)
    dv = np.gradient(p, axis=1)
    n = np.cross(du, -dv, axis=0)
    norm = np.linalg.norm(n, axis=0)
    ok = valid & (norm > 0)
    ok[:, [0, -1]] = False
    ok[[0, -1], :] = False
    n = np.where(ok, n / np.where(norm > 0, norm, 1.0), np.array([0.0, 0.0, 1.0])[:, None, None])
    flip = n[2] < 0
    n[:, flip] *= -1
    return n


def import_rgbd_dir(path, out_dir, focal: float, max_depth: float, num_classes: int,
                    test_fraction: float = 0.2, d_max: float | None = None) -> DatasetManifest:
    """Convert a directory of ``*_rgb.png``, ``*_depth.png`` (16-bit mm) and
    ``*_labels.png`` triples into a stored dataset without stereo pairs.

    Depth is converted to metres; zero or beyond-``max_depth`` pixels are
    masked. A virtual baseline is chosen so that the disparity head's range
    ``(0, d_max)`` covers depths down to ``max_depth / 16``.
    """
    from PIL import Image

    src = Path(path)
    if not src.is_dir():
        raise ImportFormatError(f"{src}: not a directory")
    groups: dict[str, dict[str, Path]] = {}
    for p in sorted(src.iterdir()):
        m = _TRIPLE.match(p.name)
        if m:
            groups.setdefault(m["stem"], {})[m["kind"]] = p
    if not groups:
        raise ImportFormatError(f"{src}: no *_rgb.png/*_depth.png/*_labels.png triples found")

    def read(p: Path) -> np.ndarray:
        try:
            with Image.open(p) as im:
                return np.array(im)
        except OSError as exc:
            raise ImportFormatError(f"{p}: unreadable image ({exc})") from exc

    samples = []
    shape = None
    for stem, parts in groups.items():
        for kind in ("rgb", "depth", "labels"):
            if kind not in parts:
                raise ImportFormatError(f"{src / (stem + '_' + kind + '.png')}: missing")
        rgb, dep, lab = read(parts["rgb"]), read(parts["depth"]), read(parts["labels"])
        if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
            raise ImportFormatError(f"{parts['rgb']}: expected 8-bit RGB, got {rgb.dtype} {rgb.shape}")
        if dep.ndim != 2 or dep.dtype.itemsize < 2:
            raise ImportFormatError(f"{parts['depth']}: expected 16-bit single-channel depth")
        if lab.ndim != 2:
            raise ImportFormatError(f"{parts['labels']}: expected single-channel labels")
        if shape is None:
            shape = rgb.shape[:2]
        for kind, arr in (("rgb", rgb), ("depth", dep), ("labels", lab)):
            if arr.shape[:2] != shape:
                raise ImportFormatError(f"{parts[kind]}: extents {arr.shape[:2]} differ from {shape}")
        if lab.max() >= num_classes:
            raise ImportFormatError(f"{parts['labels']}: label {int(lab.max())} >= {num_classes} classes")
        depth_m = dep.astype(float) / 1000.0
        valid = (dep > 0) & (depth_m <= max_depth)
        depth_m = np.where(valid, depth_m, max_depth)
        samples.append((rgb, depth_m, lab, valid))

    w = shape[1]
    d_max = d_max if d_max is not None else 16.0 * w / 64.0
    baseline = (max_depth / 16.0) * d_max / focal
    out = Path(out_dir)
    n_test = max(1, int(round(len(samples) * test_fraction))) if len(samples) > 1 else 0
    n_train = len(samples) - n_test
    for i, (rgb, depth_m, lab, valid) in enumerate(samples):
        smp = Sample(
            left=rgb.transpose(2, 0, 1).astype(float) / 255.0,
            right=None,
            depth=depth_m[None],
            disparity=(focal * baseline / depth_m)[None],
            normals=normals_from_depth(depth_m, focal, valid),
            labels=lab.astype(np.int64),
            valid=valid,
            focal=focal,
            baseline=baseline,
        )
        split, j = ("train", i) if i < n_train else ("test", i - n_train)
        smp.save(_sample_path(out, split, j))
    manifest = DatasetManifest(
        config={"source_dir": str(src.resolve()), "height": shape[0], "width": w,
                "max_depth": max_depth, "d_max": d_max},
        root_seed=0,
        train_seeds=list(range(n_train)),
        test_seeds=list(range(n_train, len(samples))),
        stereo=False,
        source="rgbd-import",
        focal=focal,
        baseline=baseline,
        num_classes=num_classes,
    )
    manifest.config_hash = hashlib.sha256(json.dumps(manifest.config, sort_keys=True).encode()).hexdigest()[:16]
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(manifest.to_json())
    except OSError as exc:
        raise StorageError(f"cannot write manifest in {out}: {exc}") from exc
    return manifest
