"""Experiment runner: single-task baselines, multi-task training, comparison.

A run directory holds ``config.txt`` (the resolved configuration),
``epochs.csv`` (one row per epoch), ``report.json`` (final test metrics),
``run.json`` (provenance: dataset manifest hash, mode, weighter, seed) and
``model.gbgn`` (checkpoint).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import gradcore as gc
from . import losses as L
from . import metrics as M
from . import scenes
from .errors import ComparisonRefused, ConfigError, StorageError
from .model import SGD, NetworkConfig, TaskTargets, TinySegNet, compute_losses
from .weighting import make_weighter

log = logging.getLogger(__name__)

MODES = ("single:seg", "single:depth", "single:normal", "mtl")
WEIGHTERS = ("equal", "uw", "nash")
MODE_TASK = {"single:seg": "seg", "single:depth": "depth", "single:normal": "surface"}
MTL_TASKS = ("surface", "depth", "seg")
CSV_HEADER = [
    "epoch", "train_seg", "train_depth", "train_normal", "test_seg", "test_depth", "test_normal",
    "miou", "depth_rmse", "normal_angle", "w1", "w2", "w3", "seconds",
]
LOSS_COLUMN = {"seg": "seg", "depth": "depth", "surface": "normal"}


@dataclass
class ExperimentConfig:
    mode: str = "mtl"
    weighter: str = "equal"
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 1
    dataset: str = "data"
    output: str = "runs/run"
    d_max: float = 0.0          # 0 selects 16 px per 64 px of image width
    codes: int = 20
    classes: int = 0            # 0 takes the class count from the dataset manifest
    base_width: int = 8
    levels: int = 3

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "mtl" and self.weighter not in WEIGHTERS:
            raise ConfigError(f"mtl needs a weighter in {WEIGHTERS}, got {self.weighter!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.codes < 2:
            raise ConfigError("codes must be >= 2")

    @property
    def tasks(self) -> tuple[str, ...]:
        return MTL_TASKS if self.mode == "mtl" else (MODE_TASK[self.mode],)

    def to_text(self) -> str:
        lines = ["# mtlkit experiment configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def make_config(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from string or typed values, converting by field type."""
    cfg = base or ExperimentConfig()
    types = {f.name: type(getattr(cfg, f.name)) for f in fields(cfg)}
    updates = {}
    for key, value in values.items():
        if value is None:
            continue
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            updates[key] = types[key](value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: cannot parse {value!r} as {types[key].__name__}") from None
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


def load_config_file(path) -> dict:
    try:
        return parse_config_text(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc


# Data -------------------------------------------------------------------------

@dataclass
class PreparedSplit:
    images: np.ndarray     # N x 3 x H x W
    right: np.ndarray | None
    valid: np.ndarray      # N x H x W
    labels: np.ndarray     # N x H x W
    codes: np.ndarray      # N x H x W
    depth: np.ndarray      # N x 1 x H x W
    normals: np.ndarray    # N x 3 x H x W
    focal: float
    baseline: float

    def __len__(self):
        return len(self.images)

    def targets(self, idx) -> TaskTargets:
        if self.right is not None:
            stereo = L.StereoPair(self.images[idx], self.right[idx], self.valid[idx])
            return TaskTargets(self.labels[idx], self.codes[idx], stereo=stereo)
        return TaskTargets(self.labels[idx], self.codes[idx], depth=self.depth[idx],
                           depth_mask=self.valid[idx], focal=self.focal, baseline=self.baseline)


def prepare_split(samples, codebook) -> PreparedSplit:
    stereo = all(s.stereo for s in samples)
    return PreparedSplit(
        images=np.stack([s.left for s in samples]),
        right=np.stack([s.right for s in samples]) if stereo else None,
        valid=np.stack([s.valid for s in samples]),
        labels=np.stack([s.labels for s in samples]),
        codes=np.stack([L.assign_codes(s.normals, codebook) for s in samples]),
        depth=np.stack([s.depth for s in samples]),
        normals=np.stack([s.normals for s in samples]),
        focal=samples[0].focal,
        baseline=samples[0].baseline,
    )


def batches(n: int, batch_size: int, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# Training ---------------------------------------------------------------------

def _network_config(cfg: ExperimentConfig, manifest: scenes.DatasetManifest, width: int) -> NetworkConfig:
    d_max = cfg.d_max if cfg.d_max > 0 else L.default_d_max(width)
    classes = cfg.classes if cfg.classes > 0 else manifest.num_classes
    return NetworkConfig(base_width=cfg.base_width, levels=cfg.levels, num_classes=classes,
                         num_codes=cfg.codes, d_max=d_max, seed=cfg.seed)


def evaluate(model: TinySegNet, split: PreparedSplit, tasks, batch_size: int, codebook) -> M.MetricReport:
    """Test losses and metrics, batch by batch in stored order."""
    sums = dict.fromkeys(tasks, 0.0)
    seg_pred, disp_pred, code_pred = [], [], []
    for idx in batches(len(split), batch_size):
        tape = gc.Tape(model.params)
        out = model.forward(tape, split.images[idx], tasks)
        losses = compute_losses(out, split.targets(idx), tasks)
        for t in tasks:
            sums[t] += losses[t].item() * len(idx)
        if out.seg is not None:
            seg_pred.append(out.seg.data.argmax(axis=1))
        if out.disparity is not None:
            disp_pred.append(out.disparity.data)
        if out.normal is not None:
            code_pred.append(out.normal.data.argmax(axis=1))
    n = len(split)
    report = M.MetricReport()
    if "seg" in tasks:
        cm = M.confusion(np.concatenate(seg_pred), split.labels, model.config.num_classes)
        report.miou = M.miou(cm)
        report.pixel_acc = M.pixel_accuracy(cm)
        report.loss_seg = sums["seg"] / n
    if "depth" in tasks:
        pred_depth = L.depth_from_disparity(np.concatenate(disp_pred), split.focal, split.baseline)
        mask = split.valid if split.right is None else np.ones(split.valid.shape, dtype=bool)
        report.depth_rmse, report.depth_abs_rel = M.depth_errors(pred_depth, split.depth, mask)
        report.loss_depth = sums["depth"] / n
    if "surface" in tasks:
        report.normal_mean_angle = M.normal_angle_error(np.concatenate(code_pred), split.normals, codebook)
        report.loss_normal = sums["surface"] / n
    report.check_ranges()
    return report


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def run_experiment(cfg: ExperimentConfig, progress=None) -> Path:
    """Train and evaluate one configuration; returns the run directory."""
    cfg.validate()
    out = Path(cfg.output)
    manifest = scenes.read_manifest(cfg.dataset)
    mhash = scenes.manifest_hash(cfg.dataset)
    codebook = L.build_codebook(cfg.codes)
    train = prepare_split(scenes.load_split(cfg.dataset, "train"), codebook)
    test = prepare_split(scenes.load_split(cfg.dataset, "test"), codebook)
    model = TinySegNet(_network_config(cfg, manifest, train.images.shape[-1]))
    tasks = cfg.tasks
    weighter = make_weighter(cfg.weighter) if cfg.mode == "mtl" else None
    if weighter is not None:
        weighter.register(model.params)
    shared = model.shared_index
    opt = SGD(cfg.lr, cfg.momentum)

    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot create run directory {out}: {exc}") from exc

    rows = []
    report = None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        sums = dict.fromkeys(tasks, 0.0)
        wsum = np.zeros(3)
        nsteps = 0
        for idx in batches(len(train), cfg.batch_size, order):
            tape = gc.Tape(model.params)
            outputs = model.forward(tape, train.images[idx], tasks)
            losses = compute_losses(outputs, train.targets(idx), tasks)
            if weighter is None:
                direction = gc.backward(tape, losses[tasks[0]])
            else:
                direction, snap = weighter.direction(tape, [losses[t] for t in MTL_TASKS], shared)
                wsum += snap
            opt.step(model.params, direction)
            for t in tasks:
                sums[t] += losses[t].item() * len(idx)
            nsteps += 1
        report = evaluate(model, test, tasks, cfg.batch_size, codebook)
        train_loss = {t: sums[t] / len(train) for t in tasks}
        if weighter is None:
            w = [None] * 3
        elif weighter.kind == "nash":
            w = list(wsum / nsteps)
        else:
            w = list(snap)
        row = {
            "epoch": str(epoch),
            "train_seg": _fmt(train_loss.get("seg")),
            "train_depth": _fmt(train_loss.get("depth")),
            "train_normal": _fmt(train_loss.get("surface")),
            "test_seg": _fmt(report.loss_seg),
            "test_depth": _fmt(report.loss_depth),
            "test_normal": _fmt(report.loss_normal),
            "miou": _fmt(report.miou),
            "depth_rmse": _fmt(report.depth_rmse),
            "normal_angle": _fmt(report.normal_mean_angle),
            "w1": _fmt(w[0]), "w2": _fmt(w[1]), "w3": _fmt(w[2]),
            "seconds": f"{time.perf_counter() - t0:.3f}",
        }
        rows.append(row)
        _write_csv(out / "epochs.csv", rows)
        if progress:
            progress(cfg, row)

    try:
        (out / "report.json").write_text(report.to_json())
        (out / "run.json").write_text(json.dumps({
            "kind": "run", "mode": cfg.mode, "weighter": cfg.weighter if cfg.mode == "mtl" else "",
            "seed": cfg.seed, "dataset": str(cfg.dataset), "manifest_hash": mhash,
        }, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write results in {out}: {exc}") from exc
    model.save(out / "model.gbgn")
    return out


def _write_csv(path: Path, rows) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    try:
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read_csv(path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc


# Baselines and comparison ---------------------------------------------------------

def read_report(run_dir) -> M.MetricReport:
    path = Path(run_dir) / "report.json"
    try:
        return M.MetricReport.from_json(path.read_text())
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc


def read_run_info(run_dir) -> dict:
    path = Path(run_dir) / "run.json"
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc


def run_baseline_suite(cfg: ExperimentConfig, progress=None) -> Path:
    """Train the three single-task models and merge their test metrics.

    Sub-runs go to ``<output>/single-seg`` etc.; the merged report is written
    to ``<output>/report.json``.
    """
    root = Path(cfg.output)
    merged = M.MetricReport()
    for mode, sub in (("single:seg", "single-seg"), ("single:depth", "single-depth"), ("single:normal", "single-normal")):
        run_experiment(replace(cfg, mode=mode, output=str(root / sub)), progress)
        rep = read_report(root / sub)
        if mode == "single:seg":
            merged.miou, merged.pixel_acc, merged.loss_seg = rep.miou, rep.pixel_acc, rep.loss_seg
        elif mode == "single:depth":
            merged.depth_rmse, merged.depth_abs_rel, merged.loss_depth = rep.depth_rmse, rep.depth_abs_rel, rep.loss_depth
        else:
            merged.normal_mean_angle, merged.loss_normal = rep.normal_mean_angle, rep.loss_normal
    try:
        (root / "report.json").write_text(merged.to_json())
        (root / "run.json").write_text(json.dumps({
            "kind": "baseline", "mode": "single", "weighter": "", "seed": cfg.seed,
            "dataset": str(cfg.dataset), "manifest_hash": scenes.manifest_hash(cfg.dataset),
        }, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write baseline report in {root}: {exc}") from exc
    return root


@dataclass
class ComparisonRow:
    name: str
    report: M.MetricReport
    delta: M.DeltaM


@dataclass
class Comparison:
    baseline: str
    rows: list[ComparisonRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "miou", "depth_rmse", "normal_mean_angle", "loss_seg", "delta_m"])
        for r in self.rows:
            w.writerow([r.name, _fmt(r.report.miou), _fmt(r.report.depth_rmse),
                        _fmt(r.report.normal_mean_angle), _fmt(r.report.loss_seg), _fmt(r.delta.value)])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"baseline: {self.baseline}",
                 f"{'run':<28} {'mIoU':>8} {'rmse':>8} {'angle':>8} {'seg loss':>9} {'delta_m %':>10}"]
        for r in self.rows:
            rep = r.report
            lines.append(f"{r.name:<28} {_num(rep.miou):>8} {_num(rep.depth_rmse):>8} "
                         f"{_num(rep.normal_mean_angle):>8} {_num(rep.loss_seg):>9} {r.delta.value:>10.3f}")
        return "\n".join(lines) + "\n"


def _num(v):
    return "-" if v is None else f"{v:.4f}"


def compare(run_dirs, baseline_dir, out_prefix=None) -> Comparison:
    """Delta m of every run against the baseline, sorted ascending.

    All runs must have been evaluated on the same dataset manifest.
    """
    base_info = read_run_info(baseline_dir)
    base = read_report(baseline_dir)
    result = Comparison(str(baseline_dir))
    for run in run_dirs:
        info = read_run_info(run)
        if info["manifest_hash"] != base_info["manifest_hash"]:
            raise ComparisonRefused(
                f"{run}: dataset manifest {info['manifest_hash']} differs from baseline {base_info['manifest_hash']}"
            )
        rep = read_report(run)
        result.rows.append(ComparisonRow(str(run), rep, M.delta_m(rep, base, str(baseline_dir))))
    result.rows.sort(key=lambda r: (r.delta.value, r.name))
    if out_prefix is not None:
        prefix = Path(out_prefix)
        try:
            prefix.parent.mkdir(parents=True, exist_ok=True)
            prefix.with_suffix(".csv").write_text(result.to_csv())
            prefix.with_suffix(".txt").write_text(result.to_text())
        except OSError as exc:
            raise StorageError(f"cannot write comparison {prefix}: {exc}") from exc
    return result


# Full protocol ---------------------------------------------------------------------

def run_protocol(cfg: ExperimentConfig, seeds=(1, 2, 3), progress=None) -> dict:
    """Baselines plus equal/uw/nash multi-task runs for every seed.

    Writes ``<output>/seed<k>/...`` run directories, one comparison per seed
    and ``<output>/ordering.json`` / ``ordering.txt`` summarising mean test
    segmentation loss and delta m per method, and whether Nash beats the
    single-task segmentation loss and UW's delta m for each seed.
    """
    root = Path(cfg.output)
    summary = {"seeds": {}, "methods": ["single", "equal", "uw", "nash"]}
    t0 = time.perf_counter()
    for seed in seeds:
        sroot = root / f"seed{seed}"
        base = run_baseline_suite(replace(cfg, seed=seed, output=str(sroot / "baseline")), progress)
        runs = []
        for w in WEIGHTERS:
            runs.append(run_experiment(replace(cfg, mode="mtl", weighter=w, seed=seed, output=str(sroot / w)), progress))
        cmp = compare(runs, base, sroot / "comparison")
        dm = {Path(r.name).name: r.delta.value for r in cmp.rows}
        seg = {Path(r.name).name: r.report.loss_seg for r in cmp.rows}
        seg["single"] = read_report(sroot / "baseline").loss_seg
        dm["single"] = 0.0
        summary["seeds"][str(seed)] = {
            "test_seg_loss": seg,
            "delta_m": dm,
            "nash_seg_le_single": seg["nash"] <= seg["single"],
            "nash_dm_le_uw": dm["nash"] <= dm["uw"],
        }
    summary["mean_test_seg_loss"] = {
        m: float(np.mean([s["test_seg_loss"][m] for s in summary["seeds"].values()])) for m in summary["methods"]
    }
    summary["mean_delta_m"] = {
        m: float(np.mean([s["delta_m"][m] for s in summary["seeds"].values()])) for m in summary["methods"]
    }
    summary["seconds"] = round(time.perf_counter() - t0, 1)
    (root / "ordering.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    (root / "ordering.txt").write_text(ordering_text(summary))
    return summary


def ordering_text(summary: dict) -> str:
    lines = [f"{'method':<8} {'mean test seg loss':>20} {'mean delta_m %':>15}"]
    for m in summary["methods"]:
        lines.append(f"{m:<8} {summary['mean_test_seg_loss'][m]:>20.5f} {summary['mean_delta_m'][m]:>15.3f}")
    for seed, s in summary["seeds"].items():
        lines.append(f"seed {seed}: nash seg loss <= single-task: {'yes' if s['nash_seg_le_single'] else 'no'}; "
                     f"delta_m(nash) <= delta_m(uw): {'yes' if s['nash_dm_le_uw'] else 'no'}")
    lines.append(f"wall clock: {summary['seconds']} s")
    return "\n".join(lines) + "\n"
