"""Evaluation metrics and the relative multi-task score (delta m)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractViolation, DegenerateTargetError

# metric name -> 1 if higher is better, 0 if lower is better
DELTA_TERMS = {"miou": 1, "depth_rmse": 0, "normal_mean_angle": 0}


def confusion(pred, gt, num_classes: int, ignore_index: int | None = None) -> np.ndarray:
    """``num_classes x num_classes`` counts, rows ground truth, columns prediction.

    Pixels whose ground truth equals ``ignore_index`` (default ``num_classes``)
    are skipped.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractViolation(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    ignore = num_classes if ignore_index is None else ignore_index
    keep = gt != ignore
    p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= num_classes or g.min() < 0 or g.max() >= num_classes):
        raise ContractViolation(f"label out of range [0, {num_classes})")
    return np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def miou(cm) -> float:
    """Mean IoU over classes present in the ground truth or the prediction."""
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise DegenerateTargetError("empty confusion matrix")
    tp = np.diag(cm).astype(float)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    return float(np.mean(tp[present] / union[present]))


def pixel_accuracy(cm) -> float:
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise DegenerateTargetError("empty confusion matrix")
    return float(np.trace(cm) / cm.sum())


def depth_errors(pred, gt, mask) -> tuple[float, float]:
    """(rmse, abs_rel) over the masked pixels."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != gt.shape:
        # H x W mask against 1 x H x W depth
        mask = np.broadcast_to(np.expand_dims(mask, -3), gt.shape)
    if not mask.any():
        raise DegenerateTargetError("empty depth mask")
    diff = (pred - gt)[mask]
    return float(np.sqrt(np.mean(diff ** 2))), float(np.mean(np.abs(diff) / gt[mask]))


def normal_angle_error(pred, gt_normals, codebook=None, mask=None) -> float:
    """Mean angle in degrees between predicted and true normals.

    ``pred`` is either an integer code-index map (requires ``codebook``) or a
    ``3 x H x W`` array of unit vectors.
    """
    gt = np.asarray(gt_normals, dtype=float)
    if np.any(np.abs(np.linalg.norm(gt, axis=-3) - 1.0) > 1e-6):
        raise ContractViolation("ground-truth normals must be unit length")
    pred = np.asarray(pred)
    if np.issubdtype(pred.dtype, np.integer):
        if codebook is None:
            raise ContractViolation("code indices need a codebook")
        vec = np.moveaxis(codebook.codes[pred], -1, -3)
    else:
        vec = pred.astype(float)
        if np.any(np.abs(np.linalg.norm(vec, axis=-3) - 1.0) > 1e-6):
            raise ContractViolation("predicted normals must be unit length")
    cos = np.clip((vec * gt).sum(axis=-3), -1.0, 1.0)
    ang = np.degrees(np.arccos(cos))
    if mask is not None:
        ang = ang[np.asarray(mask, dtype=bool)]
    if ang.size == 0:
        raise DegenerateTargetError("no pixels to evaluate")
    return float(ang.mean())


@dataclass
class MetricReport:
    miou: float | None = None
    pixel_acc: float | None = None
    depth_rmse: float | None = None
    depth_abs_rel: float | None = None
    normal_mean_angle: float | None = None
    loss_seg: float | None = None
    loss_depth: float | None = None
    loss_normal: float | None = None

    def check_ranges(self) -> None:
        for name, lo, hi in (("miou", 0, 1), ("pixel_acc", 0, 1), ("normal_mean_angle", 0, 180),
                             ("depth_rmse", 0, np.inf), ("depth_abs_rel", 0, np.inf)):
            v = getattr(self, name)
            if v is not None and not lo <= v <= hi:
                raise ContractViolation(f"{name} = {v} outside [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__})

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.from_dict(json.loads(text))


@dataclass
class DeltaM:
    value: float
    contributions: dict = field(default_factory=dict)
    baseline_id: str = ""


def delta_m(method: MetricReport, baseline: MetricReport, baseline_id: str = "") -> DeltaM:
    """Mean signed relative change over mIoU, depth RMSE and normal angle, in percent.

    Each term is ``(-1)**higher_better * (m - b) / b``; lower is better.
    """
    contrib = {}
    for name, higher in DELTA_TERMS.items():
        m, b = getattr(method, name), getattr(baseline, name)
        if m is None or b is None:
            raise ContractViolation(f"delta_m needs {name} in both reports")
        if b == 0:
            raise DegenerateTargetError(f"baseline {name} is zero")
        contrib[name] = (-1.0) ** higher * (m - b) / b
    value = 100.0 * sum(contrib.values()) / len(contrib)
    return DeltaM(value, contrib, baseline_id)
