"""Task losses for segmentation, codebook surface normals and stereo depth.

All losses take tensors either as ``C x H x W`` (one image) or
``N x C x H x W`` (a batch); the channel axis is always third from the end.
Targets are plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .errors import ContractViolation, DegenerateTargetError

DEFAULT_CODES = 20
TIE_EPS = 1e-12


def _channel_axis(t: gc.Tensor) -> int:
    if len(t.shape) not in (3, 4):
        raise ContractViolation(f"expected C x H x W or N x C x H x W tensor, got {t.shape}")
    return len(t.shape) - 3


def _pixel_nll(logits: gc.Tensor, labels, n_classes: int, ignore: int | None) -> gc.Tensor:
    """Mean negative log-softmax of the labelled class over non-ignored pixels."""
    axis = _channel_axis(logits)
    labels = np.asarray(labels)
    spatial = logits.shape[:axis] + logits.shape[axis + 1:]
    if labels.shape != spatial:
        raise ContractViolation(f"target extents {labels.shape} do not match logits {logits.shape}")
    if logits.shape[axis] != n_classes:
        raise ContractViolation(f"logits have {logits.shape[axis]} channels, expected {n_classes}")
    valid = labels != ignore if ignore is not None else np.ones(labels.shape, dtype=bool)
    bad = valid & ((labels < 0) | (labels >= n_classes))
    if bad.any():
        raise ContractViolation(f"label out of range [0, {n_classes}): {labels[bad][0]}")
    count = int(valid.sum())
    if count == 0:
        raise DegenerateTargetError("no contributing pixels in target")
    onehot = np.zeros(logits.shape)
    cls = np.where(valid, labels, 0)
    np.put_along_axis(onehot, np.expand_dims(cls, axis), np.expand_dims(valid, axis).astype(float), axis=axis)
    logp = gc.log_softmax(logits, axis=axis)
    picked = gc.total(gc.mul(logp, logits.tape.constant(onehot)))
    return gc.scale(picked, -1.0 / count)


def seg_cross_entropy(logits: gc.Tensor, labels, ignore_index: int | None = None) -> gc.Tensor:
    """Pixel-averaged cross entropy of softmax(logits) against class labels.

    Pixels labelled ``ignore_index`` (default: the class count ``s``) are
    excluded from both the sum and the normalizer.
    """
    s = logits.shape[_channel_axis(logits)]
    return _pixel_nll(logits, labels, s, s if ignore_index is None else ignore_index)


@dataclass(frozen=True)
class NormalCodebook:
    codes: np.ndarray  # (K, 3) unit vectors

    @property
    def size(self) -> int:
        return len(self.codes)


def build_codebook(k: int = DEFAULT_CODES, seed: int = 0) -> NormalCodebook:
    """Fibonacci lattice over the camera-facing hemisphere (z > 0).

    The lattice is fully determined by ``k``; ``seed`` is accepted for
    interface symmetry and ignored.
    """
    if k < 2:
        raise ContractViolation(f"codebook needs at least 2 codes, got {k}")
    i = np.arange(k, dtype=float)
    z = 1.0 - (i + 0.5) / k  # uniform in (0, 1): equal-area bands
    r = np.sqrt(1.0 - z * z)
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    codes = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    codes /= np.linalg.norm(codes, axis=1, keepdims=True)
    return NormalCodebook(codes)


def assign_codes(normals, codebook: NormalCodebook) -> np.ndarray:
    """Index of the best-aligned code per pixel; ties go to the lowest index.

    ``normals`` is ``3 x H x W`` (or batched ``N x 3 x H x W``).
    """
    normals = np.asarray(normals, dtype=float)
    if normals.ndim not in (3, 4) or normals.shape[-3] != 3:
        raise ContractViolation(f"normals must be 3 x H x W, got {normals.shape}")
    norm = np.linalg.norm(normals, axis=-3)
    if np.any(np.abs(norm - 1.0) > 1e-6):
        raise ContractViolation("normals must be unit length within 1e-6")
    dots = np.einsum("kc,...chw->...khw", codebook.codes, normals)
    # dots within TIE_EPS of the best count as ties; argmax picks the first True
    best = dots.max(axis=-3, keepdims=True)
    return np.argmax(dots >= best - TIE_EPS, axis=-3)


def normal_codebook_loss(logits: gc.Tensor, code_idx) -> gc.Tensor:
    """Codebook classification loss for surface normals, averaged over pixels."""
    k = logits.shape[_channel_axis(logits)]
    return _pixel_nll(logits, code_idx, k, None)


def disparity_head(raw: gc.Tensor, d_max: float) -> gc.Tensor:
    """Bounded disparity ``d_max * sigmoid(raw)``, strictly inside (0, d_max)."""
    if d_max <= 0:
        raise ContractViolation(f"d_max must be positive, got {d_max}")
    return gc.scale(gc.sigmoid(raw), d_max)


def default_d_max(width: int) -> float:
    return 16.0 * width / 64.0


def bilinear_warp(right: gc.Tensor, d: gc.Tensor) -> gc.Tensor:
    """Reconstruct the left view by sampling ``right`` at ``x - d``."""
    if np.any(d.data < 0):
        raise ContractViolation("bilinear_warp: negative disparity")
    return gc.warp(right, d)


@dataclass
class StereoPair:
    left: np.ndarray   # C x H x W (or N x C x H x W)
    right: np.ndarray
    valid: np.ndarray  # H x W booleans (or N x H x W)

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=float)
        self.right = np.asarray(self.right, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.left.shape != self.right.shape:
            raise ContractViolation(f"stereo images differ in shape: {self.left.shape} vs {self.right.shape}")
        spatial = self.left.shape[:-3] + self.left.shape[-2:]
        if self.valid.shape != spatial:
            raise ContractViolation(f"valid mask {self.valid.shape} does not match images {self.left.shape}")


def _masked_mse(diff: gc.Tensor, mask: np.ndarray, channels: int) -> gc.Tensor:
    tape = diff.tape
    count = int(mask.sum()) * channels
    if count == 0:
        raise DegenerateTargetError("mask selects no pixels")
    m = np.expand_dims(mask.astype(float), -3)
    sq = gc.mul(diff, diff)
    return gc.scale(gc.total(gc.mul(sq, tape.constant(m))), 1.0 / count)


def depth_recon_loss(pair: StereoPair, d: gc.Tensor) -> gc.Tensor:
    """Masked photometric L2 between the left image and the warped right image."""
    tape = d.tape
    if d.shape[-2:] != pair.left.shape[-2:]:
        raise ContractViolation(f"disparity {d.shape} does not match images {pair.left.shape}")
    recon = bilinear_warp(tape.constant(pair.right), d)
    diff = gc.add(tape.constant(pair.left), gc.scale(recon, -1.0))
    return _masked_mse(diff, pair.valid, pair.left.shape[-3])


def depth_from_disparity(d, focal: float, baseline: float):
    """``focal * baseline / d``. Accepts a tape tensor (differentiable) or an array."""
    if focal <= 0 or baseline <= 0:
        raise ContractViolation("focal and baseline must be positive")
    values = d.data if isinstance(d, gc.Tensor) else np.asarray(d, dtype=float)
    if np.any(values <= 0):
        raise ContractViolation("disparity must be strictly positive")
    if isinstance(d, gc.Tensor):
        return gc.scale(gc.reciprocal(d), focal * baseline)
    return focal * baseline / values


def supervised_depth_l2(pred: gc.Tensor, gt_depth, mask) -> gc.Tensor:
    gt = np.asarray(gt_depth, dtype=float)
    if gt.shape != pred.shape:
        raise ContractViolation(f"prediction {pred.shape} and target {gt.shape} differ")
    mask = np.asarray(mask, dtype=bool)
    diff = gc.add(pred, pred.tape.constant(-gt))
    return _masked_mse(diff, mask.reshape(gt.shape[:-3] + gt.shape[-2:]), pred.shape[-3])
