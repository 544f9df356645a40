"""Median scaling and relative-depth metrics, per frame and per case.

Predictions are relative, so they are first rescaled such that their median
matches the ground-truth median over jointly valid pixels. The two reported
numbers are the mean absolute relative error (lower is better) and the
fraction of pixels whose depth ratio in either direction stays strictly
below a threshold, 1.25 by default (higher is better).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .depthdata import DepthMap
from .errors import NumericError, ShapeMismatchError

SCALING_MODES = ("per-frame", "per-sequence")


class FrameResult(NamedTuple):
    id: str
    abs_rel: float
    delta1: float


@dataclass(frozen=True)
class ScaledPrediction:
    """A prediction multiplied by median(gt)/median(pred) over joint pixels."""

    values: DepthMap
    scale_factor: float


@dataclass(frozen=True)
class EvalResult:
    """Per-case aggregate metrics; aggregates are unweighted frame means."""

    case_name: str
    n_frames: int
    abs_rel: float
    delta1: float
    per_frame: tuple[FrameResult, ...]


def _joint_pixels(pred: DepthMap, gt: DepthMap) -> tuple[np.ndarray, np.ndarray]:
    if pred.values.shape != gt.values.shape:
        raise ShapeMismatchError(
            f"prediction shape {pred.values.shape} != ground truth shape {gt.values.shape}"
        )
    mask = pred.valid & gt.valid
    if not mask.any():
        raise NumericError("joint validity mask is empty")
    return (pred.values[mask].astype(np.float64), gt.values[mask].astype(np.float64))


def median_scale(pred: DepthMap, gt: DepthMap) -> ScaledPrediction:
    """Rescale `pred` so its median matches `gt`'s over jointly valid pixels.

    Medians are interpolated (mean of the two central order statistics for
    even counts).
    """
    p, g = _joint_pixels(pred, gt)
    m_pred = float(np.median(p))
    m_gt = float(np.median(g))
    if not m_pred > 0:
        raise NumericError(f"prediction median must be positive, got {m_pred}")
    scale = m_gt / m_pred
    scaled = DepthMap(pred.values.astype(np.float64) * scale, pred.valid.copy())
    return ScaledPrediction(values=scaled, scale_factor=scale)


def abs_rel(pred: DepthMap, gt: DepthMap) -> float:
    """Mean of |gt - pred| / gt over jointly valid pixels."""
    p, g = _joint_pixels(pred, gt)
    if not (g > 0).all():
        raise NumericError("ground-truth pixels must be strictly positive")
    return float(np.mean(np.abs(g - p) / g))


def delta_acc(pred: DepthMap, gt: DepthMap, threshold: float = 1.25) -> float:
    """Fraction of joint pixels with max(gt/pred, pred/gt) strictly below threshold."""
    p, g = _joint_pixels(pred, gt)
    if not ((g > 0).all() and (p > 0).all()):
        raise NumericError("depth ratios need strictly positive pixels on both sides")
    ratio = np.maximum(g / p, p / g)
    return float(np.mean(ratio < threshold))


def _pooled_scale(preds: Sequence[DepthMap], gts: Sequence[DepthMap]) -> float:
    ps, gs = [], []
    for pred, gt in zip(preds, gts):
        p, g = _joint_pixels(pred, gt)
        ps.append(p)
        gs.append(g)
    m_pred = float(np.median(np.concatenate(ps)))
    m_gt = float(np.median(np.concatenate(gs)))
    if not m_pred > 0:
        raise NumericError(f"pooled prediction median must be positive, got {m_pred}")
    return m_gt / m_pred


def evaluate_case(preds: Sequence[DepthMap], gts: Sequence[DepthMap],
                  case_name: str, scaling: str = "per-frame",
                  frame_ids: Sequence[str] | None = None) -> EvalResult:
    """Median-scale then score every frame; aggregate by unweighted mean.

    `scaling` selects whether each frame is scaled by its own median ratio
    (the default) or by a single ratio pooled over the whole sequence.
    """
    if scaling not in SCALING_MODES:
        raise ValueError(f"scaling must be one of {SCALING_MODES}, got {scaling!r}")
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions but {len(gts)} ground truths")
    if len(preds) == 0:
        raise ValueError("cannot evaluate an empty case")
    if frame_ids is None:
        frame_ids = [f"{i:04d}" for i in range(len(preds))]

    seq_scale = None
    if scaling == "per-sequence":
        seq_scale = _pooled_scale(preds, gts)

    rows = []
    for fid, pred, gt in zip(frame_ids, preds, gts):
        try:
            if seq_scale is None:
                scaled = median_scale(pred, gt).values
            else:
                scaled = DepthMap(pred.values.astype(np.float64) * seq_scale,
                                  pred.valid.copy())
            rows.append(FrameResult(fid, abs_rel(scaled, gt), delta_acc(scaled, gt)))
        except (NumericError, ShapeMismatchError) as exc:
            raise type(exc)(f"frame {fid!r}: {exc}") from exc

    return EvalResult(
        case_name=case_name,
        n_frames=len(rows),
        abs_rel=float(np.mean([r.abs_rel for r in rows])),
        delta1=float(np.mean([r.delta1 for r in rows])),
        per_frame=tuple(rows),
    )
