"""Threshold-swept segmentation metrics: maxDice, maxIOU, MAE, meanSpe, maxSpe.

Predictions are probability maps in [0,1]; ground truths are strictly
binary. The sweep binarizes at tau_k = k/255 for k = 0..255, averages the
per-frame dice/iou/specificity over frames at each threshold, then takes
the max (dice/iou/spe) or mean (spe) over the curve. Confusion counts are
exact integers: per frame, pixels are split by ground-truth class, sorted,
and counted with searchsorted, which applies the same `pred >= tau`
comparison a direct scan would.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

N_THRESHOLDS = 256
THRESHOLDS = np.arange(N_THRESHOLDS) / 255.0


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _check_pair(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    u = np.unique(gt)
    if not np.isin(u, (0.0, 1.0)).all():
        raise ValueError(f"ground truth must be binary, found values {u[:5]}")


def confusion_at(pred: np.ndarray, gt: np.ndarray, tau: float) -> ConfusionCounts:
    """Binarize pred at `pred >= tau` and count against a binary gt."""
    _check_pair(pred, gt)
    hard = pred >= tau
    pos = gt > 0.5
    tp = int(np.count_nonzero(hard & pos))
    fp = int(np.count_nonzero(hard & ~pos))
    fn = int(np.count_nonzero(~hard & pos))
    tn = int(np.count_nonzero(~hard & ~pos))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num: float, den: float, empty_score: float) -> float:
    return num / den if den > 0 else empty_score


def dice(c: ConfusionCounts, empty_score: float = 1.0) -> float:
    return _ratio(2.0 * c.tp, 2.0 * c.tp + c.fp + c.fn, empty_score)


def iou(c: ConfusionCounts, empty_score: float = 1.0) -> float:
    return _ratio(float(c.tp), float(c.tp + c.fp + c.fn), empty_score)


def specificity(c: ConfusionCounts, empty_score: float = 1.0) -> float:
    return _ratio(float(c.tn), float(c.tn + c.fp), empty_score)


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute error between probability map and binary gt, unthresholded."""
    _check_pair(pred, gt)
    return float(np.abs(pred.astype(np.float64) - gt).mean())


@dataclass
class MetricReport:
    max_dice: float
    max_iou: float
    mae: float
    mean_spe: float
    max_spe: float
    frames: int
    dice_curve: np.ndarray
    iou_curve: np.ndarray
    spe_curve: np.ndarray

    def to_dict(self) -> dict:
        return {
            "max_dice": self.max_dice,
            "max_iou": self.max_iou,
            "mae": self.mae,
            "mean_spe": self.mean_spe,
            "max_spe": self.max_spe,
            "frames": self.frames,
            "curves": {
                "thresholds": THRESHOLDS.tolist(),
                "dice": self.dice_curve.tolist(),
                "iou": self.iou_curve.tolist(),
                "specificity": self.spe_curve.tolist(),
            },
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _frame_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray, int, int]:
    """tp and fp for one frame at all 256 thresholds, as exact integers."""
    pos_vals = np.sort(pred[gt > 0.5], axis=None)
    neg_vals = np.sort(pred[gt <= 0.5], axis=None)
    n_pos, n_neg = pos_vals.size, neg_vals.size
    # count of values >= tau == n - first index where vals >= tau
    tp = n_pos - np.searchsorted(pos_vals, THRESHOLDS, side="left")
    fp = n_neg - np.searchsorted(neg_vals, THRESHOLDS, side="left")
    return tp.astype(np.int64), fp.astype(np.int64), n_pos, n_neg


def sweep_report(
    preds,
    gts,
    empty_score: float = 1.0,
    per_frame_max: bool = False,
) -> MetricReport:
    """Threshold-swept report over aligned lists of probability and gt maps.

    Default convention: curves are frame-averaged before the max/mean over
    thresholds is taken. `per_frame_max` instead maxes each frame's own
    curve and averages the per-frame maxima (the headline curves stay
    dataset-level either way).
    """
    if len(preds) == 0 or len(gts) == 0:
        raise ValueError("sweep_report needs at least one frame")
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions vs {len(gts)} ground truths")

    n = len(preds)
    dice_sum = np.zeros(N_THRESHOLDS)
    iou_sum = np.zeros(N_THRESHOLDS)
    spe_sum = np.zeros(N_THRESHOLDS)
    frame_dice_max = np.zeros(n)
    frame_iou_max = np.zeros(n)
    frame_spe_max = np.zeros(n)
    mae_sum = 0.0
    for i, (pred, gt) in enumerate(zip(preds, gts)):
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        _check_pair(pred, gt)
        tp, fp, n_pos, n_neg = _frame_counts(pred, gt)
        fn = n_pos - tp
        tn = n_neg - fp
        dice_den = 2 * tp + fp + fn
        iou_den = tp + fp + fn
        spe_den = tn + fp
        d = np.where(dice_den > 0, 2.0 * tp / np.maximum(dice_den, 1), empty_score)
        j = np.where(iou_den > 0, tp / np.maximum(iou_den, 1), empty_score)
        s = np.where(spe_den > 0, tn / np.maximum(spe_den, 1), empty_score)
        dice_sum += d
        iou_sum += j
        spe_sum += s
        frame_dice_max[i] = d.max()
        frame_iou_max[i] = j.max()
        frame_spe_max[i] = s.max()
        mae_sum += np.abs(pred - gt).mean()

    dice_curve = dice_sum / n
    iou_curve = iou_sum / n
    spe_curve = spe_sum / n
    if per_frame_max:
        max_dice = float(frame_dice_max.mean())
        max_iou = float(frame_iou_max.mean())
        max_spe = float(frame_spe_max.mean())
    else:
        max_dice = float(dice_curve.max())
        max_iou = float(iou_curve.max())
        max_spe = float(spe_curve.max())
    return MetricReport(
        max_dice=max_dice,
        max_iou=max_iou,
        mae=float(mae_sum / n),
        mean_spe=float(spe_curve.mean()),
        max_spe=max_spe,
        frames=n,
        dice_curve=dice_curve,
        iou_curve=iou_curve,
        spe_curve=spe_curve,
    )
