"""Dice and false-positive / false-negative volumes."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np

from .errors import GridMismatch
from .volume import Volume3


@dataclass(frozen=True)
class CaseMetrics:
    dice: float
    fp_volume_ml: float
    fn_volume_ml: float
    voxel_counts: Tuple[int, int, int, int]  # tp, fp, fn, tn

    def to_dict(self):
        d = asdict(self)
        d["voxel_counts"] = dict(zip(("tp", "fp", "fn", "tn"), self.voxel_counts))
        return d


def _check(pred, gt):
    if pred.dims != gt.dims or not np.allclose(pred.spacing, gt.spacing, rtol=0, atol=1e-6):
        raise GridMismatch(f"pred grid {pred.dims}@{pred.spacing} != gt grid {gt.dims}@{gt.spacing}")


def confusion_counts(pred: Volume3, gt: Volume3):
    _check(pred, gt)
    p = pred.data > 0.5
    g = gt.data > 0.5
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size) - tp - fp - fn
    return tp, fp, fn, tn


def _dice_from_counts(tp, fp, fn):
    den = 2 * tp + fp + fn
    return 1.0 if den == 0 else 2 * tp / den


def dice(pred: Volume3, gt: Volume3) -> float:
    """Dice overlap; two empty masks count as a perfect match (1.0)."""
    tp, fp, fn, _ = confusion_counts(pred, gt)
    return _dice_from_counts(tp, fp, fn)


def fp_fn_volumes(pred: Volume3, gt: Volume3) -> Tuple[float, float]:
    _, fp, fn, _ = confusion_counts(pred, gt)
    ml = gt.voxel_volume_ml
    return fp * ml, fn * ml


def case_metrics(pred: Volume3, gt: Volume3) -> CaseMetrics:
    tp, fp, fn, tn = confusion_counts(pred, gt)
    ml = gt.voxel_volume_ml
    return CaseMetrics(_dice_from_counts(tp, fp, fn), fp * ml, fn * ml, (tp, fp, fn, tn))
