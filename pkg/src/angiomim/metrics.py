"""Overlap metrics for binary vessel masks: Dice and centerline Dice."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .validation import check_mask, check_same_shape

__all__ = ["MetricReport", "dsc", "skeletonize", "cldice", "evaluate"]


@dataclass(frozen=True)
class MetricReport:
    dsc: float
    cldice: float
    tprec: float
    tsens: float


def dsc(pred, gt) -> float:
    pred, gt = check_mask(pred), check_mask(gt)
    check_same_shape(pred, gt, "prediction and ground truth")
    p, g = int(pred.sum()), int(gt.sum())
    if p + g == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(pred & gt)) / (p + g)


def _neighbours(padded: np.ndarray):
    """P2..P9 (clockwise from north) for every interior pixel of ``padded``."""
    c = padded
    return (
        c[:-2, 1:-1],  # P2 north
        c[:-2, 2:],  # P3
        c[1:-1, 2:],  # P4 east
        c[2:, 2:],  # P5
        c[2:, 1:-1],  # P6 south
        c[2:, :-2],  # P7
        c[1:-1, :-2],  # P8 west
        c[:-2, :-2],  # P9
    )


def _zs_candidates(img: np.ndarray, first: bool) -> np.ndarray:
    padded = np.pad(img, 1)
    n = [x.astype(np.int32) for x in _neighbours(padded)]
    p2, p3, p4, p5, p6, p7, p8, p9 = n
    b = sum(n)
    ring = n + [p2]
    a = sum(((ring[i] == 0) & (ring[i + 1] == 1)).astype(np.int32) for i in range(8))
    if first:
        c3, c4 = p2 * p4 * p6, p4 * p6 * p8
    else:
        c3, c4 = p2 * p4 * p8, p2 * p6 * p8
    return (img == 1) & (b >= 2) & (b <= 6) & (a == 1) & (c3 == 0) & (c4 == 0)


def skeletonize(mask) -> np.ndarray:
    """Zhang-Suen thinning to a fixpoint.

    Plain Zhang-Suen erases 2x2 blocks entirely; any input component left
    without a skeleton pixel keeps its first pixel in row-major order.
    """
    mask = check_mask(mask)
    skel = mask.copy()
    while True:
        changed = False
        for first in (True, False):
            drop = _zs_candidates(skel, first)
            if drop.any():
                skel[drop] = 0
                changed = True
        if not changed:
            break
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), int))
    if count:
        kept = np.zeros(count + 1, dtype=bool)
        kept[np.unique(labels[skel == 1])] = True
        for lab in np.flatnonzero(~kept[1:]) + 1:
            r, c = np.argwhere(labels == lab)[0]
            skel[r, c] = 1
    return skel


def cldice(pred, gt) -> MetricReport:
    """Topology precision/sensitivity on skeletons and their harmonic mean.

    Both masks empty scores 1 everywhere; one empty skeleton against a
    nonempty one scores 0.
    """
    pred, gt = check_mask(pred), check_mask(gt)
    check_same_shape(pred, gt, "prediction and ground truth")
    d = dsc(pred, gt)
    sp, sg = skeletonize(pred), skeletonize(gt)
    np_, ng = int(sp.sum()), int(sg.sum())
    if np_ == 0 and ng == 0:
        return MetricReport(d, 1.0, 1.0, 1.0)
    tprec = np.count_nonzero(sp & gt) / np_ if np_ else 0.0
    tsens = np.count_nonzero(sg & pred) / ng if ng else 0.0
    if np_ == 0 or ng == 0 or tprec + tsens == 0:
        return MetricReport(d, 0.0, float(tprec), float(tsens))
    return MetricReport(d, 2.0 * tprec * tsens / (tprec + tsens), float(tprec), float(tsens))


def evaluate(preds, gts) -> list[MetricReport]:
    return [cldice(p, g) for p, g in zip(preds, gts)]
