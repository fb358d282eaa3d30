"""Segmentation metrics: IoU, Dice, boundary extraction, HD95.

Conventions: both-empty masks score 1.0 for IoU/Dice (perfect agreement);
empty-vs-nonempty scores 0.0; HD95 on any empty mask raises instead of
returning a number. Distances are Euclidean between pixel centers at unit
spacing. The 95th percentile interpolates linearly between order
statistics at rank 0.95 * (n - 1).
"""
from __future__ import annotations

import json

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMaskError, ShapeError
from .flowdata import Mask


def _cells(mask) -> np.ndarray:
    if isinstance(mask, Mask):
        return mask.cells.astype(bool)
    return np.asarray(mask).astype(bool)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _cells(pred), _cells(gt)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def iou(pred, gt) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    p, g = _pair(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def dice(pred, gt) -> float:
    """2 |A∩B| / (|A| + |B|); 1.0 when both masks are empty."""
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / total)


def boundary(mask) -> np.ndarray:
    """Interior boundary: foreground cells with a background 4-neighbor.

    The image border counts as background. Returns an (n, 2) int array of
    (row, col) pixel coordinates.
    """
    m = _cells(mask)
    if not m.any():
        return np.zeros((0, 2), dtype=np.int64)
    padded = np.pad(m, 1, mode="constant")
    core = padded[1:-1, 1:-1]
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
                padded[1:-1, :-2] & padded[1:-1, 2:] & core)
    edge = core & ~interior
    rows, cols = np.nonzero(edge)
    return np.stack([rows, cols], axis=1)


def _percentile_linear(values: np.ndarray, q: float) -> float:
    """Percentile via linear interpolation at rank q * (n - 1)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 1:
        return float(v[0])
    rank = q * (v.size - 1)
    lo = int(np.floor(rank))
    hi = min(lo + 1, v.size - 1)
    frac = rank - lo
    return float(v[lo] * (1.0 - frac) + v[hi] * frac)


def hd95(pred, gt, pooled: bool = True) -> float:
    """95th percentile of boundary nearest-neighbor distances.

    Default pools both directed distance sets (every pred-boundary point to
    its nearest gt-boundary point and vice versa) before taking the
    percentile; ``pooled=False`` returns the max of the two directed
    percentiles instead.
    """
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        raise EmptyMaskError("hd95 requires two non-empty masks")
    a = boundary(p).astype(np.float64)
    b = boundary(g).astype(np.float64)
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    if pooled:
        return _percentile_linear(np.concatenate([d_ab, d_ba]), 0.95)
    return max(_percentile_linear(d_ab, 0.95), _percentile_linear(d_ba, 0.95))


def frame_report(frame_index: int, pred, gt) -> dict:
    """Metric record for one frame; hd95 is null when a mask is empty."""
    rec = {"frame": frame_index, "iou": iou(pred, gt), "dice": dice(pred, gt)}
    try:
        rec["hd95"] = hd95(pred, gt)
    except EmptyMaskError:
        rec["hd95"] = None
    return rec


def batch_report(masks, gts) -> list[dict]:
    """Per-frame records plus one aggregate record (means over frames).

    Frames whose hd95 is undefined (an empty mask) are excluded from the
    hd95 aggregate, matching the reporting convention for that metric.
    """
    records = [frame_report(i, m, g) for i, (m, g) in enumerate(zip(masks, gts))]
    hd_vals = [r["hd95"] for r in records if r["hd95"] is not None]
    agg = {
        "aggregate": True,
        "n_frames": len(records),
        "mean_iou": float(np.mean([r["iou"] for r in records])) if records else None,
        "mean_dice": float(np.mean([r["dice"] for r in records])) if records else None,
        "mean_hd95": float(np.mean(hd_vals)) if hd_vals else None,
    }
    return records + [agg]


def write_report_jsonl(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
