"""Depth, binary segmentation and per-category evaluation metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import CATEGORIES

MIN_DEPTH = 1e-3
MAX_DEPTH = 80.0
COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")
HEADERS = ("Abs Rel", "Sq Rel", "RMSE", "RMSE log", "d<1.25", "d<1.25^2", "d<1.25^3")


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def as_tuple(self):
        return tuple(getattr(self, c) for c in COLUMNS)

    def to_dict(self):
        return asdict(self)


def garg_crop(height, width):
    """Boolean evaluation crop used on KITTI Eigen-split ground truth."""
    crop = np.zeros((height, width), dtype=bool)
    crop[int(0.40810811 * height):int(0.99189189 * height),
         int(0.03594771 * width):int(0.96405229 * width)] = True
    return crop


def _to_numpy(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def compute_errors(gt, pred):
    """Standard error set on already-masked 1-D arrays."""
    thresh = np.maximum(gt / pred, pred / gt)
    a1 = (thresh < 1.25).mean()
    a2 = (thresh < 1.25 ** 2).mean()
    a3 = (thresh < 1.25 ** 3).mean()

    rmse = np.sqrt(((gt - pred) ** 2).mean())
    rmse_log = np.sqrt(((np.log(gt) - np.log(pred)) ** 2).mean())

    abs_rel = np.mean(np.abs(gt - pred) / gt)
    sq_rel = np.mean(((gt - pred) ** 2) / gt)
    return DepthMetrics(*(float(v) for v in (abs_rel, sq_rel, rmse, rmse_log, a1, a2, a3)))


def valid_mask(gt, cap=MAX_DEPTH, crop=False):
    gt = _to_numpy(gt)
    mask = (gt > 0) & (gt <= cap)
    if crop:
        mask &= garg_crop(*gt.shape[-2:])
    return mask


def depth_metrics(pred, gt, cap=MAX_DEPTH, median_scale=True, crop=False) -> DepthMetrics:
    """Depth errors over valid gt pixels (``0 < gt <= cap``)."""
    pred, gt = _to_numpy(pred), _to_numpy(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    mask = valid_mask(gt, cap, crop)
    if not mask.any():
        raise ValueError("ground truth has no valid pixel in (0, cap]")
    p, g = pred[mask], gt[mask]
    if median_scale:
        p = p * np.median(g) / np.median(p)
    p = np.clip(p, MIN_DEPTH, cap)
    return compute_errors(g, p)


def binary_seg_metrics(pred, gt):
    """``(mIoU over both classes, foreground DICE)`` for binary maps."""
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    ious = []
    for p, g in ((pred, gt), (~pred, ~gt)):
        union = (p | g).sum()
        ious.append(1.0 if union == 0 else (p & g).sum() / union)
    tp = (pred & gt).sum()
    denom = 2 * tp + (pred & ~gt).sum() + (~pred & gt).sum()
    dice = 1.0 if denom == 0 else 2 * tp / denom
    return float(np.mean(ious)), float(dice)


def per_category_absrel(pred, gt, full_labels, cap=MAX_DEPTH, median_scale=True):
    """AbsRel inside each category's valid pixels, plus the mean over categories.

    Median scaling (when on) is computed once over the whole image.
    """
    pred, gt = _to_numpy(pred), _to_numpy(gt)
    labels = np.asarray(full_labels)
    mask = valid_mask(gt, cap)
    if not mask.any():
        return {}, float("nan")
    if median_scale:
        pred = pred * np.median(gt[mask]) / np.median(pred[mask])
    pred = np.clip(pred, MIN_DEPTH, cap)
    out = {}
    for cid in np.unique(labels[mask]):
        m = mask & (labels == cid)
        name = CATEGORIES[cid] if 0 <= cid < len(CATEGORIES) else str(int(cid))
        out[name] = float(np.mean(np.abs(pred[m] - gt[m]) / gt[m]))
    mean = float(np.mean(list(out.values()))) if out else float("nan")
    return out, mean


def border_pairs(gt_label, gt_depth, offset=2, min_ratio=1.1):
    """Pixel pairs straddling gt label borders that are also depth discontinuities.

    Each pair sits ``offset`` px away from the border on either side along a row
    or a column. Returns ``P x 2 x 2`` integer ``(row, col)`` coordinates.
    """
    lab = np.asarray(gt_label).astype(bool)
    depth = _to_numpy(gt_depth)
    h, w = lab.shape
    pairs = []
    for axis in (0, 1):
        a = lab[:-1, :] if axis == 0 else lab[:, :-1]
        b = lab[1:, :] if axis == 0 else lab[:, 1:]
        r, c = np.nonzero(a != b)
        lo = np.stack([r, c], -1)
        hi = lo.copy()
        lo[:, axis] -= offset
        hi[:, axis] += 1 + offset
        pairs.append(np.stack([lo, hi], 1))
    pairs = np.concatenate(pairs)
    inside = ((pairs >= 0) & (pairs < np.array([h, w]))).all((1, 2))
    pairs = pairs[inside]
    l0 = lab[pairs[:, 0, 0], pairs[:, 0, 1]]
    l1 = lab[pairs[:, 1, 0], pairs[:, 1, 1]]
    d0 = depth[pairs[:, 0, 0], pairs[:, 0, 1]]
    d1 = depth[pairs[:, 1, 0], pairs[:, 1, 1]]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(d0 / d1, d1 / d0)
    keep = (l0 != l1) & (d0 > 0) & (d1 > 0) & (ratio > min_ratio)
    return pairs[keep]


def depth_edge_score(pred, gt_depth, gt_label, offset=2, median_scale=True):
    """Mean agreement of depth gaps across gt borders, in ``[0, 1]``, higher is sharper.

    For each border pair the predicted and gt depth gaps are compared as
    ``min(gap_pred / gap_gt, gap_gt / gap_pred)``; bleeding shrinks the
    predicted gap and lowers the score.
    """
    pred, gt = _to_numpy(pred), _to_numpy(gt_depth)
    pairs = border_pairs(gt_label, gt, offset)
    if len(pairs) == 0:
        return float("nan")
    if median_scale:
        mask = valid_mask(gt)
        pred = pred * np.median(gt[mask]) / np.median(pred[mask])
    gp = np.abs(pred[pairs[:, 0, 0], pairs[:, 0, 1]] - pred[pairs[:, 1, 0], pairs[:, 1, 1]])
    gg = np.abs(gt[pairs[:, 0, 0], pairs[:, 0, 1]] - gt[pairs[:, 1, 0], pairs[:, 1, 1]])
    score = np.minimum(gp / gg, gg / np.maximum(gp, 1e-12))
    return float(score.mean())


def mean_metrics(items):
    """Column-wise mean of a list of :class:`DepthMetrics`."""
    arr = np.array([m.as_tuple() for m in items])
    return DepthMetrics(*(float(v) for v in arr.mean(0)))


def format_table(rows: dict) -> str:
    """Aligned plain-text table, one row per named :class:`DepthMetrics`."""
    name_w = max([len("Method")] + [len(k) for k in rows])
    lines = [" | ".join([f"{'Method':<{name_w}}"] + [f"{h:>9}" for h in HEADERS])]
    lines.append("-" * len(lines[0]))
    for name, m in rows.items():
        lines.append(" | ".join([f"{name:<{name_w}}"] + [f"{v:9.4f}" for v in m.as_tuple()]))
    return "\n".join(lines)


def to_json(obj, path=None):
    def default(o):
        if isinstance(o, DepthMetrics):
            return o.to_dict()
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(f"not serializable: {type(o)}")

    text = json.dumps(obj, indent=2, sort_keys=True, default=default)
    if path is not None:
        with open(path, "w") as f:
            f.write(text + "\n")
    return text
