"""Depth and segmentation metric suites (always evaluated in float64)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from mmflow.errors import ContractError, ShapeError
from mmflow.toyworld import PALETTE

BACKGROUND = -1
IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
# 4-connectivity structuring element for instance extraction.
_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    delta_125: float
    aligned: bool

    def to_dict(self) -> dict:
        return {"abs_rel": self.abs_rel, "delta_125": self.delta_125}


@dataclass(frozen=True)
class SegMetrics:
    miou: float
    map_5095: float
    per_class_iou: dict = field(default_factory=dict)
    ap_per_threshold: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"miou": self.miou, "map_5095": self.map_5095,
                "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()}}


def _depth_channel(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[..., 0] if x.ndim >= 3 and x.shape[-1] == 3 else x


def affine_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Least-squares ``s * pred + b`` against ``gt``, clamped to stay positive."""
    p, g = pred.ravel(), gt.ravel()
    A = np.stack([p, np.ones_like(p)], axis=1)
    (s, b), *_ = np.linalg.lstsq(A, g, rcond=None)
    return np.maximum(s * pred + b, 1e-6)


def depth_metrics(pred, gt, align: bool = True) -> DepthMetrics:
    """AbsRel and the delta < 1.25 ratio on channel 0 of depth grids."""
    p, g = _depth_channel(pred), _depth_channel(gt)
    if p.shape != g.shape:
        raise ShapeError(f"depth shapes differ: {p.shape} vs {g.shape}")
    if not np.all(g > 0):
        raise ContractError("ground-truth depth must be strictly positive")
    if align:
        p = affine_align(p, g)
    elif np.any(p <= 0):
        p = np.maximum(p, 1e-6)
    abs_rel = float(np.mean(np.abs(p - g) / g))
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(abs_rel, float(np.mean(ratio < 1.25)), align)


def labels_from_palette(frame, palette: np.ndarray = PALETTE) -> np.ndarray:
    """Nearest palette entry per pixel; black decodes to background (-1).

    Candidates are ordered background first, then class ids ascending, so ties
    resolve to the lowest id.
    """
    f = np.asarray(frame, dtype=np.float64)
    cands = np.vstack([np.zeros((1, 3)), np.asarray(palette, dtype=np.float64)])
    d2 = ((f[..., None, :] - cands) ** 2).sum(-1)
    return np.argmin(d2, axis=-1) - 1


def label_video(grid) -> np.ndarray:
    g = np.asarray(grid)
    if g.ndim == 3:
        g = g[None]
    return np.stack([labels_from_palette(fr) for fr in g])


def instances(labels: np.ndarray, cls: int) -> list[np.ndarray]:
    """4-connected components of ``labels == cls`` in one frame."""
    lab, n = ndimage.label(labels == cls, structure=_FOUR)
    return [lab == k for k in range(1, n + 1)]


def iou_matrix(preds: list[np.ndarray], gts: list[np.ndarray]) -> np.ndarray:
    out = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            inter = np.logical_and(p, g).sum()
            if inter:
                out[i, j] = inter / np.logical_or(p, g).sum()
    return out


def greedy_matches(iou: np.ndarray, threshold: float) -> int:
    """Matches formed by taking pairs in descending IoU while both ends are free."""
    pairs = [(-iou[i, j], i, j) for i in range(iou.shape[0]) for j in range(iou.shape[1])
             if iou[i, j] >= threshold]
    pairs.sort()
    used_p, used_g = set(), set()
    for _, i, j in pairs:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
    return len(used_p)


def average_precision(tp: int, n_pred: int, n_gt: int) -> float:
    """Area under the single-point precision/recall curve of unscored predictions."""
    if n_gt == 0:
        return float("nan")
    if n_pred == 0:
        return 0.0
    return (tp / n_pred) * (tp / n_gt)


def instance_counts(pred_labels: np.ndarray, gt_labels: np.ndarray, classes, matcher=greedy_matches):
    """Per class and threshold: ``(tp, n_pred, n_gt)`` pooled over frames."""
    out = {}
    for c in classes:
        tp = np.zeros(len(IOU_THRESHOLDS), dtype=np.int64)
        n_pred = n_gt = 0
        for pf, gf in zip(pred_labels, gt_labels):
            P, G = instances(pf, c), instances(gf, c)
            n_pred += len(P)
            n_gt += len(G)
            if P and G:
                iou = iou_matrix(P, G)
                tp += [matcher(iou, thr) for thr in IOU_THRESHOLDS]
        out[c] = (tp, n_pred, n_gt)
    return out


def seg_metrics(pred, gt, scenes=None, matcher=greedy_matches) -> SegMetrics:
    """mIoU over object classes present in ``gt`` and unscored mAP@[.50:.95].

    ``pred``/``gt`` are rendered segmentation grids ``[T, H, W, 3]`` (or label
    maps ``[T, H, W]`` of integer ids). ``scenes`` is accepted for symmetry with
    other evaluators and is not needed: instances are recovered from the masks.
    """
    pl = _as_labels(pred)
    gl = _as_labels(gt)
    if pl.shape != gl.shape:
        raise ShapeError(f"segmentation shapes differ: {pl.shape} vs {gl.shape}")
    classes = sorted(int(c) for c in np.unique(gl) if c != BACKGROUND)
    if not classes:
        return SegMetrics(float("nan"), float("nan"))
    per_class = {}
    for c in classes:
        inter = np.logical_and(pl == c, gl == c).sum()
        union = np.logical_or(pl == c, gl == c).sum()
        per_class[c] = float(inter / union)
    counts = instance_counts(pl, gl, classes, matcher)
    ap_thr = {}
    for k, thr in enumerate(IOU_THRESHOLDS):
        ap_thr[thr] = float(np.mean([average_precision(int(tp[k]), n_p, n_g)
                                     for tp, n_p, n_g in counts.values()]))
    return SegMetrics(miou=float(np.mean(list(per_class.values()))),
                      map_5095=float(np.mean(list(ap_thr.values()))),
                      per_class_iou=per_class, ap_per_threshold=ap_thr)


def _as_labels(x) -> np.ndarray:
    a = np.asarray(x)
    if a.ndim >= 3 and a.shape[-1] == 3 and a.dtype.kind == "f":
        return label_video(a)
    return a.astype(np.int64) if a.ndim == 3 else a.astype(np.int64)[None]
