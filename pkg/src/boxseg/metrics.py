"""Evaluation protocol: threshold-swept dice/IoU, component-level
detection, and Hausdorff delineation.

Conventions, fixed here: the sweep binarizes with pred > t at the 256
thresholds t = i/255; empty-vs-empty counts as a perfect 1; detection and
Hausdorff run on the single 0.5 operating point with strict IoU > 0.5
matching, greedy by descending IoU and one-to-one.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import EIGHT_CONN
from .errors import ShapeError

N_THRESHOLDS = 256


@dataclass
class SegScores:
    mdice: float
    miou: float
    dice_curve: np.ndarray
    iou_curve: np.ndarray


@dataclass
class Region:
    points: np.ndarray  # (n,2) (y,x) pixel coordinates
    box: tuple          # (x0,y0,x1,y1) inclusive


@dataclass
class DetectionScores:
    precision: float
    recall: float
    f1: float
    pairs: list  # [(region_index, gt_box_index, iou)] for true positives


def threshold_sweep(pred, gt_mask):
    """Dice and IoU of (pred > i/255) vs gt, averaged over i = 0..255."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt_mask) > 0.5
    if pred.shape != gt.shape:
        raise ShapeError(f"threshold_sweep: {pred.shape} vs {gt.shape}")
    thresholds = np.arange(N_THRESHOLDS) / (N_THRESHOLDS - 1.0)
    flat = pred.ravel()
    gt_flat = gt.ravel()
    n_gt = int(gt_flat.sum())
    # counts of pred > t, overall and inside gt, via a shared sort
    order = np.sort(flat)
    order_gt = np.sort(flat[gt_flat])
    n_pred = flat.size - np.searchsorted(order, thresholds, side="right")
    n_inter = n_gt - np.searchsorted(order_gt, thresholds, side="right")
    dice = np.empty(N_THRESHOLDS)
    iou = np.empty(N_THRESHOLDS)
    den_d = n_pred + n_gt
    den_i = n_pred + n_gt - n_inter
    both_empty = den_d == 0
    dice[both_empty] = 1.0
    iou[both_empty] = 1.0
    nz = ~both_empty
    dice[nz] = 2.0 * n_inter[nz] / den_d[nz]
    iou[nz] = n_inter[nz] / den_i[nz]
    return SegScores(mdice=float(dice.mean()), miou=float(iou.mean()),
                     dice_curve=dice, iou_curve=iou)


def dice_at(pred, target, threshold=0.5):
    """Plain dice of (pred >= threshold) vs a binary target; empty-vs-empty is 1."""
    a = np.asarray(pred) >= threshold
    b = np.asarray(target) > 0.5
    den = int(a.sum()) + int(b.sum())
    if den == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / den


def detect_regions(pred_binary):
    """8-connected components of a binary map, with their circumscribed boxes."""
    labeled, count = ndimage.label(np.asarray(pred_binary) > 0.5, structure=EIGHT_CONN)
    regions = []
    for idx in range(1, count + 1):
        ys, xs = np.nonzero(labeled == idx)
        regions.append(Region(
            points=np.stack([ys, xs], axis=1),
            box=(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())),
        ))
    return regions


def box_iou(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0) + 1
    ih = min(ay1, by1) - max(ay0, by0) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (ax1 - ax0 + 1) * (ay1 - ay0 + 1)
    area_b = (bx1 - bx0 + 1) * (by1 - by0 + 1)
    return inter / (area_a + area_b - inter)


def match_detections(regions, gt_boxes, iou_threshold=0.5):
    """One-to-one greedy matching by descending box IoU, strict threshold.

    Ties order by box coordinates, not input position, so the scores are
    invariant to input permutations.
    """
    cands = []
    for ri, region in enumerate(regions):
        for bi, gt in enumerate(gt_boxes):
            iou = box_iou(region.box, gt)
            if iou > iou_threshold:
                cands.append((-iou, region.box, tuple(gt), ri, bi))
    cands.sort(key=lambda c: c[:3])
    used_r, used_b = set(), set()
    pairs = []
    for neg_iou, _, _, ri, bi in cands:
        if ri in used_r or bi in used_b:
            continue
        used_r.add(ri)
        used_b.add(bi)
        pairs.append((ri, bi, -neg_iou))
    tp = len(pairs)
    precision = tp / len(regions) if regions else 0.0
    recall = tp / len(gt_boxes) if gt_boxes else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return DetectionScores(precision=precision, recall=recall, f1=f1, pairs=pairs)


def hausdorff(points_a, points_b):
    """Symmetric Hausdorff distance between two nonempty (n,2) point sets."""
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ShapeError("hausdorff: point sets must be nonempty")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(max(d2.min(axis=1).max(), d2.min(axis=0).max())))


def rectangularity(region):
    """IoU between a component and its own bounding rectangle."""
    x0, y0, x1, y1 = region.box
    area_box = (x1 - x0 + 1) * (y1 - y0 + 1)
    return len(region.points) / area_box


def evaluate_sample(pred, gt_mask, gt_boxes, threshold=0.5):
    """All per-image scores used by the evaluation CSV, as a flat dict.

    Hausdorff compares each matched predicted component against the GT
    mask restricted to its matched box; NaN when there are no true
    positives (or no mask).
    """
    sweep = threshold_sweep(pred, gt_mask)
    binary = np.asarray(pred) >= threshold
    regions = detect_regions(binary)
    det = match_detections(regions, gt_boxes)
    gt = np.asarray(gt_mask) > 0.5

    hds = []
    for ri, bi, _ in det.pairs:
        x0, y0, x1, y1 = gt_boxes[bi]
        sub = np.zeros_like(gt)
        sub[y0:y1 + 1, x0:x1 + 1] = gt[y0:y1 + 1, x0:x1 + 1]
        ys, xs = np.nonzero(sub)
        if len(ys) == 0:
            continue
        hds.append(hausdorff(regions[ri].points, np.stack([ys, xs], axis=1)))
    mean_hd = float(np.mean(hds)) if hds else float("nan")

    rects = [rectangularity(r) for r in regions]
    boxfill = np.zeros_like(gt, dtype=np.float64)
    for x0, y0, x1, y1 in gt_boxes:
        boxfill[y0:y1 + 1, x0:x1 + 1] = 1.0

    return {
        "mdice": sweep.mdice,
        "miou": sweep.miou,
        "precision": det.precision,
        "recall": det.recall,
        "f1": det.f1,
        "hausdorff": mean_hd,
        "rectangularity": float(np.mean(rects)) if rects else float("nan"),
        "dice_mask": dice_at(pred, gt_mask, threshold),
        "dice_boxfill": dice_at(pred, boxfill, threshold),
    }
