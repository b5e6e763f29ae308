"""Image and panoptic evaluation: PSNR, mIoU, scene-level PQ, and min-cost matching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import CapacityError, DomainError, ValidationError

PSNR_CAP = 99.0


def psnr(img, ref) -> float:
    """Peak signal-to-noise ratio for unit-range images; identical inputs give ``PSNR_CAP``."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise DomainError(f"shape mismatch {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


# ------------------------------------------------------------ assignment


def hungarian(cost):
    """Injective row->column assignment of minimum total cost.

    Returns ``(cols, total)`` where ``cols[i]`` is the column given to row ``i``
    and ``total`` sums the chosen entries in row order.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DomainError("cost must be a 2-D matrix")
    n, m = cost.shape
    if n > m:
        raise CapacityError(f"{n} rows cannot be matched injectively into {m} columns")
    if not np.all(np.isfinite(cost)):
        raise DomainError("cost matrix has non-finite entries")
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(n, dtype=np.int64)
    out[rows] = cols
    total = 0.0
    for i in range(n):
        total += cost[i, out[i]]
    return out, total


# ------------------------------------------------------------ semantic


@dataclass
class IoUReport:
    miou: float
    per_class: dict  # class -> IoU, for classes present in pred or GT
    present: list  # non-void classes present in GT


def _confusion(pred_maps, gt_maps, n_classes):
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, g in zip(pred_maps, gt_maps):
        p = np.asarray(p).ravel()
        g = np.asarray(g).ravel()
        if p.shape != g.shape:
            raise DomainError("prediction and ground-truth maps are not aligned")
        for lab in (p, g):
            if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
                raise DomainError(f"label outside [0, {n_classes})")
        conf += np.bincount(g * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    return conf


def miou(pred_maps, gt_maps, taxonomy) -> IoUReport:
    """Mean IoU over non-void classes present in GT, accumulated over all views."""
    n = taxonomy.n_classes
    if isinstance(pred_maps, np.ndarray) and pred_maps.ndim == 2:
        pred_maps, gt_maps = [pred_maps], [gt_maps]
    conf = _confusion(pred_maps, gt_maps, n)
    inter = np.diag(conf)
    gt_count = conf.sum(axis=1)
    pred_count = conf.sum(axis=0)
    union = gt_count + pred_count - inter
    per_class = {c: inter[c] / union[c] for c in range(n) if union[c] > 0}
    present = [c for c in range(1, n) if gt_count[c] > 0]
    value = float(np.mean([per_class[c] for c in present])) if present else 1.0
    return IoUReport(value, {c: float(v) for c, v in per_class.items()}, present)


# ------------------------------------------------------------ panoptic


@dataclass
class SegmentSet:
    """Scene-wide segments keyed by ``(class, instance id)`` over a flat pixel domain.

    ``labels[p]`` indexes into ``keys`` or is -1 for excluded (void) pixels.
    """

    keys: list
    labels: np.ndarray
    thing_mask: tuple = ()

    @property
    def n_pixels(self) -> int:
        return int(self.labels.size)

    def areas(self) -> np.ndarray:
        valid = self.labels[self.labels >= 0]
        return np.bincount(valid, minlength=len(self.keys))

    @classmethod
    def from_maps(cls, sem_maps, inst_maps, thing_mask):
        """Fold per-view label maps; equal keys in different views merge."""
        things = np.asarray(thing_mask, dtype=bool)
        sem = np.concatenate([np.asarray(s).ravel() for s in sem_maps]).astype(np.int64)
        inst = np.concatenate([np.asarray(v).ravel() for v in inst_maps]).astype(np.int64)
        if sem.shape != inst.shape:
            raise DomainError("semantic and instance maps are not aligned")
        is_thing = things[sem]
        if np.any(is_thing & (inst < 0)):
            raise ValidationError("thing pixel without an instance id")
        inst = np.where(is_thing, inst, 0)
        valid = sem > 0
        pairs = np.stack([sem[valid], inst[valid]], axis=1)
        labels = np.full(sem.size, -1, dtype=np.int64)
        if pairs.size == 0:
            return cls([], labels, tuple(things))
        uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
        labels[valid] = inv.ravel()
        return cls([(int(a), int(b)) for a, b in uniq], labels, tuple(things))

    @classmethod
    def from_masks(cls, masks: dict, n_pixels: int, thing_mask=()):
        """Build from explicit ``{key: pixel indices}``; segments must not overlap."""
        labels = np.full(n_pixels, -1, dtype=np.int64)
        keys = []
        for k, idx in masks.items():
            idx = np.asarray(idx, dtype=np.int64)
            if np.any(labels[idx] >= 0):
                raise ValidationError(f"segment {k} overlaps another segment")
            labels[idx] = len(keys)
            keys.append(tuple(k))
        return cls(keys, labels, tuple(thing_mask))


@dataclass
class ClassPQ:
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int


@dataclass
class PQReport:
    pq: float
    sq: float
    rq: float
    tp: int
    fp: int
    fn: int
    sq_vacuous: bool
    per_class: dict = field(default_factory=dict)
    matches: list = field(default_factory=list)  # (pred key, gt key, IoU)


def _pq_terms(iou_sum, tp, fp, fn):
    denom = tp + 0.5 * fp + 0.5 * fn
    sq = iou_sum / tp if tp else 1.0
    rq = tp / denom if denom else 1.0
    # SQ * RQ keeps the identity exact where the direct ratio could round differently
    return sq * rq, sq, rq


def panoptic_quality(pred: SegmentSet, gt: SegmentSet, iou_threshold: float = 0.5) -> PQReport:
    """Match equal-class segments with IoU above the threshold and score them."""
    if pred.n_pixels != gt.n_pixels:
        raise DomainError("segment sets cover different pixel domains")
    n_p, n_g = len(pred.keys), len(gt.keys)
    both = (pred.labels >= 0) & (gt.labels >= 0)
    inter = np.bincount(pred.labels[both] * max(n_g, 1) + gt.labels[both], minlength=n_p * n_g)
    inter = inter[: n_p * n_g].reshape(n_p, n_g)
    a_p, a_g = pred.areas(), gt.areas()

    matched_p, matched_g = set(), set()
    matches = []
    for i, j in zip(*np.nonzero(inter)):
        if pred.keys[i][0] != gt.keys[j][0]:
            continue
        iou = inter[i, j] / (a_p[i] + a_g[j] - inter[i, j])
        if iou > iou_threshold:
            matched_p.add(i)
            matched_g.add(j)
            matches.append((pred.keys[i], gt.keys[j], float(iou)))

    classes = sorted({k[0] for k in pred.keys} | {k[0] for k in gt.keys})
    per_class = {}
    for c in classes:
        ious = [m[2] for m in matches if m[1][0] == c]
        tp = len(ious)
        fp = sum(1 for i, k in enumerate(pred.keys) if k[0] == c and i not in matched_p)
        fn = sum(1 for j, k in enumerate(gt.keys) if k[0] == c and j not in matched_g)
        pq, sq, rq = _pq_terms(sum(ious), tp, fp, fn)
        per_class[c] = ClassPQ(pq, sq, rq, tp, fp, fn)

    tp = len(matches)
    fp = n_p - len(matched_p)
    fn = n_g - len(matched_g)
    pq, sq, rq = _pq_terms(sum(m[2] for m in matches), tp, fp, fn)
    return PQReport(pq, sq, rq, tp, fp, fn, tp == 0, per_class, matches)
