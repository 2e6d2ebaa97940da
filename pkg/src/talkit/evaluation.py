"""Temporal IoU, detection mAP over tIoU thresholds, greedy NMS and
performance-weighted fusion of result sets."""

from __future__ import annotations

from collections import defaultdict
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DimensionError

DEFAULT_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))


class Detection(NamedTuple):
    video_id: str
    label: int
    s: float
    e: float
    score: float


class GroundTruth(NamedTuple):
    video_id: str
    label: int
    s: float
    e: float


def tiou(a: Tuple[float, float], b: Tuple[float, float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def tiou_matrix(segs_a: np.ndarray, segs_b: np.ndarray) -> np.ndarray:
    """Pairwise tIoU between ``(n, 2)`` and ``(m, 2)`` segment arrays."""
    a = np.asarray(segs_a, dtype=float).reshape(-1, 2)
    b = np.asarray(segs_b, dtype=float).reshape(-1, 2)
    inter = np.clip(np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0]),
                    0.0, None)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the precision envelope (ActivityNet convention)."""
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def class_ap(dets: Sequence[Detection], gts: Sequence[GroundTruth],
             thresholds: Sequence[float]) -> np.ndarray:
    """AP of one class at every threshold."""
    thresholds = np.asarray(thresholds, dtype=float)
    if not gts:
        return np.zeros(len(thresholds))
    if not dets:
        return np.zeros(len(thresholds))
    gt_by_video: Dict[str, List[int]] = defaultdict(list)
    for i, g in enumerate(gts):
        gt_by_video[g.video_id].append(i)
    gt_segs = np.array([[g.s, g.e] for g in gts])
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    tp = np.zeros((len(thresholds), len(dets)))
    taken = np.zeros((len(thresholds), len(gts)), dtype=bool)
    for rank, di in enumerate(order):
        d = dets[di]
        cand = gt_by_video.get(d.video_id)
        if not cand:
            continue
        ious = tiou_matrix([[d.s, d.e]], gt_segs[cand])[0]
        by_iou = np.argsort(-ious, kind="stable")
        for ti, thr in enumerate(thresholds):
            for j in by_iou:
                if ious[j] < thr:
                    break
                if taken[ti, cand[j]]:
                    continue
                taken[ti, cand[j]] = True
                tp[ti, rank] = 1.0
                break
    fp = 1.0 - tp
    tp_cum = np.cumsum(tp, axis=1)
    fp_cum = np.cumsum(fp, axis=1)
    recall = tp_cum / len(gts)
    precision = tp_cum / (tp_cum + fp_cum)
    return np.array([interpolated_ap(precision[t], recall[t]) for t in range(len(thresholds))])


def average_map(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> Tuple[np.ndarray, float]:
    """Per-threshold mAP and its mean over thresholds.

    Classes without ground truth are skipped.
    """
    thresholds = list(thresholds)
    if any(not 0.0 < t < 1.0 for t in thresholds):
        raise ConfigError(f"tIoU thresholds must lie in (0, 1): {thresholds}")
    gts_by_class: Dict[int, List[GroundTruth]] = defaultdict(list)
    for g in gts:
        gts_by_class[g.label].append(GroundTruth(*g))
    dets_by_class: Dict[int, List[Detection]] = defaultdict(list)
    for d in dets:
        dets_by_class[d.label].append(Detection(*d))
    if not gts_by_class:
        return np.zeros(len(thresholds)), 0.0
    aps = np.stack([class_ap(dets_by_class.get(c, []), gts_by_class[c], thresholds)
                    for c in sorted(gts_by_class)])
    per_threshold = aps.mean(axis=0)
    return per_threshold, float(per_threshold.mean())


def average_recall(dets: Sequence[Detection], gts: Sequence[GroundTruth], top_n: int = 100,
                   thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> float:
    """Class-agnostic recall of the top ``top_n`` detections per video,
    averaged over thresholds."""
    by_video: Dict[str, List[Detection]] = defaultdict(list)
    for d in dets:
        by_video[d.video_id].append(Detection(*d))
    gt_by_video: Dict[str, List[GroundTruth]] = defaultdict(list)
    for g in gts:
        gt_by_video[g.video_id].append(GroundTruth(*g))
    if not gts:
        return 0.0
    hits = np.zeros(len(thresholds))
    for vid, vg in gt_by_video.items():
        vd = sorted(by_video.get(vid, []), key=lambda d: -d.score)[:top_n]
        if not vd:
            continue
        best = tiou_matrix([[g.s, g.e] for g in vg], [[d.s, d.e] for d in vd]).max(axis=1)
        hits += (best[None, :] >= np.asarray(thresholds)[:, None]).sum(axis=1)
    return float((hits / len(gts)).mean())


def nms(dets: Sequence[Detection], tiou_threshold: float = 0.5) -> List[Detection]:
    """Greedy per-(video, class) suppression of overlaps above ``tiou_threshold``."""
    if not 0.0 < tiou_threshold < 1.0:
        raise ConfigError(f"NMS threshold must lie in (0, 1), got {tiou_threshold}")
    groups: Dict[Tuple[str, int], List[Detection]] = defaultdict(list)
    for d in dets:
        d = Detection(*d)
        groups[(d.video_id, d.label)].append(d)
    keep: List[Detection] = []
    for key in groups:
        pending = sorted(groups[key], key=lambda d: -d.score)
        while pending:
            best = pending.pop(0)
            keep.append(best)
            pending = [d for d in pending if tiou((best.s, best.e), (d.s, d.e)) <= tiou_threshold]
    return sorted(keep, key=lambda d: (d.video_id, -d.score))


def ensemble_weights(val_scores: Sequence[float]) -> np.ndarray:
    scores = np.asarray(val_scores, dtype=float)
    if np.any(scores <= 0):
        raise ConfigError("validation scores must be positive")
    return scores / scores.sum()


def ensemble_fuse(result_sets: Sequence[Sequence[Detection]], val_scores: Sequence[float],
                  nms_threshold: Optional[float] = 0.5) -> List[Detection]:
    """Pool several result sets, scaling each set's scores by its normalised
    validation performance, then suppress duplicates."""
    if len(result_sets) != len(val_scores):
        raise DimensionError(f"{len(result_sets)} result sets but {len(val_scores)} scores")
    weights = ensemble_weights(val_scores)
    pooled = [Detection(d[0], d[1], d[2], d[3], d[4] * w)
              for dets, w in zip(result_sets, weights) for d in dets]
    return nms(pooled, nms_threshold) if nms_threshold is not None else pooled
