"""Detection and tracking metrics: matching, precision/recall, AP/mAP,
trajectory errors and identity switches."""
from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .detect_io import Detection, FrameDetections, LabeledFrame, boxes_array

log = logging.getLogger(__name__)

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


class CorrespondenceError(ValueError):
    """No tracked/ground-truth identity correspondence could be established."""


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]]
    records: list[tuple[float, bool]]  # per prediction, input order
    classes: list[int] = field(default_factory=list)  # per prediction


def match_frame(preds: Sequence[Detection], gts: Sequence[Detection], iou_threshold: float = 0.5) -> MatchResult:
    """Greedy matching by descending prediction confidence.

    Each prediction takes the highest-IoU unmatched same-class ground truth at
    or above the threshold (lowest index on ties).
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in (0, 1]")
    n, m = len(preds), len(gts)
    records = [(p.confidence, False) for p in preds]
    classes = [p.class_id for p in preds]
    if n == 0 or m == 0:
        return MatchResult(0, n, m, [], records, classes)
    ov = kernels.iou_matrix(boxes_array(preds), boxes_array(gts))
    gcls = np.array([g.class_id for g in gts])
    taken = np.zeros(m, dtype=bool)
    order = np.argsort(-np.array([p.confidence for p in preds]), kind="stable")
    pairs = []
    for i in order:
        cand = np.where((~taken) & (gcls == preds[i].class_id) & (ov[i] >= iou_threshold), ov[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] < 0:
            continue
        taken[j] = True
        pairs.append((int(i), j, float(ov[i, j])))
        records[i] = (preds[i].confidence, True)
    tp = len(pairs)
    return MatchResult(tp, n - tp, m - tp, pairs, records, classes)


def precision_recall(m: MatchResult) -> tuple[float, float]:
    """``TP/(TP+FP)`` and ``TP/(TP+FN)``; 0/0 is taken as 1.0 for both."""
    return _ratio(m.tp, m.tp + m.fp, "precision"), _ratio(m.tp, m.tp + m.fn, "recall")


def _ratio(num: int, den: int, name: str) -> float:
    if den == 0:
        log.info("%s is 0/0; reporting 1.0", name)
        return 1.0
    return num / den


@dataclass
class PrCurve:
    points: list[tuple[float, float]]  # (recall, precision), confidence-descending


def pr_curve(records: Sequence[tuple[float, bool]], n_gt: int) -> PrCurve:
    """Cumulative PR points over predictions sorted by confidence (stable)."""
    if not records:
        return PrCurve([])
    conf = np.array([r[0] for r in records])
    hit = np.array([r[1] for r in records], dtype=bool)
    order = np.argsort(-conf, kind="stable")
    tp = np.cumsum(hit[order])
    k = np.arange(1, len(order) + 1)
    recall = tp / n_gt if n_gt > 0 else np.zeros(len(order))
    precision = tp / k
    return PrCurve(list(zip(recall.tolist(), precision.tolist())))


def average_precision(curve: PrCurve) -> float:
    """Trapezoidal area under the monotone precision envelope.

    The envelope at recall r is the best precision at any recall >= r; the
    curve is anchored at recall 0 with the envelope's first value.
    """
    if not curve.points:
        return 0.0
    r = np.array([p[0] for p in curve.points])
    p = np.array([p[1] for p in curve.points])
    env = np.maximum.accumulate(p[::-1])[::-1]
    # points sharing a recall value share the envelope of the first of them
    env = env[np.searchsorted(r, r, side="left")]
    r = np.concatenate([[0.0], r])
    env = np.concatenate([[env[0]], env])
    return float(np.sum((r[1:] - r[:-1]) * (env[1:] + env[:-1]) / 2.0))


@dataclass
class MapReport:
    per_class: dict[int, dict[float, float]]
    per_threshold: dict[float, float]
    map50: float
    map50_95: float

    def as_dict(self) -> dict:
        return {
            "per_class": {str(c): {f"{t:.2f}": v for t, v in aps.items()} for c, aps in self.per_class.items()},
            "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
            "map50": self.map50,
            "map50_95": self.map50_95,
        }


def _dets(frame) -> Sequence[Detection]:
    return frame.detections


def _align(preds, gts):
    """Pair frames by index; a frame missing on one side counts as empty."""
    pmap = {f.frame_index: _dets(f) for f in preds}
    gmap = {f.frame_index: _dets(f) for f in gts}
    for t in sorted(set(pmap) | set(gmap)):
        yield t, pmap.get(t, ()), gmap.get(t, ())


def class_ap_at(preds, gts, threshold: float) -> dict[int, float]:
    """AP per ground-truth class at one IoU threshold."""
    records: dict[int, list] = defaultdict(list)
    n_gt: Counter = Counter()
    for _, p, g in _align(preds, gts):
        m = match_frame(p, g, threshold)
        for rec, cls in zip(m.records, m.classes):
            records[cls].append(rec)
        n_gt.update(d.class_id for d in g)
    return {c: average_precision(pr_curve(records.get(c, []), n_gt[c])) for c in sorted(n_gt)}


def map_over_thresholds(preds: Sequence[FrameDetections | LabeledFrame], gts: Sequence[FrameDetections | LabeledFrame],
                        thresholds: Sequence[float] = COCO_THRESHOLDS) -> MapReport:
    """Per-class AP at each threshold, mAP@0.5 and the mean over ``thresholds``.

    Classes absent from the ground truth are excluded from every mean.
    """
    if not thresholds:
        raise ValueError("thresholds must be non-empty")
    per_class: dict[int, dict[float, float]] = defaultdict(dict)
    per_threshold = {}
    for t in thresholds:
        aps = class_ap_at(preds, gts, t)
        for c, ap in aps.items():
            per_class[c][t] = ap
        per_threshold[t] = float(np.mean(list(aps.values()))) if aps else 0.0
    if 0.5 in per_threshold:
        map50 = per_threshold[0.5]
    else:
        aps = class_ap_at(preds, gts, 0.5)
        map50 = float(np.mean(list(aps.values()))) if aps else 0.0
    return MapReport(dict(per_class), per_threshold, map50, float(np.mean(list(per_threshold.values()))))


def aggregate_match(preds, gts, iou_threshold: float = 0.5) -> MatchResult:
    tp = fp = fn = 0
    for _, p, g in _align(preds, gts):
        m = match_frame(p, g, iou_threshold)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    return MatchResult(tp, fp, fn, [], [])


# ---------------------------------------------------------------- identities

@dataclass
class Correspondence:
    """Per-frame identity matches and the majority track for each gt object."""

    frame_matches: dict[int, list[tuple[int, int]]]  # frame -> [(gt_id, track_id)]
    majority: dict[int, int]  # gt_id -> track_id


def correspond(tracked: Sequence[LabeledFrame], gt: Sequence[LabeledFrame], iou_threshold: float = 0.5) -> Correspondence:
    """Match boxes per frame (max total IoU above threshold), then vote per gt object."""
    tmap = {f.frame_index: f for f in tracked}
    frame_matches: dict[int, list[tuple[int, int]]] = {}
    votes: dict[int, Counter] = defaultdict(Counter)
    for g in gt:
        tr = tmap.get(g.frame_index)
        if tr is None or not tr.items or not g.items:
            frame_matches[g.frame_index] = []
            continue
        ov = kernels.iou_matrix(boxes_array(g.detections), boxes_array(tr.detections))
        cost = np.where(ov >= iou_threshold, 1.0 - ov, np.inf)
        rows, cols = kernels.linear_assignment(cost)
        pairs = [(g.items[r][0], tr.items[c][0]) for r, c in zip(rows, cols)]
        frame_matches[g.frame_index] = pairs
        for gid, tid in pairs:
            votes[gid][tid] += 1
    majority = {gid: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for gid, c in votes.items()}
    return Correspondence(frame_matches, majority)


def id_switches(tracked: Sequence[LabeledFrame], gt: Sequence[LabeledFrame], iou_threshold: float = 0.5) -> int:
    """Frames where a gt object's matched track id differs from its previous matched frame."""
    corr = correspond(tracked, gt, iou_threshold)
    last: dict[int, int] = {}
    switches = 0
    for t in sorted(corr.frame_matches):
        for gid, tid in corr.frame_matches[t]:
            if gid in last and last[gid] != tid:
                switches += 1
            last[gid] = tid
    return switches


def association_accuracy(tracked: Sequence[LabeledFrame], gt: Sequence[LabeledFrame], iou_threshold: float = 0.5) -> float:
    """Share of ground-truth object-frames covered by the object's majority track."""
    corr = correspond(tracked, gt, iou_threshold)
    total = sum(len(g.items) for g in gt)
    if total == 0:
        return 1.0
    good = sum(1 for pairs in corr.frame_matches.values() for gid, tid in pairs if corr.majority.get(gid) == tid)
    return good / total


@dataclass
class TrajectoryErrors:
    mae: float
    rmse: float
    mape_percent: float
    count: int = 0


def errors_from_pairs(errors_px: np.ndarray, gt_centers_px: np.ndarray, eps: float = 1e-6) -> TrajectoryErrors:
    """MAE/RMSE of L2 center errors and MAPE against gt distance from the origin."""
    e = np.asarray(errors_px, dtype=np.float64).reshape(-1, 2)
    if len(e) == 0:
        raise CorrespondenceError("no matched positions")
    norm = np.sqrt((e ** 2).sum(axis=1))
    ref = np.sqrt((np.asarray(gt_centers_px, dtype=np.float64).reshape(-1, 2) ** 2).sum(axis=1))
    mae = float(np.mean(norm))
    rmse = float(np.sqrt(np.mean(norm ** 2)))
    mape = float(np.mean(100.0 * norm / np.maximum(ref, eps)))
    return TrajectoryErrors(mae, max(rmse, mae), mape, len(e))


def trajectory_errors(tracked: Sequence[LabeledFrame], gt: Sequence[LabeledFrame],
                      image_size: tuple[int, int] = (1000, 1000), iou_threshold: float = 0.5) -> TrajectoryErrors:
    """Center errors in pixels for each gt object against its majority track."""
    corr = correspond(tracked, gt, iou_threshold)
    if not corr.majority:
        raise CorrespondenceError("no tracked object overlaps any ground-truth object")
    w, h = image_size
    tmap = {f.frame_index: dict(f.items) for f in tracked}
    errs, refs = [], []
    for g in gt:
        tr = tmap.get(g.frame_index, {})
        for gid, det in g.items:
            tid = corr.majority.get(gid)
            if tid is None or tid not in tr:
                continue
            tb = tr[tid].box
            errs.append(((tb.cx - det.box.cx) * w, (tb.cy - det.box.cy) * h))
            refs.append((det.box.cx * w, det.box.cy * h))
    return errors_from_pairs(np.array(errs), np.array(refs))


def evaluate(tracked: Sequence[LabeledFrame], gt: Sequence[LabeledFrame],
             image_size: tuple[int, int] = (1000, 1000), thresholds: Sequence[float] = COCO_THRESHOLDS) -> dict:
    """Full evaluation report as a JSON-ready dict."""
    m = aggregate_match(tracked, gt, 0.5)
    precision, recall = precision_recall(m)
    maps = map_over_thresholds(tracked, gt, thresholds)
    traj = trajectory_errors(tracked, gt, image_size)
    return {
        "precision": precision,
        "recall": recall,
        "tp": m.tp,
        "fp": m.fp,
        "fn": m.fn,
        **maps.as_dict(),
        "trajectory": {"mae": traj.mae, "rmse": traj.rmse, "mape_percent": traj.mape_percent, "count": traj.count},
        "id_switches": id_switches(tracked, gt),
        "association_accuracy": association_accuracy(tracked, gt),
    }
