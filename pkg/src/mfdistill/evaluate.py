"""Desk-scale detection evaluation: AP and heading-weighted AP (APH).

Protocol (documented here in full; it does not claim parity with any
external benchmark server):

  * matching runs per frame and per class: predictions in descending score
    order greedily claim the unmatched GT with the highest IoU above the
    class threshold (3D IoU by default);
  * every evaluation "view" (difficulty level, distance band) filters GTs
    by a predicate; predictions matched to an out-of-view GT are ignored
    (neither TP nor FP), unmatched predictions count as FP in a view only
    if the prediction itself satisfies the predicate;
  * AP integrates max precision over 101 recall points; APH is identical
    except every true positive contributes max(0, 1 - |dyaw|/pi) instead
    of 1 to the precision numerator, so APH <= AP always;
  * difficulty levels follow the point-count convention: level 1 keeps GTs
    with at least 5 points, level 2 keeps GTs with at least 1 point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import BoundingBox3D, box_iou, wrap_angle

DEFAULT_IOU_THRESHOLDS = {0: 0.5, 1: 0.25}   # vehicle-like, small classes
LEVEL1_MIN_POINTS = 5
LEVEL2_MIN_POINTS = 1


@dataclass
class FrameResult:
    """One frame's evaluation inputs."""

    detections: list[tuple[BoundingBox3D, float]]
    gt_boxes: list[BoundingBox3D]
    gt_point_counts: list[int]


@dataclass
class MatchRecord:
    score: float
    heading_weight: float | None     # None for a false positive
    gt_index: int | None             # index into the flattened GT list
    pred_distance: float


def heading_accuracy(pred_yaw: float, gt_yaw: float) -> float:
    return max(0.0, 1.0 - abs(wrap_angle(pred_yaw - gt_yaw)) / math.pi)


def match_frame(detections, gt_boxes, iou_threshold: float, iou_mode: str,
                gt_offset: int) -> list[MatchRecord]:
    """Greedy score-ordered matching of one frame's single-class boxes."""
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    taken = [False] * len(gt_boxes)
    records = []
    for i in order:
        box, score = detections[i]
        best_j, best_iou = None, iou_threshold
        for j, gt in enumerate(gt_boxes):
            if taken[j]:
                continue
            iou = box_iou(box, gt, iou_mode)
            if iou >= best_iou:
                best_j, best_iou = j, iou
        dist = float(math.hypot(box.center[0], box.center[1]))
        if best_j is None:
            records.append(MatchRecord(score, None, None, dist))
        else:
            taken[best_j] = True
            records.append(MatchRecord(score, heading_accuracy(box.yaw, gt_boxes[best_j].yaw),
                                       gt_offset + best_j, dist))
    return records


def pr_curves(records: list[MatchRecord], gt_in_view: np.ndarray,
              pred_in_view, n_gt_view: int) -> tuple[float, float]:
    """(AP, APH) for one view over globally score-sorted match records."""
    if n_gt_view == 0:
        return float("nan"), float("nan")
    recs = sorted(records, key=lambda r: -r.score)
    tp = 0
    fp = 0
    tph = 0.0
    points = []   # (recall, precision, precision_h)
    for r in recs:
        if r.gt_index is not None:
            if gt_in_view[r.gt_index]:
                tp += 1
                tph += r.heading_weight
            else:
                continue                      # ignored: out-of-view GT
        else:
            if not pred_in_view(r):
                continue
            fp += 1
        denom = tp + fp
        points.append((tp / n_gt_view, tp / denom, tph / denom))
    ap = 0.0
    aph = 0.0
    for r_level in np.linspace(0, 1, 101):
        ap += max((p for rec, p, _ in points if rec >= r_level), default=0.0)
        aph += max((ph for rec, _, ph in points if rec >= r_level), default=0.0)
    return min(1.0, ap / 101), min(1.0, aph / 101)


@dataclass
class EvalReport:
    protocol: dict
    per_class: dict[str, dict]
    mean_ap: float
    mean_aph: float

    def to_json(self) -> str:
        return json.dumps({
            "protocol": self.protocol,
            "classes": self.per_class,
            "mean_ap": self.mean_ap,
            "mean_aph": self.mean_aph,
        }, indent=2, allow_nan=True)

    def to_csv(self) -> str:
        lines = ["class,view,ap,aph"]
        for cls, views in self.per_class.items():
            for view, vals in views.items():
                lines.append(f"{cls},{view},{vals['ap']:.6f},{vals['aph']:.6f}")
        lines.append(f"mean,level2,{self.mean_ap:.6f},{self.mean_aph:.6f}")
        return "\n".join(lines) + "\n"


def evaluate(frames: list[FrameResult],
             iou_thresholds: dict[int, float] | None = None,
             distance_bands: tuple[float, float] = (6.0, 10.0),
             iou_mode: str = "3d",
             class_names: dict[int, str] | None = None) -> EvalReport:
    """Full evaluation over frames; see module docstring for the protocol."""
    thresholds = iou_thresholds or DEFAULT_IOU_THRESHOLDS
    names = class_names or {c: f"class{c}" for c in thresholds}
    b1, b2 = distance_bands
    bands = {
        f"range_[0.0,{b1})": lambda d: 0.0 <= d < b1,
        f"range_[{b1},{b2})": lambda d: b1 <= d < b2,
        f"range_[{b2},inf)": lambda d: d >= b2,
    }

    per_class = {}
    mean_ap, mean_aph, n_classes = 0.0, 0.0, 0
    for cls, thr in sorted(thresholds.items()):
        records: list[MatchRecord] = []
        gt_counts: list[int] = []
        gt_dists: list[float] = []
        offset = 0
        for fr in frames:
            dets = [(b, s) for b, s in fr.detections if b.class_id == cls]
            gts = [b for b in fr.gt_boxes if b.class_id == cls]
            cnts = [n for b, n in zip(fr.gt_boxes, fr.gt_point_counts)
                    if b.class_id == cls]
            records.extend(match_frame(dets, gts, thr, iou_mode, offset))
            gt_counts.extend(cnts)
            gt_dists.extend(float(math.hypot(b.center[0], b.center[1])) for b in gts)
            offset += len(gts)

        gt_counts_arr = np.array(gt_counts, dtype=np.int64)
        gt_dists_arr = np.array(gt_dists)
        views = {}

        def run_view(name, gt_pred, pred_pred):
            in_view = np.array([gt_pred(i) for i in range(len(gt_counts_arr))],
                               dtype=bool) if len(gt_counts_arr) else np.zeros(0, bool)
            ap, aph = pr_curves(records, in_view, pred_pred, int(in_view.sum()))
            views[name] = {"ap": ap, "aph": aph, "n_gt": int(in_view.sum())}

        run_view("level2",
                 lambda i: gt_counts_arr[i] >= LEVEL2_MIN_POINTS,
                 lambda r: True)
        run_view("level1",
                 lambda i: gt_counts_arr[i] >= LEVEL1_MIN_POINTS,
                 lambda r: True)
        for bname, pred in bands.items():
            run_view(bname,
                     lambda i, p=pred: gt_counts_arr[i] >= LEVEL2_MIN_POINTS
                     and p(gt_dists_arr[i]),
                     lambda r, p=pred: p(r.pred_distance))

        per_class[names.get(cls, f"class{cls}")] = views
        if not math.isnan(views["level2"]["ap"]):
            mean_ap += views["level2"]["ap"]
            mean_aph += views["level2"]["aph"]
            n_classes += 1

    if n_classes:
        mean_ap /= n_classes
        mean_aph /= n_classes
    else:
        mean_ap = mean_aph = float("nan")

    protocol = {
        "iou_mode": iou_mode,
        "iou_thresholds": {names.get(c, f"class{c}"): t
                           for c, t in sorted(thresholds.items())},
        "distance_bands_m": [0.0, b1, b2],
        "level1_min_points": LEVEL1_MIN_POINTS,
        "level2_min_points": LEVEL2_MIN_POINTS,
        "interpolation_points": 101,
    }
    return EvalReport(protocol, per_class, mean_ap, mean_aph)


def count_points_in_boxes(cloud_points: np.ndarray,
                          boxes: list[BoundingBox3D]) -> list[int]:
    """Per-box in-box point counts (for difficulty levels)."""
    from .geom import PointCloud, points_in_box
    cloud = PointCloud(0, cloud_points)
    return [len(points_in_box(cloud, b)) for b in boxes]
