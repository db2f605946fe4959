"""Detection scoring and benchmarking.

Covers greedy IoU matching, all-point interpolated AP and mAP@0.5, F1
threshold calibration, per-frame confidence series for paired resolution
runs, hot-background false-positive rates and wall-clock throughput.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence
import csv
import logging
import math
import time
import warnings

import numpy as np

from .exceptions import DataError
from .losses import box_iou_matrix

logger = logging.getLogger(__name__)


@dataclass
class MatchResult:
    """Per-detection TP flags (score order) and per-GT matched flags for one image/class."""

    scores: np.ndarray
    tp: np.ndarray
    matched_gt: np.ndarray  # for each detection, index of the matched GT or -1
    gt_matched: np.ndarray

    @property
    def num_tp(self):
        return int(self.tp.sum())

    @property
    def num_fp(self):
        return int(len(self.tp) - self.tp.sum())


def match(det_boxes, det_scores, gt_boxes, iou_thresh=0.5):
    """Greedy matching by descending score.

    A detection is a true positive when its best-overlapping still-unmatched
    ground truth has IoU >= ``iou_thresh``; that ground truth is then consumed.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    det_scores = np.asarray(det_scores, dtype=np.float64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-det_scores, kind="stable")
    det_boxes, det_scores = det_boxes[order], det_scores[order]
    tp = np.zeros(len(det_boxes), dtype=bool)
    which = np.full(len(det_boxes), -1)
    used = np.zeros(len(gt_boxes), dtype=bool)
    if len(gt_boxes) and len(det_boxes):
        ious = box_iou_matrix(det_boxes, gt_boxes)
        for d in range(len(det_boxes)):
            cand = np.where(used, -1.0, ious[d])
            g = int(cand.argmax())
            if cand[g] >= iou_thresh:
                tp[d] = True
                which[d] = g
                used[g] = True
    return MatchResult(det_scores, tp, which, used)


def average_precision(scores, tp, n_gt):
    """All-point interpolated AP.

    The precision envelope (running max from the right) is integrated over
    recall increments. Tied scores are evaluated as one threshold, so the
    result does not depend on how ties are ordered. Returns NaN when
    ``n_gt == 0``.
    """
    if n_gt <= 0:
        return float("nan")
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    if not len(scores):
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], tp[order]
    ctp = np.cumsum(t)
    cfp = np.cumsum(~t)
    # last index of each run of equal scores
    ends = np.nonzero(np.r_[s[1:] != s[:-1], True])[0]
    recall = ctp[ends] / n_gt
    precision = ctp[ends] / (ctp[ends] + cfp[ends])
    mrec = np.r_[0.0, recall]
    mpre = np.r_[precision, 0.0]
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[:-1]))


def map_at_50(class_aps):
    """Unweighted mean over classes that have ground truth (NaN entries skipped)."""
    aps = dict(class_aps) if not isinstance(class_aps, dict) else class_aps
    valid = [v for v in aps.values() if not math.isnan(v)]
    if not aps:
        raise DataError("mAP needs at least one class")
    if not valid:
        raise DataError("no class has ground truth; mAP is undefined")
    return float(np.mean(valid))


def precision_recall_f1(tp_count, fp_count, n_gt):
    p = tp_count / (tp_count + fp_count) if tp_count + fp_count else 0.0
    r = tp_count / n_gt if n_gt else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def pr_sweep(scores, tp, n_gt, thresholds):
    """Precision, recall and F1 at each threshold (detections with score >= t)."""
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    rows = []
    for t in thresholds:
        keep = scores >= t
        rows.append((float(t),) + precision_recall_f1(int(tp[keep].sum()), int((~tp[keep]).sum()), n_gt))
    return rows


def calibrate_threshold(thresholds, f1, tol=1e-12):
    """Threshold maximizing F1; ties go to the lowest threshold (fewer misses)."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    f1 = np.asarray(f1, dtype=np.float64)
    if not len(thresholds):
        raise DataError("empty threshold sweep")
    best = f1.max()
    return float(thresholds[f1 >= best - tol].min())


# ----------------------------------------------------------- dataset level


@dataclass
class ClassCurve:
    scores: np.ndarray
    tp: np.ndarray
    n_gt: int
    ap: float


def evaluate_detections(dets_per_image, gts_per_image, num_classes, iou_thresh=0.5):
    """Per-class AP over a dataset.

    ``dets_per_image``: list of detection lists (``Detection``-like objects
    with bbox, score, class_id). ``gts_per_image``: list of ``(boxes,
    classes)``. Returns ``(class_ap, curves)``; classes without ground truth
    get NaN AP and are skipped by :func:`map_at_50` with a warning.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise DataError(f"{len(dets_per_image)} detection lists vs {len(gts_per_image)} images")
    curves = {}
    for c in range(num_classes):
        scores, tps, n_gt = [], [], 0
        for dets, (gb, gc) in zip(dets_per_image, gts_per_image):
            gb = np.asarray(gb, dtype=np.float64).reshape(-1, 4)
            gc = np.asarray(gc).reshape(-1)
            g = gb[gc == c]
            n_gt += len(g)
            dc = [d for d in dets if d.class_id == c]
            if not dc:
                continue
            m = match([d.bbox for d in dc], [d.score for d in dc], g, iou_thresh)
            scores.append(m.scores)
            tps.append(m.tp)
        s = np.concatenate(scores) if scores else np.zeros(0)
        t = np.concatenate(tps) if tps else np.zeros(0, dtype=bool)
        ap = average_precision(s, t, n_gt)
        if n_gt == 0:
            warnings.warn(f"class {c} has no ground truth; excluded from mAP", stacklevel=2)
        curves[c] = ClassCurve(s, t, n_gt, ap)
    return {c: cv.ap for c, cv in curves.items()}, curves


def dataset_map(dets_per_image, gts_per_image, num_classes, iou_thresh=0.5):
    class_ap, _ = evaluate_detections(dets_per_image, gts_per_image, num_classes, iou_thresh)
    return map_at_50(class_ap)


# -------------------------------------------------------------- time series


@dataclass
class FrameStats:
    frame: int
    count: int
    mean: Optional[float]  # None when the frame has no detections
    max: Optional[float]
    std: Optional[float]


def confidence_timeseries(video_dets):
    """Per-frame detection count and confidence statistics.

    Frames without detections report ``None`` for the confidence fields so
    misses do not drag the mean down; the count column records them.
    """
    out = []
    for k, dets in enumerate(video_dets):
        sc = np.array([d.score for d in dets], dtype=np.float64)
        if len(sc):
            out.append(FrameStats(k, len(sc), float(sc.mean()), float(sc.max()), float(sc.std())))
        else:
            out.append(FrameStats(k, 0, None, None, None))
    return out


@dataclass
class PairedDelta:
    frame: int
    count_a: int
    count_b: int
    mean_a: Optional[float]
    mean_b: Optional[float]
    max_a: Optional[float] = None
    max_b: Optional[float] = None

    @property
    def count_delta(self):
        return self.count_b - self.count_a

    @property
    def mean_delta(self):
        if self.mean_a is None or self.mean_b is None:
            return None
        return self.mean_b - self.mean_a

    @property
    def max_delta(self):
        if self.max_a is None or self.max_b is None:
            return None
        return self.max_b - self.max_a


def paired_deltas(series_a, series_b):
    """Frame-aligned comparison of two runs over the same sequence."""
    if len(series_a) != len(series_b):
        raise DataError(f"paired series differ in length: {len(series_a)} vs {len(series_b)}")
    return [PairedDelta(a.frame, a.count, b.count, a.mean, b.mean, a.max, b.max) for a, b in zip(series_a, series_b)]


def count_stability(series):
    """Absolute frame-to-frame change in detection count (0 for the first frame)."""
    counts = [s.count for s in series]
    return [0] + [abs(b - a) for a, b in zip(counts[:-1], counts[1:])]


# --------------------------------------------------------- hot background


def false_positives(dets, gt_boxes, gt_classes, iou_thresh=0.5):
    """False-positive count for one frame, matching per class."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes).reshape(-1)
    fp = 0
    for c in {d.class_id for d in dets}:
        dc = [d for d in dets if d.class_id == c]
        m = match([d.bbox for d in dc], [d.score for d in dc], gt_boxes[gt_classes == c], iou_thresh)
        fp += m.num_fp
    return fp


def hot_bg_fp_rate(dets_per_frame, gts_per_frame, tags_per_frame, split_tag="hot-bg", iou_thresh=0.5):
    """Mean false positives per frame over frames carrying ``split_tag``."""
    fps, n = 0, 0
    for dets, (gb, gc), tags in zip(dets_per_frame, gts_per_frame, tags_per_frame):
        if split_tag not in tags:
            continue
        n += 1
        fps += false_positives(dets, gb, gc, iou_thresh)
    if n == 0:
        raise DataError(f"no frames tagged {split_tag!r}")
    return fps / n


# -------------------------------------------------------------- throughput


@dataclass
class FPSStats:
    frames: int
    mean_fps: float
    p50_ms: float
    p99_ms: float
    latencies_ms: List[float] = field(repr=False, default_factory=list)


def fps_bench(pipeline, frames, warmup=10):
    """Time ``pipeline(frame)`` per frame with a monotonic clock.

    The first ``warmup`` frames are run but not timed; statistics cover the
    remaining ``len(frames) - warmup`` frames.
    """
    frames = list(frames)
    if not frames:
        raise DataError("fps_bench needs at least one frame")
    if len(frames) < warmup + 10:
        raise DataError(f"fps_bench needs at least warmup + 10 = {warmup + 10} frames, got {len(frames)}")
    for f in frames[:warmup]:
        pipeline(f)
    lat = []
    for f in frames[warmup:]:
        t0 = time.perf_counter()
        pipeline(f)
        lat.append(time.perf_counter() - t0)
    lat = np.array(lat)
    return FPSStats(
        frames=len(lat),
        mean_fps=float(len(lat) / lat.sum()),
        p50_ms=float(np.percentile(lat, 50) * 1e3),
        p99_ms=float(np.percentile(lat, 99) * 1e3),
        latencies_ms=(lat * 1e3).tolist(),
    )


# ------------------------------------------------------------------ report


def _f(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


@dataclass
class EvalReport:
    class_ap: Dict[int, float]
    map50: float
    precision: float
    recall: float
    f1: float
    tau: float
    curves: Dict[int, ClassCurve] = field(repr=False, default_factory=dict)
    series: List[FrameStats] = field(repr=False, default_factory=list)
    paired: List[PairedDelta] = field(repr=False, default_factory=list)
    fps: Optional[FPSStats] = None
    hot_bg_fp_per_frame: Optional[float] = None
    calibrated_tau: Optional[float] = None

    def write(self, out_dir, class_names=None):
        """Write pr_curve.csv, timeseries.csv, summary.csv and summary.txt.

        With a paired run, paired.csv holds both runs' per-frame count and
        confidence series side by side with their deltas (second minus first).
        """
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "pr_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class_id", "rank", "score", "tp", "precision", "recall"])
            for c, cv in sorted(self.curves.items()):
                order = np.argsort(-cv.scores, kind="stable")
                ctp = np.cumsum(cv.tp[order])
                for r, k in enumerate(order):
                    prec = ctp[r] / (r + 1)
                    rec = ctp[r] / cv.n_gt if cv.n_gt else 0.0
                    w.writerow([c, r + 1, _f(cv.scores[k]), int(cv.tp[k]), _f(prec), _f(rec)])
        with open(out / "timeseries.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame", "count", "count_change", "mean_conf", "max_conf", "std_conf"])
            for s, d in zip(self.series, count_stability(self.series)):
                w.writerow([s.frame, s.count, d, _f(s.mean), _f(s.max), _f(s.std)])
        if self.paired:
            with open(out / "paired.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["frame", "count_a", "count_b", "count_delta", "mean_conf_a", "mean_conf_b",
                            "mean_conf_delta", "max_conf_a", "max_conf_b", "max_conf_delta"])
                for p in self.paired:
                    w.writerow([p.frame, p.count_a, p.count_b, p.count_delta, _f(p.mean_a), _f(p.mean_b),
                                _f(p.mean_delta), _f(p.max_a), _f(p.max_b), _f(p.max_delta)])
        rows = [("map50", self.map50), ("precision", self.precision), ("recall", self.recall), ("f1", self.f1), ("tau", self.tau)]
        for c, ap in sorted(self.class_ap.items()):
            name = class_names[c] if class_names and c < len(class_names) else str(c)
            rows.append((f"ap_{name}", ap))
        if self.calibrated_tau is not None:
            rows.append(("calibrated_tau", self.calibrated_tau))
        if self.hot_bg_fp_per_frame is not None:
            rows.append(("hot_bg_fp_per_frame", self.hot_bg_fp_per_frame))
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for k, v in rows:
                w.writerow([k, _f(v)])
        with open(out / "summary.txt", "w") as fh:
            for k, v in rows:
                fh.write(f"{k:>22}: {_f(v) or 'n/a'}\n")


def build_report(dets_per_image, gts_per_image, num_classes, tau=0.5, iou_thresh=0.5, tags_per_image=None):
    """Score a dataset: AP per class, mAP, P/R/F1 at ``tau`` and a calibrated threshold."""
    class_ap, curves = evaluate_detections(dets_per_image, gts_per_image, num_classes, iou_thresh)
    valid = [v for v in class_ap.values() if not math.isnan(v)]
    map50 = float(np.mean(valid)) if valid else float("nan")
    all_s = np.concatenate([cv.scores for cv in curves.values()]) if curves else np.zeros(0)
    all_t = np.concatenate([cv.tp for cv in curves.values()]) if curves else np.zeros(0, dtype=bool)
    n_gt = sum(cv.n_gt for cv in curves.values())
    keep = all_s >= tau
    p, r, f1 = precision_recall_f1(int(all_t[keep].sum()), int((~all_t[keep]).sum()), n_gt)
    grid = np.round(np.arange(0.05, 1.0, 0.05), 2)
    sweep = pr_sweep(all_s, all_t, n_gt, grid)
    tau_star = calibrate_threshold([row[0] for row in sweep], [row[3] for row in sweep])
    hot = None
    if tags_per_image is not None and any("hot-bg" in t for t in tags_per_image):
        thresholded = [[d for d in dets if d.score >= tau] for dets in dets_per_image]
        hot = hot_bg_fp_rate(thresholded, gts_per_image, tags_per_image, iou_thresh=iou_thresh)
    return EvalReport(class_ap, map50, p, r, f1, tau, curves, [], [], None, hot, tau_star)
