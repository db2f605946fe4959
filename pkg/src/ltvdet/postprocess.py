"""Raw grid predictions to final detections: decode, threshold, per-class NMS."""
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .exceptions import ConfigError, ShapeError
from .imaging import PadRecord
from .losses import box_iou_matrix, cxcywh_to_xyxy, decode_cells
from .tensor import sigmoid


@dataclass(frozen=True)
class Detection:
    bbox: Tuple[float, float, float, float]
    score: float
    class_id: int
    level: int = 0

    @property
    def x1(self):
        return self.bbox[0]

    @property
    def y1(self):
        return self.bbox[1]


def decode(preds, config, record=None, min_score=0.0):
    """Turn per-level raw predictions of ONE image into detections.

    Each cell (i, j) at stride s gives center ((j + sig(tx)) s, (i + sig(ty)) s)
    and size (s exp(tw), s exp(th)) with tw, th clamped to the configured
    bound. Score is sig(obj) * max_k sig(class_k). With a ``PadRecord`` boxes
    are mapped back to original-frame pixels, clipped, and zero-area boxes
    dropped. ``min_score`` skips cells early; it is not the deployment threshold.
    """
    if len(preds) != len(config.strides):
        raise ShapeError(f"expected {len(config.strides)} levels, got {len(preds)}")
    dets = []
    for level, (p, s) in enumerate(zip(preds, config.strides)):
        if p.ndim == 4:
            if p.shape[0] != 1:
                raise ShapeError("decode handles one image at a time; slice the batch first")
            p = p[0]
        if p.shape[0] != config.num_outputs:
            raise ShapeError(f"level {level} has {p.shape[0]} channels, expected {config.num_outputs}")
        if record is not None:
            ph, pw = record.padded_dims
            if (p.shape[1] * s, p.shape[2] * s) != (ph, pw):
                raise ConfigError(
                    f"pad record dims {ph}x{pw} do not match level {level} grid {p.shape[1:]} at stride {s}"
                )
        p = p.astype(np.float64)
        cls_prob = sigmoid(p[5:])
        best = cls_prob.argmax(axis=0)
        score = sigmoid(p[4]) * np.take_along_axis(cls_prob, best[None], 0)[0]
        ii, jj = np.nonzero(score >= min_score) if min_score > 0 else np.indices(score.shape).reshape(2, -1)
        if not len(ii):
            continue
        boxes = cxcywh_to_xyxy(decode_cells(p[:4], s, config.head_box_clamp)[ii, jj])
        if record is not None:
            boxes = boxes * np.array([record.scale_x, record.scale_y] * 2)
            boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, record.orig_w)
            boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, record.orig_h)
        for k, (i, j) in enumerate(zip(ii, jj)):
            b = boxes[k]
            if b[2] <= b[0] or b[3] <= b[1]:
                continue
            dets.append(Detection(tuple(float(v) for v in b), float(score[i, j]), int(best[i, j]), level))
    return dets


def sort_key(d):
    return (-d.score, d.bbox[0], d.bbox[1])


def threshold_filter(dets, tau=0.5):
    """Keep detections with score >= tau, ordered by descending score (stable)."""
    kept = [d for d in dets if d.score >= tau]
    return sorted(kept, key=lambda d: -d.score)


def nms(dets, iou_thresh=0.5):
    """Greedy per-class suppression.

    Detections are ranked by (score desc, x1 asc, y1 asc); a detection is
    removed when a higher-ranked kept detection of the same class overlaps it
    with IoU > ``iou_thresh``.
    """
    ranked = sorted(dets, key=sort_key)
    if not ranked:
        return []
    boxes = np.array([d.bbox for d in ranked], dtype=np.float64)
    classes = np.array([d.class_id for d in ranked])
    ious = box_iou_matrix(boxes, boxes)
    alive = np.ones(len(ranked), dtype=bool)
    keep = []
    for i in range(len(ranked)):
        if not alive[i]:
            continue
        keep.append(ranked[i])
        alive &= ~((ious[i] > iou_thresh) & (classes == classes[i]))
    return keep


def postprocess(preds, config, record=None, tau=0.5, iou_thresh=0.5):
    """decode -> threshold -> NMS for one image."""
    return nms(threshold_filter(decode(preds, config, record, min_score=tau), tau), iou_thresh)


def encode_box(box, level_stride, cell, clamp=8.0):
    """Inverse of the decode rule for a box assigned to ``cell`` = (i, j)."""
    x1, y1, x2, y2 = box
    i, j = cell
    s = level_stride
    fx = (x1 + x2) / 2 / s - j
    fy = (y1 + y2) / 2 / s - i
    if not (0 < fx < 1 and 0 < fy < 1):
        raise ConfigError("box center must lie strictly inside the cell to be encodable")
    tx, ty = np.log(fx / (1 - fx)), np.log(fy / (1 - fy))
    tw, th = np.log((x2 - x1) / s), np.log((y2 - y1) / s)
    if abs(tw) > clamp or abs(th) > clamp:
        raise ConfigError("box size outside the decodable range")
    return np.array([tx, ty, tw, th])
