"""Box geometry, the three-term detection loss and grid target assignment."""
from dataclasses import dataclass, field
from typing import List
import logging
import math

import numpy as np

from .exceptions import DataError, ShapeError, ConfigError
from .tensor import sigmoid

logger = logging.getLogger(__name__)

_V_SCALE = 4.0 / math.pi**2


def _as_box(b, name="box"):
    b = np.asarray(b, dtype=np.float64)
    if b.shape[-1] != 4:
        raise DataError(f"{name} must have 4 coordinates [x1, y1, x2, y2], got shape {b.shape}")
    if np.any(b[..., 2] < b[..., 0]) or np.any(b[..., 3] < b[..., 1]):
        raise DataError(f"{name} is inverted (x2 < x1 or y2 < y1): {b.tolist()}")
    return b


def box_area(b):
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def iou(a, b):
    """Intersection over union of two [x1, y1, x2, y2] boxes; 0 for an empty union."""
    a, b = _as_box(a), _as_box(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return float(inter / union) if union > 0 else 0.0


def box_iou_matrix(a, b):
    """Pairwise IoU between (M, 4) and (K, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def xyxy_to_cxcywh(b):
    b = np.asarray(b, dtype=np.float64)
    return np.stack(
        [(b[..., 0] + b[..., 2]) / 2, (b[..., 1] + b[..., 3]) / 2, b[..., 2] - b[..., 0], b[..., 3] - b[..., 1]],
        axis=-1,
    )


def cxcywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    hw, hh = b[..., 2] / 2, b[..., 3] / 2
    return np.stack([b[..., 0] - hw, b[..., 1] - hh, b[..., 0] + hw, b[..., 1] + hh], axis=-1)


def ciou_loss_and_grad(pred, gt):
    """Vectorized CIoU loss with its exact gradient.

    ``pred`` is (M, 4) in center format (cx, cy, w, h); ``gt`` is (M, 4) in
    corner format. Returns ``(loss[M], dloss/dpred[M, 4])``. The trade-off
    weight alpha is differentiated through rather than held constant, so the
    gradient is that of the returned value.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    cx, cy, w, h = pred.T
    if np.any(w <= 0) or np.any(h <= 0):
        raise DataError("CIoU needs positive predicted widths and heights")
    gx1, gy1, gx2, gy2 = gt.T
    gw, gh = gx2 - gx1, gy2 - gy1
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise DataError("CIoU needs positive ground-truth widths and heights")
    gcx, gcy = (gx1 + gx2) / 2, (gy1 + gy2) / 2
    px1, py1, px2, py2 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2

    # overlap
    ix_hi, ix_lo = np.minimum(px2, gx2), np.maximum(px1, gx1)
    iy_hi, iy_lo = np.minimum(py2, gy2), np.maximum(py1, gy1)
    iw_raw, ih_raw = ix_hi - ix_lo, iy_hi - iy_lo
    iw, ih = np.maximum(iw_raw, 0), np.maximum(ih_raw, 0)
    inter = iw * ih
    union = w * h + gw * gh - inter
    iou_v = inter / union

    # enclosing box diagonal and center distance
    ex_hi, ex_lo = np.maximum(px2, gx2), np.minimum(px1, gx1)
    ey_hi, ey_lo = np.maximum(py2, gy2), np.minimum(py1, gy1)
    cw, ch = ex_hi - ex_lo, ey_hi - ey_lo
    c2 = cw**2 + ch**2
    rho2 = (cx - gcx) ** 2 + (cy - gcy) ** 2

    # aspect-ratio consistency
    dat = np.arctan(gw / gh) - np.arctan(w / h)
    v = _V_SCALE * dat**2
    denom = (1.0 - iou_v) + v
    safe = denom > 0
    dsafe = np.where(safe, denom, 1.0)
    av = np.where(safe, v * v / dsafe, 0.0)  # alpha * v with alpha = v / denom

    loss = 1.0 - iou_v + rho2 / c2 + av

    # backward
    d_iou = -1.0 + np.where(safe, v * v / dsafe**2, 0.0)
    d_v = np.where(safe, 2 * v / dsafe - v * v / dsafe**2, 0.0)
    d_rho2 = 1.0 / c2
    d_c2 = -rho2 / c2**2

    d_inter = d_iou * (union + inter) / union**2
    d_area = d_iou * (-inter / union**2)

    d_iw = d_inter * ih * (iw_raw > 0)
    d_ih = d_inter * iw * (ih_raw > 0)
    # d(min(px2, gx2))/d px2 and d(max(px1, gx1))/d px1
    d_px2 = d_iw * (px2 <= gx2)
    d_px1 = -d_iw * (px1 >= gx1)
    d_py2 = d_ih * (py2 <= gy2)
    d_py1 = -d_ih * (py1 >= gy1)

    d_cw = d_c2 * 2 * cw
    d_ch = d_c2 * 2 * ch
    d_px2 += d_cw * (px2 >= gx2)
    d_px1 -= d_cw * (px1 <= gx1)
    d_py2 += d_ch * (py2 >= gy2)
    d_py1 -= d_ch * (py1 <= gy1)

    d_cx = d_px1 + d_px2 + d_rho2 * 2 * (cx - gcx)
    d_cy = d_py1 + d_py2 + d_rho2 * 2 * (cy - gcy)
    d_w = (d_px2 - d_px1) / 2 + d_area * h
    d_h = (d_py2 - d_py1) / 2 + d_area * w
    # d atan(w/h) = (h dw - w dh) / (w^2 + h^2)
    dv_datan = d_v * _V_SCALE * 2 * dat * -1.0
    r2 = w**2 + h**2
    d_w += dv_datan * h / r2
    d_h += dv_datan * (-w) / r2

    return loss, np.stack([d_cx, d_cy, d_w, d_h], axis=1)


def ciou_loss(pred, gt):
    """CIoU loss between two corner-format boxes (1 - IoU + distance + aspect terms)."""
    p = _as_box(pred, "pred")
    g = _as_box(gt, "gt")
    if p[2] <= p[0] or p[3] <= p[1] or g[2] <= g[0] or g[3] <= g[1]:
        raise DataError("CIoU needs boxes with positive width and height")
    loss, _ = ciou_loss_and_grad(xyxy_to_cxcywh(p)[None], g[None])
    return float(loss[0])


def bce_with_logits(logits, targets):
    """Elementwise stable binary cross-entropy and its gradient wrt the logits."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if z.shape != t.shape:
        raise ShapeError(f"logits shape {z.shape} != targets shape {t.shape}")
    if np.any(t < 0) or np.any(t > 1):
        raise DataError("BCE targets must lie in [0, 1]")
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return loss, sigmoid(z) - t


def bce_loss(logits, targets):
    """Mean binary cross-entropy over all elements."""
    loss, _ = bce_with_logits(logits, targets)
    return float(loss.mean()) if loss.size else 0.0


# --------------------------------------------------------------- targets

LEVEL_SIZE_THRESHOLDS = (64.0, 128.0)


@dataclass
class TargetGrids:
    """Per-level training targets for a batch.

    ``obj[l]`` is (N, H, W) in {0, 1}; ``cls[l]`` holds the class index of the
    assigned box or -1; ``boxes[l]`` is (N, H, W, 4) corner-format pixels.
    """

    obj: List[np.ndarray]
    cls: List[np.ndarray]
    boxes: List[np.ndarray]
    strides: tuple
    dropped: int = 0

    @property
    def matched_count(self):
        return int(sum((c >= 0).sum() for c in self.cls))


def level_for_box(box, strides):
    side = math.sqrt(box_area(np.asarray(box, dtype=np.float64)))
    lo, hi = LEVEL_SIZE_THRESHOLDS
    if side < lo:
        return 0
    if side <= hi:
        return min(1, len(strides) - 1)
    return len(strides) - 1


def assign_targets(boxes, classes, config, padded_dims):
    """Assign each ground-truth box of one image to a single pyramid cell.

    ``boxes`` are corner-format pixels at the padded resolution,
    ``padded_dims`` is (H, W). The level comes from the box side length
    sqrt(area); the cell is the one holding the box center. When two boxes
    want the same cell the larger keeps it and the other moves one level
    coarser; if that cell is also taken it is dropped and counted.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    if len(boxes) != len(classes):
        raise DataError(f"{len(boxes)} boxes but {len(classes)} class ids")
    h, w = padded_dims
    strides = config.strides
    if h % max(strides) or w % max(strides):
        raise ShapeError(f"padded dims {padded_dims} not divisible by {max(strides)}")
    obj = [np.zeros((h // s, w // s)) for s in strides]
    cls = [np.full((h // s, w // s), -1, dtype=np.int64) for s in strides]
    tgt = [np.zeros((h // s, w // s, 4)) for s in strides]
    _as_box(boxes, "annotation box")
    areas = box_area(boxes)
    if np.any(areas <= 0):
        raise DataError("zero-area box cannot be assigned")
    if np.any(boxes[:, :2] < -1e-6) or np.any(boxes[:, 2] > w + 1e-6) or np.any(boxes[:, 3] > h + 1e-6):
        raise DataError(f"box outside padded image {w}x{h}")
    if np.any((classes < 0) | (classes >= config.num_classes)):
        raise DataError(f"class id out of range for {config.num_classes} classes")

    dropped = 0
    for k in np.argsort(-areas, kind="stable"):
        b = boxes[k]
        cx, cy = (b[0] + b[2]) / 2, (b[1] + b[3]) / 2
        level = level_for_box(b, strides)
        for attempt in (level, level + 1):
            if attempt >= len(strides):
                dropped += 1
                break
            s = strides[attempt]
            gh, gw = obj[attempt].shape
            i = min(int(cy // s), gh - 1)
            j = min(int(cx // s), gw - 1)
            if cls[attempt][i, j] < 0:
                obj[attempt][i, j] = 1.0
                cls[attempt][i, j] = classes[k]
                tgt[attempt][i, j] = b
                break
        else:
            dropped += 1
    if dropped:
        logger.warning("target assignment dropped %d colliding box(es)", dropped)
    return TargetGrids(obj, cls, tgt, tuple(strides), dropped)


def collate_targets(grids):
    """Stack single-image TargetGrids into one batch."""
    first = grids[0]
    return TargetGrids(
        [np.stack([g.obj[l] for g in grids]) for l in range(len(first.strides))],
        [np.stack([g.cls[l] for g in grids]) for l in range(len(first.strides))],
        [np.stack([g.boxes[l] for g in grids]) for l in range(len(first.strides))],
        first.strides,
        sum(g.dropped for g in grids),
    )


# ------------------------------------------------------------------ loss


@dataclass
class LossWeights:
    lambda_obj: float = 1.0
    lambda_cls: float = 1.0
    lambda_loc: float = 5.0

    def __post_init__(self):
        for name in ("lambda_obj", "lambda_cls", "lambda_loc"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {v}")
            setattr(self, name, v)


@dataclass
class LossBreakdown:
    total: float
    obj: float
    cls: float
    loc: float
    matched_cell_count: int = 0

    @classmethod
    def combine(cls, obj, cls_, loc, weights, matched=0):
        total = weights.lambda_obj * obj + weights.lambda_cls * cls_ + weights.lambda_loc * loc
        return cls(float(total), float(obj), float(cls_), float(loc), int(matched))


def decode_cells(raw, stride, clamp):
    """Center-format pixel boxes for every cell of one level.

    ``raw`` is (..., 4, H, W) holding (tx, ty, tw, th). Returns (..., H, W, 4).
    """
    h, w = raw.shape[-2:]
    jj = np.arange(w)[None, :]
    ii = np.arange(h)[:, None]
    cx = (jj + sigmoid(raw[..., 0, :, :])) * stride
    cy = (ii + sigmoid(raw[..., 1, :, :])) * stride
    bw = stride * np.exp(np.clip(raw[..., 2, :, :], -clamp, clamp))
    bh = stride * np.exp(np.clip(raw[..., 3, :, :], -clamp, clamp))
    return np.stack([cx, cy, bw, bh], axis=-1)


def _loss_core(preds, targets, weights, clamp, want_grad):
    if len(preds) != len(targets.strides):
        raise ShapeError(f"{len(preds)} prediction levels vs {len(targets.strides)} target levels")
    n_cells = 0
    obj_sum = 0.0
    pos = []
    for l, p in enumerate(preds):
        n, c, h, w = p.shape
        if targets.obj[l].shape != (n, h, w):
            raise ShapeError(f"level {l}: prediction grid {(n, h, w)} vs target grid {targets.obj[l].shape}")
        n_cells += n * h * w
        mask = targets.cls[l] >= 0
        pos.append(np.nonzero(mask))
    num_classes = preds[0].shape[1] - 5
    m_total = sum(len(ix[0]) for ix in pos)

    grads = [np.zeros(p.shape, dtype=np.float64) for p in preds] if want_grad else None
    cls_sum = 0.0
    loc_sum = 0.0
    for l, (p, (bn, bi, bj)) in enumerate(zip(preds, pos)):
        p64 = p.astype(np.float64, copy=False)
        lo, go = bce_with_logits(p64[:, 4], targets.obj[l])
        obj_sum += lo.sum()
        if want_grad:
            grads[l][:, 4] = weights.lambda_obj * go / n_cells
        if not len(bn):
            continue
        onehot = np.zeros((len(bn), num_classes))
        onehot[np.arange(len(bn)), targets.cls[l][bn, bi, bj]] = 1.0
        logits = p64[bn, 5:, bi, bj]
        lc, gc = bce_with_logits(logits, onehot)
        cls_sum += lc.sum()

        s = targets.strides[l]
        t = p64[bn, :4, bi, bj]
        sx, sy = sigmoid(t[:, 0]), sigmoid(t[:, 1])
        tw, th = np.clip(t[:, 2], -clamp, clamp), np.clip(t[:, 3], -clamp, clamp)
        box = np.stack([(bj + sx) * s, (bi + sy) * s, s * np.exp(tw), s * np.exp(th)], axis=1)
        ll, gl = ciou_loss_and_grad(box, targets.boxes[l][bn, bi, bj])
        loc_sum += ll.sum()
        if want_grad:
            grads[l][bn, 5:, bi, bj] = weights.lambda_cls * gc / (m_total * num_classes)
            scale = weights.lambda_loc / m_total
            inside_w = (t[:, 2] > -clamp) & (t[:, 2] < clamp)
            inside_h = (t[:, 3] > -clamp) & (t[:, 3] < clamp)
            dt = np.stack(
                [
                    gl[:, 0] * s * sx * (1 - sx),
                    gl[:, 1] * s * sy * (1 - sy),
                    gl[:, 2] * box[:, 2] * inside_w,
                    gl[:, 3] * box[:, 3] * inside_h,
                ],
                axis=1,
            )
            grads[l][bn, :4, bi, bj] = scale * dt

    obj = obj_sum / n_cells
    cls_ = cls_sum / (m_total * num_classes) if m_total else 0.0
    loc = loc_sum / m_total if m_total else 0.0
    return LossBreakdown.combine(obj, cls_, loc, weights, m_total), grads


def composite_loss(preds, targets, weights=None, clamp=8.0):
    """Weighted objectness + classification + CIoU loss.

    Objectness BCE is averaged over every cell of every level; class BCE and
    CIoU are averaged over assigned cells only.
    """
    return _loss_core(preds, targets, weights or LossWeights(), clamp, False)[0]


def composite_loss_and_grad(preds, targets, weights=None, clamp=8.0):
    """Like :func:`composite_loss` but also returns d(total)/d(preds) per level."""
    return _loss_core(preds, targets, weights or LossWeights(), clamp, True)
