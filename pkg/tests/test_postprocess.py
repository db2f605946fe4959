import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import box_iou, brute_nms
from ltvdet import graph, losses
from ltvdet import postprocess as P
from ltvdet.exceptions import ConfigError, ShapeError
from ltvdet.imaging import PadRecord

CFG = graph.shrunk_config()


def blank_preds(h=64, w=64, obj=-20.0):
    preds = []
    for s in CFG.strides:
        p = np.zeros((CFG.num_outputs, h // s, w // s))
        p[4] = obj
        preds.append(p)
    return preds


def det(box, score, cls=0):
    return P.Detection(tuple(float(v) for v in box), float(score), cls)


# ------------------------------------------------------------------ decode


def test_decode_zero_offsets_and_sizes():
    preds = blank_preds(obj=20.0)
    preds[0][5:] = 20.0
    dets = [d for d in P.decode(preds, CFG) if d.level == 0]
    d = next(d for d in dets if d.bbox[0] == pytest.approx(24) and d.bbox[1] == pytest.approx(16))
    x1, y1, x2, y2 = d.bbox
    assert ((x1 + x2) / 2, (y1 + y2) / 2) == pytest.approx((3.5 * 8, 2.5 * 8))
    assert (x2 - x1, y2 - y1) == pytest.approx((8, 8))


def test_decode_objectness_gates_score():
    preds = blank_preds(obj=-20.0)
    for p in preds:
        p[5:] = 50.0
    dets = P.decode(preds, CFG)
    assert len(dets) == sum(p.shape[1] * p.shape[2] for p in preds)
    assert max(d.score for d in dets) < 1e-8


def test_decode_score_is_product():
    preds = blank_preds(obj=0.0)
    preds[1][5] = np.log(3.0)  # class 0 prob 0.75
    preds[1][6] = -1.0
    d = [d for d in P.decode(preds, CFG) if d.level == 1][0]
    assert d.score == pytest.approx(0.5 * 0.75)
    assert d.class_id == 0


def test_decode_clamps_box_size():
    preds = blank_preds(obj=0.0)
    preds[0][2:4] = 1e6
    d = [d for d in P.decode(preds, CFG) if d.level == 0][0]
    assert np.isfinite(d.bbox).all()


def test_decode_maps_through_pad_record():
    rec = PadRecord(640, 512, 140, 112, 20, 16)
    preds = blank_preds(128, 160, obj=20.0)
    for d in P.decode(preds, CFG, rec):
        x1, y1, x2, y2 = d.bbox
        assert 0 <= x1 < x2 <= 640 and 0 <= y1 < y2 <= 512
        assert 0 <= d.score <= 1


def test_decode_record_mismatch():
    with pytest.raises(ConfigError):
        P.decode(blank_preds(64, 64), CFG, PadRecord(140, 112, 140, 112, 20, 16))


def test_decode_level_and_channel_errors():
    preds = blank_preds()
    with pytest.raises(ShapeError):
        P.decode(preds[:2], CFG)
    with pytest.raises(ShapeError):
        P.decode([p[:4] for p in preds], CFG)
    with pytest.raises(ShapeError):
        P.decode([np.stack([p, p]) for p in preds], CFG)


@settings(max_examples=40, deadline=None)
@given(st.floats(4.0, 120.0), st.floats(4.0, 120.0), st.floats(0.05, 0.95), st.floats(0.05, 0.95),
       st.integers(-1, 1), st.integers(-1, 1))
def test_encode_decode_fixpoint(bw, bh, fx, fy, di, dj):
    h = w = 256
    level = losses.level_for_box([0, 0, bw, bh], CFG.strides)
    s = CFG.strides[level]
    ci, cj = 128 // s + di, 128 // s + dj  # centred cells keep every box inside the image
    cx, cy = (cj + fx) * s, (ci + fy) * s
    box = np.array([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2])
    grids = losses.assign_targets(box[None], [1], CFG, (h, w))
    (i, j), = zip(*np.nonzero(grids.cls[level] >= 0))
    preds = blank_preds(h, w)
    preds[level][:4, i, j] = P.encode_box(box, s, (i, j), CFG.head_box_clamp)
    preds[level][4, i, j] = 20.0
    preds[level][6, i, j] = 20.0
    best = max(P.decode(preds, CFG), key=lambda d: d.score)
    assert best.class_id == 1 and best.level == level
    np.testing.assert_allclose(best.bbox, box, atol=1e-4)


def test_encode_rejects_center_outside_cell():
    with pytest.raises(ConfigError):
        P.encode_box([0, 0, 16, 16], 8, (3, 3))


# -------------------------------------------------------------- threshold


def test_threshold_boundary_kept():
    dets = [det([0, 0, 1, 1], s) for s in (0.49, 0.9, 0.5)]
    assert [d.score for d in P.threshold_filter(dets, 0.5)] == [0.9, 0.5]


def test_threshold_zero_keeps_all():
    dets = [det([0, 0, 1, 1], s) for s in (0.0, 0.3, 0.2)]
    assert len(P.threshold_filter(dets, 0.0)) == 3


def test_threshold_one_keeps_exact_ones():
    dets = [det([0, 0, 1, 1], s) for s in (1.0, 0.999999, 1.0)]
    assert [d.score for d in P.threshold_filter(dets, 1.0)] == [1.0, 1.0]


def test_threshold_is_stable():
    dets = [det([k, 0, k + 1, 1], 0.7) for k in range(5)]
    assert [d.bbox[0] for d in P.threshold_filter(dets)] == [0, 1, 2, 3, 4]


# -------------------------------------------------------------------- nms


def test_nms_suppresses_overlap():
    a = det([0, 0, 10, 10], 0.9)
    b = det([0, 0, 10, 7], 0.8)  # IoU 0.7
    assert P.nms([b, a]) == [a]


def test_nms_is_per_class():
    a, b = det([0, 0, 10, 10], 0.9, 0), det([0, 0, 10, 10], 0.8, 1)
    assert P.nms([a, b]) == [a, b]


def test_nms_iou_at_threshold_survives():
    a = det([0, 0, 10, 10], 0.9)
    b = det([0, 0, 10, 5], 0.8)  # IoU exactly 0.5
    assert len(P.nms([a, b], 0.5)) == 2


def test_nms_tie_break_on_position():
    a = det([5, 0, 15, 10], 0.8)
    b = det([4, 0, 14, 10], 0.8)
    assert P.nms([a, b]) == [b]


def random_dets(rng, n):
    xy = rng.uniform(0, 60, (n, 2))
    wh = rng.uniform(4, 30, (n, 2))
    boxes = np.hstack([xy, xy + wh])
    scores = np.round(rng.uniform(0, 1, n), 1)
    classes = rng.integers(0, 2, n)
    return [det(b, s, int(c)) for b, s, c in zip(boxes, scores, classes)]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**16), st.integers(0, 50), st.sampled_from([0.3, 0.5, 0.7]))
def test_nms_matches_brute_force(seed, n, thresh):
    dets = random_dets(np.random.default_rng(seed), n)
    keep = brute_nms([d.bbox for d in dets], [d.score for d in dets], [d.class_id for d in dets], thresh)
    assert P.nms(dets, thresh) == [dets[k] for k in keep]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16), st.integers(0, 40))
def test_nms_subset_without_same_class_overlap(seed, n):
    dets = random_dets(np.random.default_rng(seed), n)
    out = P.nms(dets, 0.5)
    assert all(d in dets for d in out)
    for a in range(len(out)):
        for b in range(a + 1, len(out)):
            if out[a].class_id == out[b].class_id:
                assert box_iou(out[a].bbox, out[b].bbox) <= 0.5


def test_nms_empty():
    assert P.nms([]) == []


# --------------------------------------------------------------- pipeline


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16))
def test_raising_tau_never_adds_detections(seed):
    rng = np.random.default_rng(seed)
    preds = [rng.normal(0, 2, p.shape) for p in blank_preds()]
    counts = [len(P.postprocess(preds, CFG, tau=t)) for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
    assert counts == sorted(counts, reverse=True)
