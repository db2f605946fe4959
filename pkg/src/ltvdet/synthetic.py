"""Seeded synthetic thermal scenes with planted warm pedestrians.

Scenes are native 640x512 float32 frames in [0, 1]: a cool, slowly varying
background, sensor noise, and warm head-plus-body silhouettes whose tight
bounding boxes are known exactly. Optional distractors are round hot blobs
and bright reflective strips, the kind of warm clutter that fools a detector
into false positives; frames carrying them are tagged ``hot-bg``.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from . import dataio
from .imaging import bilinear_resize

NATIVE_SIZE = (640, 512)
CLASS_HEIGHTS = {0: (72.0, 100.0), 1: (120.0, 160.0)}  # child, adult (px at native size)
CLASS_WIDTH_RATIO = {0: 0.42, 1: 0.36}
CLASS_HEAD_RATIO = {0: 0.15, 1: 0.11}


@dataclass
class Scene:
    frame: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray
    tags: Tuple[str, ...] = ()
    image_id: str = ""


def background(rng, size=NATIVE_SIZE):
    """Cool scene: vertical gradient plus a smooth low-frequency field."""
    w, h = size
    base = rng.uniform(0.18, 0.28)
    grad = np.linspace(0.0, rng.uniform(0.04, 0.10), h)[:, None]
    coarse = rng.normal(0.0, 0.025, size=(4, 5))
    field = bilinear_resize(coarse.astype(np.float32) + 0.5, w, h).astype(np.float64) - 0.5
    return base + grad + field


def person_box(cls, cx, foot_y, height):
    w = height * CLASS_WIDTH_RATIO[cls]
    return np.array([cx - w / 2, foot_y - height, cx + w / 2, foot_y])


def draw_person(canvas, box, cls, temperature):
    """Head disc over an elliptical body; both touch the box edges."""
    x1, y1, x2, y2 = box
    h = y2 - y1
    r = CLASS_HEAD_RATIO[cls] * h
    cx = (x1 + x2) / 2
    H, W = canvas.shape
    r0, r1 = max(int(np.floor(y1)) - 1, 0), min(int(np.ceil(y2)) + 1, H)
    c0, c1 = max(int(np.floor(x1)) - 1, 0), min(int(np.ceil(x2)) + 1, W)
    yy, xx = np.mgrid[r0:r1, c0:c1] + 0.5
    head = np.hypot(xx - cx, yy - (y1 + r)) / r
    body_cy = (y1 + 2 * r + y2) / 2
    body = np.hypot((xx - cx) / ((x2 - x1) / 2), (yy - body_cy) / ((y2 - y1 - 2 * r) / 2))
    # soft one-pixel rim on both shapes
    d = np.minimum((head - 1) * r, (body - 1) * min((x2 - x1) / 2, (y2 - y1 - 2 * r) / 2))
    alpha = np.clip(0.5 - d, 0, 1)
    patch = canvas[r0:r1, c0:c1]
    canvas[r0:r1, c0:c1] = patch * (1 - alpha) + temperature * alpha


def add_hot_blobs(canvas, rng, count):
    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(count):
        s = rng.uniform(8, 22)
        a = rng.uniform(0.35, 0.6)
        cx, cy = rng.uniform(0, w), rng.uniform(h * 0.3, h)
        canvas += a * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))


def add_reflections(canvas, rng, count):
    h, w = canvas.shape
    for _ in range(count):
        rh = int(rng.integers(4, 10))
        rw = int(rng.integers(40, 120))
        y = int(rng.integers(h // 2, h - rh))
        x = int(rng.integers(0, w - rw))
        canvas[y : y + rh, x : x + rw] = np.maximum(canvas[y : y + rh, x : x + rw], rng.uniform(0.7, 0.9))


def _place_people(rng, n, size, avoid=()):
    """Pick non-overlapping person boxes (with a margin) inside the frame."""
    w, h = size
    boxes, classes = [], []
    for _ in range(200):
        if len(boxes) == n:
            break
        cls = int(rng.integers(0, 2))
        height = rng.uniform(*CLASS_HEIGHTS[cls])
        bw = height * CLASS_WIDTH_RATIO[cls]
        cx = rng.uniform(bw / 2 + 2, w - bw / 2 - 2)
        foot = rng.uniform(height + 2, h - 2)
        b = person_box(cls, cx, foot, height)
        grown = b + np.array([-12, -12, 12, 12])
        if any(_overlaps(grown, o) for o in list(boxes) + list(avoid)):
            continue
        boxes.append(b)
        classes.append(cls)
    return np.array(boxes).reshape(-1, 4), np.array(classes, dtype=np.int64)


def _overlaps(a, b):
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _finish(canvas, rng):
    canvas += rng.normal(0.0, 0.008, canvas.shape)
    return np.clip(canvas, 0, 1).astype(np.float32)


def make_scene(seed, n_people=None, hot_blobs=0, reflections=0, size=NATIVE_SIZE, image_id=""):
    rng = np.random.default_rng(seed)
    canvas = background(rng, size)
    n = int(rng.integers(1, 4)) if n_people is None else n_people
    boxes, classes = _place_people(rng, n, size)
    for b, c in zip(boxes, classes):
        draw_person(canvas, b, c, rng.uniform(0.62, 0.82))
    if hot_blobs:
        add_hot_blobs(canvas, rng, hot_blobs)
    if reflections:
        add_reflections(canvas, rng, reflections)
    tags = ("hot-bg",) if hot_blobs or reflections else ()
    return Scene(_finish(canvas, rng), boxes, classes, tags, image_id)


def make_sequence(seed, n_frames=100, n_people=3, size=NATIVE_SIZE, speed=0.5):
    """A static scene with people walking back and forth in separate lanes.

    Returns a list of :class:`Scene`, one per frame; ``image_id`` is
    ``f{index:04d}``. Sensor noise differs per frame.
    """
    rng = np.random.default_rng(seed)
    w, h = size
    bg = background(rng, size)
    lane_w = w / n_people
    walkers = []
    for k in range(n_people):
        cls = k % 2 if n_people > 1 else int(rng.integers(0, 2))
        height = rng.uniform(*CLASS_HEIGHTS[cls])
        bw = height * CLASS_WIDTH_RATIO[cls]
        lo, hi = k * lane_w + bw / 2 + 4, (k + 1) * lane_w - bw / 2 - 4
        foot = rng.uniform(height + 4, h - 4)
        walkers.append(
            dict(cls=cls, height=height, lo=lo, hi=hi, x0=rng.uniform(lo, hi), foot=foot,
                 v=speed * rng.choice([-1.0, 1.0]), temp=rng.uniform(0.65, 0.8))
        )
    frames = []
    for t in range(n_frames):
        canvas = bg.copy()
        boxes, classes = [], []
        for wk in walkers:
            span = wk["hi"] - wk["lo"]
            pos = (wk["x0"] - wk["lo"] + wk["v"] * t) % (2 * span) if span > 0 else 0.0
            cx = wk["lo"] + (pos if pos <= span else 2 * span - pos)
            b = person_box(wk["cls"], cx, wk["foot"], wk["height"])
            draw_person(canvas, b, wk["cls"], wk["temp"])
            boxes.append(b)
            classes.append(wk["cls"])
        frame_rng = np.random.default_rng([seed, t])
        frames.append(Scene(_finish(canvas, frame_rng), np.array(boxes), np.array(classes), (), f"f{t:04d}"))
    return frames


def overfit_set(seed=0, n=8, n_frames=100):
    """``n`` evenly spaced frames of :func:`make_sequence` with the same seed."""
    seq = make_sequence(seed, n_frames)
    idx = np.linspace(0, n_frames - 1, n).round().astype(int)
    return [seq[i] for i in idx]


def hot_background_set(seed, n_clean, n_hot, hot_blobs=(1, 4), reflections=(0, 2)):
    """Mixed clean and hot-background scenes; hot ones carry the ``hot-bg`` tag."""
    rng = np.random.default_rng(seed)
    scenes = []
    for k in range(n_clean + n_hot):
        sub = int(rng.integers(0, 2**31))
        if k < n_clean:
            scenes.append(make_scene(sub, image_id=f"s{k:04d}"))
        else:
            scenes.append(
                make_scene(
                    sub,
                    hot_blobs=int(rng.integers(hot_blobs[0], hot_blobs[1] + 1)),
                    reflections=int(rng.integers(reflections[0], reflections[1] + 1)),
                    image_id=f"s{k:04d}",
                )
            )
    return scenes


def write_dataset(out_dir, scenes, manifest_name="manifest.tsv"):
    """Write 16-bit PGM frames, annotation files and a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, sc in enumerate(scenes):
        name = sc.image_id or f"img{k:04d}"
        img, ann = out / "frames" / f"{name}.pgm", out / "labels" / f"{name}.txt"
        dataio.write_pgm(img, dataio.to_uint16(sc.frame))
        h, w = sc.frame.shape
        dataio.atomic_write_text(ann, dataio.format_annotation(dataio.boxes_to_annotations(sc.boxes, sc.classes, w, h)))
        entries.append(dataio.ManifestEntry(img, ann, tuple(sc.tags)))
    path = out / manifest_name
    dataio.write_manifest(path, entries)
    return path
