"""Thermal frame preprocessing and training-time augmentation.

Frames are 2-D float32 arrays in [0, 1] (height, width). Boxes are (K, 4)
corner-format pixel arrays. Every random operation takes an explicit seed or
``numpy.random.Generator`` so identical seeds reproduce identical output.
"""
from dataclasses import dataclass, fields
from typing import NamedTuple, Optional
import math

import numpy as np

from .exceptions import ConfigError, DataError


@dataclass
class ThermalFrame:
    """One single-channel thermal image plus capture metadata."""

    pixels: np.ndarray
    timestamp: Optional[float] = None
    source_id: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise DataError(f"thermal frame must be 2-D, got shape {self.pixels.shape}")
        if self.pixels.dtype.kind == "f":
            if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
                raise DataError("normalized thermal frame values must lie in [0, 1]")
        elif self.pixels.dtype != np.uint16 and self.pixels.dtype != np.uint8:
            raise DataError(f"raw frames must be uint8 or uint16, got {self.pixels.dtype}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def is_raw(self):
        return self.pixels.dtype.kind == "u"

    def normalized(self, mode="minmax", value_range=None):
        return ThermalFrame(normalize(self.pixels, mode, value_range), self.timestamp, self.source_id)


def normalize(pixels, mode="minmax", value_range=None):
    """Map raw counts to float32 [0, 1].

    ``minmax`` stretches each frame to its own range; ``fixed`` uses
    ``value_range=(lo, hi)`` for all frames, which keeps deployment output
    independent of scene content.
    """
    x = np.asarray(pixels)
    if x.dtype.kind == "f":
        return np.clip(x, 0, 1).astype(np.float32)
    x = x.astype(np.float64)
    if mode == "minmax":
        lo, hi = x.min(), x.max()
    elif mode == "fixed":
        if value_range is None:
            value_range = (0, 255 if pixels.dtype == np.uint8 else 65535)
        lo, hi = value_range
    else:
        raise ConfigError(f"unknown normalization mode {mode!r}")
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.float32)
    return np.clip((x - lo) / (hi - lo), 0, 1).astype(np.float32)


def _pixels(frame):
    return frame.pixels if isinstance(frame, ThermalFrame) else np.asarray(frame)


def _boxes(boxes):
    if boxes is None:
        return np.zeros((0, 4))
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


# ------------------------------------------------------------ resizing


def _axis_weights(n_in, n_out):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_resize(frame, target_w, target_h):
    """Bilinear resize with half-pixel centers.

    Output pixel i samples source coordinate (i + 0.5) * in/out - 0.5,
    clamped to the valid range. Returns float32.
    """
    if target_w < 1 or target_h < 1:
        raise DataError(f"resize target must be at least 1x1, got {target_w}x{target_h}")
    x = _pixels(frame).astype(np.float64)
    h, w = x.shape
    r0, r1, fr = _axis_weights(h, target_h)
    c0, c1, fc = _axis_weights(w, target_w)
    top = x[r0][:, c0] * (1 - fc) + x[r0][:, c1] * fc
    bot = x[r1][:, c0] * (1 - fc) + x[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    return out.astype(np.float32)


class PadRecord(NamedTuple):
    """Bookkeeping to map padded/resized coordinates back to the source frame."""

    orig_w: int
    orig_h: int
    resized_w: int
    resized_h: int
    pad_w: int
    pad_h: int

    @property
    def scale_x(self):
        return self.orig_w / self.resized_w

    @property
    def scale_y(self):
        return self.orig_h / self.resized_h

    @property
    def padded_dims(self):
        return (self.resized_h + self.pad_h, self.resized_w + self.pad_w)


def letterbox_to_stride(frame, boxes=None, stride_multiple=32):
    """Pad right/bottom by edge replication up to the next stride multiple.

    Boxes keep their absolute pixel coordinates because the origin does not
    move. Returns ``(padded, boxes, (pad_w, pad_h))``.
    """
    if stride_multiple < 1:
        raise ConfigError("stride_multiple must be >= 1")
    x = _pixels(frame)
    h, w = x.shape
    pad_h = -h % stride_multiple
    pad_w = -w % stride_multiple
    if pad_h or pad_w:
        x = np.pad(x, ((0, pad_h), (0, pad_w)), mode="edge")
    return x, _boxes(boxes).copy(), (pad_w, pad_h)


def preprocess(frame, target_w, target_h, stride_multiple=32, boxes=None):
    """Resize to the network resolution and letterbox. Returns ``(image, boxes, PadRecord)``."""
    x = _pixels(frame)
    if x.dtype.kind != "f":
        x = normalize(x)
    h, w = x.shape
    if (w, h) != (target_w, target_h):
        x = bilinear_resize(x, target_w, target_h)
    else:
        x = x.astype(np.float32)
    b = _boxes(boxes) * np.array([target_w / w, target_h / h] * 2)
    padded, b, (pw, ph) = letterbox_to_stride(x, b, stride_multiple)
    return padded, b, PadRecord(w, h, target_w, target_h, pw, ph)


def unpad_boxes(boxes, record):
    """Map padded-resolution boxes back into original-frame pixels, clipped to the frame."""
    b = _boxes(boxes) * np.array([record.scale_x, record.scale_y] * 2)
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, record.orig_w)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, record.orig_h)
    return b


# ------------------------------------------------------------ geometric


def hflip_with_boxes(frame, boxes):
    x = _pixels(frame)
    w = x.shape[1]
    b = _boxes(boxes)
    flipped = np.stack([w - b[:, 2], b[:, 1], w - b[:, 0], b[:, 3]], axis=1) if len(b) else b.copy()
    return x[:, ::-1].copy(), flipped


def brightness_contrast(frame, brightness=0.0, contrast=0.0, limit=None):
    """clamp((x - 0.5) * (1 + contrast) + 0.5 + brightness, 0, 1)."""
    if limit is not None and (abs(brightness) > limit or abs(contrast) > limit):
        raise ConfigError(f"brightness/contrast exceed the configured limit {limit}")
    x = _pixels(frame).astype(np.float64)  # float64 keeps b = c = 0 exact for float32 input
    return np.clip((x - 0.5) * (1 + contrast) + 0.5 + brightness, 0, 1).astype(np.float32)


MIN_MOSAIC_BOX = 4.0


def mosaic4(samples, seed=None, center=None):
    """Tile crops of four samples around a split point.

    ``samples`` is four ``(frame, boxes)`` or ``(frame, boxes, classes)``
    tuples of identical size. The split point is drawn uniformly from the
    middle half of the frame unless ``center=(x, y)`` is given. Each tile is
    filled with a same-size crop of its sample at a random offset; boxes are
    shifted with the crop, clipped to the tile, and dropped when a clipped side
    is under 4 px. Returns ``(frame, boxes, classes)``.
    """
    if len(samples) != 4:
        raise DataError(f"mosaic needs 4 samples, got {len(samples)}")
    frames = [_pixels(s[0]) for s in samples]
    h, w = frames[0].shape
    if any(f.shape != (h, w) for f in frames):
        raise DataError("mosaic samples must share dimensions")
    rng = np.random.default_rng(seed)
    if center is None:
        xc = int(rng.integers(w // 4, 3 * w // 4 + 1))
        yc = int(rng.integers(h // 4, 3 * h // 4 + 1))
    else:
        xc, yc = int(center[0]), int(center[1])
    tiles = [(0, 0, xc, yc), (xc, 0, w, yc), (0, yc, xc, h), (xc, yc, w, h)]
    out = np.empty((h, w), dtype=np.float32)
    out_boxes, out_cls = [], []
    for (tx1, ty1, tx2, ty2), sample, img in zip(tiles, samples, frames):
        tw, th = tx2 - tx1, ty2 - ty1
        if tw == 0 or th == 0:
            continue
        ox = int(rng.integers(0, w - tw + 1))
        oy = int(rng.integers(0, h - th + 1))
        out[ty1:ty2, tx1:tx2] = img[oy : oy + th, ox : ox + tw]
        b = _boxes(sample[1])
        cls = np.asarray(sample[2] if len(sample) > 2 else np.zeros(len(b)), dtype=np.int64).reshape(-1)
        if not len(b):
            continue
        shifted = b + np.array([tx1 - ox, ty1 - oy] * 2)
        clipped = shifted.copy()
        clipped[:, [0, 2]] = np.clip(clipped[:, [0, 2]], tx1, tx2)
        clipped[:, [1, 3]] = np.clip(clipped[:, [1, 3]], ty1, ty2)
        keep = ((clipped[:, 2] - clipped[:, 0]) >= MIN_MOSAIC_BOX) & ((clipped[:, 3] - clipped[:, 1]) >= MIN_MOSAIC_BOX)
        out_boxes.append(clipped[keep])
        out_cls.append(cls[keep])
    boxes = np.concatenate(out_boxes) if out_boxes else np.zeros((0, 4))
    classes = np.concatenate(out_cls) if out_cls else np.zeros(0, dtype=np.int64)
    return out, boxes, classes


# ------------------------------------------------------- thermal artifacts

BLOB_SIGMA = (5.0, 25.0)
BLOB_PEAK = (0.5, 0.95)
STRIP_WIDTH = (2, 6)
STRIP_ANGLE_DEG = 15.0
OCCLUDER_FRACTION = (0.2, 0.5)


class ArtifactResult(NamedTuple):
    frame: np.ndarray
    boxes: np.ndarray
    applied: bool


def temperature_bias(frame, rng, count=None, peak=None, sigma=None, centers=None):
    """Add Gaussian-profile hot blobs in the lower half of the frame."""
    x = _pixels(frame).astype(np.float32)
    h, w = x.shape
    count = int(rng.integers(1, 4)) if count is None else count
    yy, xx = np.mgrid[0:h, 0:w]
    out = x.astype(np.float64)
    for k in range(count):
        s = rng.uniform(*BLOB_SIGMA) if sigma is None else sigma
        a = rng.uniform(*BLOB_PEAK) if peak is None else peak
        if centers is not None:
            cx, cy = centers[k]
        else:
            cx = int(rng.integers(0, w))
            cy = int(rng.integers(h // 2, h))
        out += a * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    return np.clip(out, 0, 1).astype(np.float32)


def specular_strips(frame, rng, count=None, intensity=None):
    """Thin bright strips tilted within +-15 degrees of horizontal, lower half."""
    x = _pixels(frame).astype(np.float32).copy()
    h, w = x.shape
    count = int(rng.integers(1, 3)) if count is None else count
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(count):
        angle = math.radians(rng.uniform(-STRIP_ANGLE_DEG, STRIP_ANGLE_DEG))
        width = rng.uniform(*STRIP_WIDTH)
        length = rng.uniform(0.2, 0.5) * w
        level = rng.uniform(0.8, 1.0) if intensity is None else intensity
        cx = rng.uniform(0, w)
        cy = rng.uniform(h / 2, h)
        ux, uy = math.cos(angle), math.sin(angle)
        along = (xx - cx) * ux + (yy - cy) * uy
        across = -(xx - cx) * uy + (yy - cy) * ux
        mask = (np.abs(along) <= length / 2) & (np.abs(across) <= width / 2)
        x[mask] = np.maximum(x[mask], level)
    return x


def _occluder_rect(box, rng, frame_shape, tries=32):
    """Integer rectangle inside the upper half of ``box`` covering 20-50% of it."""
    h, w = frame_shape
    x1, y1 = int(math.ceil(box[0])), int(math.ceil(box[1]))
    x2, y2 = int(math.floor(box[2])), int(math.floor(box[3]))
    x1, y1, x2, y2 = max(x1, 0), max(y1, 0), min(x2, w), min(y2, h)
    bw, bh = x2 - x1, (y2 - y1) // 2
    if bw < 1 or bh < 1:
        return None
    half_area = bw * bh
    lo, hi = OCCLUDER_FRACTION
    for _ in range(tries):
        f = rng.uniform(lo, hi)
        aspect = rng.uniform(math.sqrt(f), 1.0)
        rw = max(1, min(bw, int(round(bw * aspect))))
        rh = max(1, min(bh, int(round(f * half_area / rw))))
        if lo * half_area <= rw * rh <= hi * half_area:
            ox = x1 + int(rng.integers(0, bw - rw + 1))
            oy = y1 + int(rng.integers(0, bh - rh + 1))
            return ox, oy, rw, rh
    return None


def cutout(frame, boxes, rng):
    """Cover part of one box's upper half with the surrounding background mean."""
    x = _pixels(frame).astype(np.float32).copy()
    b = _boxes(boxes)
    if not len(b):
        return ArtifactResult(x, b, False)
    box = b[int(rng.integers(0, len(b)))]
    rect = _occluder_rect(box, rng, x.shape)
    if rect is None:
        return ArtifactResult(x, b, False)
    ox, oy, rw, rh = rect
    h, w = x.shape
    bx1, by1 = max(int(box[0]), 0), max(int(box[1]), 0)
    bx2, by2 = min(int(math.ceil(box[2])), w), min(int(math.ceil(box[3])), h)
    margin = max(2, (bx2 - bx1) // 4)
    rx1, ry1 = max(bx1 - margin, 0), max(by1 - margin, 0)
    rx2, ry2 = min(bx2 + margin, w), min(by2 + margin, h)
    ring = np.ones((ry2 - ry1, rx2 - rx1), dtype=bool)
    ring[by1 - ry1 : by2 - ry1, bx1 - rx1 : bx2 - rx1] = False
    region = x[ry1:ry2, rx1:rx2]
    fill = float(region[ring].mean()) if ring.any() else float(x.mean())
    x[oy : oy + rh, ox : ox + rw] = fill
    return ArtifactResult(x, b, True)


def cutmix(frame, boxes, rng):
    """Replace part of one box's upper half with a patch from elsewhere in the frame."""
    x = _pixels(frame).astype(np.float32).copy()
    b = _boxes(boxes)
    if not len(b):
        return ArtifactResult(x, b, False)
    box = b[int(rng.integers(0, len(b)))]
    rect = _occluder_rect(box, rng, x.shape)
    if rect is None:
        return ArtifactResult(x, b, False)
    ox, oy, rw, rh = rect
    h, w = x.shape
    sx = int(rng.integers(0, w - rw + 1))
    sy = int(rng.integers(0, h - rh + 1))
    patch = x[sy : sy + rh, sx : sx + rw].copy()
    x[oy : oy + rh, ox : ox + rw] = patch
    return ArtifactResult(x, b, True)


ARTIFACT_MODES = ("temp_bias", "specular", "cutout", "cutmix")


def thermal_artifacts(frame, boxes, mode, seed=None):
    """Apply one hot-background or occlusion artifact. Boxes are never changed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    b = _boxes(boxes)
    if mode == "temp_bias":
        return ArtifactResult(temperature_bias(frame, rng), b, True)
    if mode == "specular":
        return ArtifactResult(specular_strips(frame, rng), b, True)
    if mode == "cutout":
        return cutout(frame, b, rng)
    if mode == "cutmix":
        return cutmix(frame, b, rng)
    raise ConfigError(f"unknown artifact mode {mode!r}; expected one of {ARTIFACT_MODES}")


# ---------------------------------------------------------------- weather

HAZE_LEVEL = (0.45, 0.65)
HAZE_AMPLITUDE = 0.03
HAZE_GRID = (3, 4)


def haze_field(shape, rng):
    """Smooth field around a seeded gray level; bilinear upsampling of a coarse grid."""
    h, w = shape
    level = rng.uniform(*HAZE_LEVEL)
    coarse = level + rng.uniform(-HAZE_AMPLITUDE, HAZE_AMPLITUDE, size=HAZE_GRID)
    return bilinear_resize(coarse, w, h)


def fog_rain_overlay(frame, mode, intensity, seed=None):
    """Weather degradation.

    fog: ``(1 - a) * x + a * haze`` with ``a = intensity``.
    rain: slanted streaks blended toward the frame mean, count and strength
    growing with intensity.
    """
    if not 0 <= intensity <= 1:
        raise ConfigError(f"intensity must lie in [0, 1], got {intensity}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = _pixels(frame).astype(np.float32)
    if mode == "fog":
        haze = haze_field(x.shape, rng)
        if intensity == 0:
            return x.copy()
        return np.clip((1 - intensity) * x + intensity * haze, 0, 1).astype(np.float32)
    if mode == "rain":
        h, w = x.shape
        n = int(round(intensity * h * w / 200))
        mask = np.zeros((h, w), dtype=bool)
        if n:
            length = rng.integers(5, 16, size=n)
            x0 = rng.integers(0, w, size=n)
            y0 = rng.integers(0, h, size=n)
            slope = rng.uniform(0.1, 0.4, size=n)
            for k in range(n):
                ys = y0[k] + np.arange(length[k])
                xs = np.round(x0[k] + slope[k] * np.arange(length[k])).astype(int)
                ok = (ys < h) & (xs < w)
                mask[ys[ok], xs[ok]] = True
        out = x.copy()
        out[mask] = (1 - 0.6 * intensity) * x[mask] + 0.6 * intensity * float(x.mean())
        return out
    raise ConfigError(f"unknown weather mode {mode!r}")


# --------------------------------------------------------------- pipeline


@dataclass
class AugmentationSpec:
    """Probabilities and limits for the training-time augmentation pipeline."""

    hflip_p: float = 0.5
    brightness_contrast_limit: float = 0.3
    brightness_contrast_p: float = 1.0
    mosaic_p: float = 1.0
    fog_p: float = 0.0
    rain_p: float = 0.0
    temp_bias_p: float = 0.0
    specular_p: float = 0.0
    cut_p: float = 0.0
    noise_std: float = 0.0  # additive per-pixel sensor noise, applied last
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name.endswith("_p"):
                v = float(getattr(self, f.name))
                if not 0 <= v <= 1:
                    raise ConfigError(f"{f.name} must lie in [0, 1], got {v}")
                setattr(self, f.name, v)
        if self.brightness_contrast_limit < 0:
            raise ConfigError("brightness_contrast_limit must be non-negative")
        if not 0 <= self.noise_std < 1:
            raise ConfigError(f"noise_std must lie in [0, 1), got {self.noise_std}")

    @classmethod
    def disabled(cls, seed=0):
        return cls(hflip_p=0.0, brightness_contrast_limit=0.0, brightness_contrast_p=0.0, mosaic_p=0.0, seed=seed)

    @property
    def is_identity(self):
        return not self.noise_std and not any(
            getattr(self, f.name) for f in fields(self) if f.name.endswith("_p")
        )


def augment_sample(frame, boxes, classes, spec, rng, pool=None):
    """Run the augmentation pipeline on one sample.

    ``pool`` is a callable returning three extra ``(frame, boxes, classes)``
    samples for mosaic. Order: mosaic, flip, brightness/contrast, hot
    background artifacts, occluders, weather, sensor noise. Returns
    ``(frame, boxes, classes)``.
    """
    x = _pixels(frame).astype(np.float32)
    b = _boxes(boxes)
    c = np.asarray(classes, dtype=np.int64).reshape(-1)
    if pool is not None and spec.mosaic_p and rng.random() < spec.mosaic_p:
        others = pool(rng)
        x, b, c = mosaic4([(x, b, c)] + list(others), seed=rng)
    if spec.hflip_p and rng.random() < spec.hflip_p:
        x, b = hflip_with_boxes(x, b)
    if spec.brightness_contrast_p and spec.brightness_contrast_limit and rng.random() < spec.brightness_contrast_p:
        lim = spec.brightness_contrast_limit
        x = brightness_contrast(x, rng.uniform(-lim, lim), rng.uniform(-lim, lim))
    if spec.temp_bias_p and rng.random() < spec.temp_bias_p:
        x = temperature_bias(x, rng)
    if spec.specular_p and rng.random() < spec.specular_p:
        x = specular_strips(x, rng)
    if spec.cut_p and rng.random() < spec.cut_p:
        x = (cutout if rng.random() < 0.5 else cutmix)(x, b, rng).frame
    if spec.fog_p and rng.random() < spec.fog_p:
        x = fog_rain_overlay(x, "fog", rng.uniform(0.1, 0.5), rng)
    if spec.rain_p and rng.random() < spec.rain_p:
        x = fog_rain_overlay(x, "rain", rng.uniform(0.1, 0.5), rng)
    if spec.noise_std:
        x = np.clip(x + rng.normal(0.0, spec.noise_std, x.shape), 0, 1).astype(np.float32)
    return x, b, c
