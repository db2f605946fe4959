"""On-disk formats: annotations, manifests, fold files, LTVW weights, PGM frames.

Annotation files hold one box per line, ``class_id cx cy w h`` with the box
in normalized center format. Manifests are tab-separated
``image_path<TAB>annotation_path<TAB>tags`` lines with paths relative to the
manifest. Weights use the little-endian LTVW container.
"""
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple
import logging
import os
import struct
import tempfile

import numpy as np

from .exceptions import DataError, FormatError, ParseError

logger = logging.getLogger(__name__)

DEFAULT_CLASS_NAMES = ("child", "adult")


@dataclass(frozen=True)
class Annotation:
    image_id: str
    class_id: int
    bbox: Tuple[float, float, float, float]  # normalized (cx, cy, w, h)

    def to_pixels(self, width, height):
        cx, cy, w, h = self.bbox
        return np.array([(cx - w / 2) * width, (cy - h / 2) * height, (cx + w / 2) * width, (cy + h / 2) * height])


def parse_annotation(text, image_id="", num_classes=len(DEFAULT_CLASS_NAMES)):
    """Parse annotation text; an empty file is a valid negative image."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise ParseError(f"expected 'class_id cx cy w h', got {line.strip()!r}", lineno)
        try:
            cls = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError:
            raise ParseError(f"non-numeric field in {line.strip()!r}", lineno) from None
        if not 0 <= cls < num_classes:
            raise ParseError(f"class id {cls} out of range [0, {num_classes})", lineno)
        vals = np.array([cx, cy, w, h])
        if not np.isfinite(vals).all() or np.any(vals < 0) or np.any(vals > 1):
            raise ParseError(f"box values must lie in [0, 1], got {parts[1:]}", lineno)
        if w <= 0 or h <= 0:
            raise ParseError("box width and height must be positive", lineno)
        x1, x2 = max(cx - w / 2, 0.0), min(cx + w / 2, 1.0)
        y1, y2 = max(cy - h / 2, 0.0), min(cy + h / 2, 1.0)
        if (x1, x2, y1, y2) != (cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2):
            logger.warning("line %d: box extends past the image and was clamped", lineno)
            cx, cy, w, h = (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1
        out.append(Annotation(image_id, cls, (cx, cy, w, h)))
    return out


def format_annotation(annotations):
    return "".join(f"{a.class_id} {a.bbox[0]:.6f} {a.bbox[1]:.6f} {a.bbox[2]:.6f} {a.bbox[3]:.6f}\n" for a in annotations)


def boxes_to_annotations(boxes, classes, width, height, image_id=""):
    out = []
    for b, c in zip(np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(classes).reshape(-1)):
        out.append(
            Annotation(
                image_id,
                int(c),
                ((b[0] + b[2]) / 2 / width, (b[1] + b[3]) / 2 / height, (b[2] - b[0]) / width, (b[3] - b[1]) / height),
            )
        )
    return out


def annotations_to_arrays(annotations, width, height):
    if not annotations:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    boxes = np.stack([a.to_pixels(width, height) for a in annotations])
    return boxes, np.array([a.class_id for a in annotations], dtype=np.int64)


# ---------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    image_path: Path
    annotation_path: Path
    tags: Tuple[str, ...] = ()

    @property
    def image_id(self):
        return self.image_path.stem


@dataclass
class DatasetManifest:
    root: Path
    entries: List[ManifestEntry]
    class_names: Tuple[str, ...] = DEFAULT_CLASS_NAMES

    def __len__(self):
        return len(self.entries)

    @property
    def image_ids(self):
        return [e.image_id for e in self.entries]

    def load_sample(self, k):
        """Return ``(frame float32 [0,1], boxes pixels, classes, tags)`` for entry ``k``."""
        e = self.entries[k]
        frame = read_frame(e.image_path)
        h, w = frame.shape
        anns = parse_annotation(e.annotation_path.read_text(), e.image_id, len(self.class_names))
        boxes, classes = annotations_to_arrays(anns, w, h)
        return frame, boxes, classes, e.tags

    def subset(self, image_ids):
        keep = set(image_ids)
        return DatasetManifest(self.root, [e for e in self.entries if e.image_id in keep], self.class_names)


def load_manifest(path, class_names=DEFAULT_CLASS_NAMES):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    entries = []
    seen = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise ParseError("expected image_path<TAB>annotation_path<TAB>tags", lineno)
        img, ann = root / parts[0], root / parts[1]
        tags = tuple(t.strip() for t in parts[2].split(",") if t.strip()) if len(parts) == 3 else ()
        for p in (img, ann):
            if not p.is_file():
                raise DataError(f"line {lineno}: referenced file does not exist: {p}")
        if img in seen:
            raise ParseError(f"image listed twice: {parts[0]}", lineno)
        seen.add(img)
        entries.append(ManifestEntry(img, ann, tags))
    return DatasetManifest(root, entries, tuple(class_names))


def write_manifest(path, entries):
    path = Path(path)
    lines = []
    for e in entries:
        lines.append(
            f"{os.path.relpath(e.image_path, path.parent)}\t{os.path.relpath(e.annotation_path, path.parent)}\t{','.join(e.tags)}\n"
        )
    atomic_write_text(path, "".join(lines))


# ------------------------------------------------------------------- folds


@dataclass
class FoldSplit:
    folds: List[List[str]]

    @property
    def k(self):
        return len(self.folds)

    def train_ids(self, holdout):
        return [i for f, ids in enumerate(self.folds) if f != holdout for i in ids]

    def check_partition(self, image_ids=None):
        seen = set()
        for ids in self.folds:
            for i in ids:
                if i in seen:
                    raise DataError(f"image {i!r} appears in more than one fold")
                seen.add(i)
        if image_ids is not None and seen != set(image_ids):
            missing = sorted(set(image_ids) - seen)
            raise DataError(f"folds do not cover the dataset; missing e.g. {missing[:3]}")


def make_folds(class_counts, k=10, seed=0):
    """Seeded stratified K-fold split.

    ``class_counts`` maps image_id to a per-class instance count vector.
    Images are shuffled, ordered by total instance count (largest first), and
    each is placed in the fold with spare capacity whose class mix ends up
    closest to the global mix. Fold sizes differ by at most one.
    """
    ids = list(class_counts)
    n = len(ids)
    if k < 1:
        raise DataError("fold count must be >= 1")
    if k > n:
        raise DataError(f"cannot split {n} images into {k} folds")
    rng = np.random.default_rng(seed)
    counts = np.array([np.asarray(class_counts[i], dtype=np.float64) for i in ids])
    order = rng.permutation(n)
    order = order[np.argsort(-counts[order].sum(axis=1), kind="stable")]
    total = counts.sum(axis=0)
    share = total / total.sum() if total.sum() else np.zeros_like(total)
    cap = np.full(k, n // k)
    cap[: n % k] += 1
    fold_counts = np.zeros((k, counts.shape[1]))
    folds = [[] for _ in range(k)]
    for idx in order:
        c = counts[idx]
        best, best_key = None, None
        for f in range(k):
            if len(folds[f]) >= cap[f]:
                continue
            after = fold_counts[f] + c
            mix = after / after.sum() if after.sum() else share
            key = (round(float(np.abs(mix - share).sum()), 12), len(folds[f]), f)
            if best_key is None or key < best_key:
                best, best_key = f, key
        folds[best].append(ids[idx])
        fold_counts[best] += c
    return FoldSplit([sorted(f) for f in folds])


def manifest_class_counts(manifest):
    out = OrderedDict()
    for e in manifest.entries:
        anns = parse_annotation(e.annotation_path.read_text(), e.image_id, len(manifest.class_names))
        v = np.zeros(len(manifest.class_names), dtype=np.int64)
        for a in anns:
            v[a.class_id] += 1
        out[e.image_id] = v
    return out


def write_folds(split, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for f, ids in enumerate(split.folds):
        atomic_write_text(out / f"fold_{f}.txt", "".join(f"{i}\n" for i in ids))


def read_folds(in_dir, image_ids=None):
    d = Path(in_dir)
    files = sorted(d.glob("fold_*.txt"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise DataError(f"no fold_*.txt files in {d}")
    split = FoldSplit([[l.strip() for l in p.read_text().splitlines() if l.strip()] for p in files])
    split.check_partition(image_ids)
    return split


# ----------------------------------------------------------------- weights

LTVW_MAGIC = b"LTVW"
LTVW_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4")}


def encode_weights(weights):
    parts = [LTVW_MAGIC, struct.pack("<II", LTVW_VERSION, len(weights))]
    for name, arr in weights.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_weights(data):
    """Parse LTVW bytes into an ordered name -> float32 array mapping."""
    view = memoryview(data)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated weight file while reading {what}", pos)
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != LTVW_MAGIC:
        raise FormatError("bad magic, not an LTVW weight file", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != LTVW_VERSION:
        raise FormatError(f"unsupported LTVW version {version}", 4)
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(nlen, "name")).decode("utf-8")
        code_at = pos
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in _DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code} for tensor {name!r}", code_at)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        dt = _DTYPE_CODES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        payload = take(nbytes, f"payload of {name!r}")
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", code_at)
        out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(np.float32)
    if pos != len(view):
        raise FormatError("trailing bytes after last tensor", pos)
    return out


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_weights(path, weights):
    atomic_write_bytes(path, encode_weights(weights))


def read_weights(path):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"weight file not found: {path}")
    return decode_weights(path.read_bytes())


# --------------------------------------------------------------- PGM frames


def write_pgm(path, pixels):
    """Binary P5 PGM; uint8 -> maxval 255, uint16 -> maxval 65535 (big-endian)."""
    x = np.asarray(pixels)
    if x.dtype == np.uint8:
        maxval, payload = 255, x.tobytes()
    elif x.dtype == np.uint16:
        maxval, payload = 65535, x.astype(">u2").tobytes()
    else:
        raise DataError(f"PGM frames must be uint8 or uint16, got {x.dtype}")
    h, w = x.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + payload)


def read_pgm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"truncated PGM header in {path}", pos)
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path} is not a binary PGM (P5)", 0)
    w, h, maxval = (int(t) for t in tokens[1:])
    dt = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    need = w * h * dt.itemsize
    if len(data) - pos < need:
        raise FormatError(f"truncated PGM payload in {path}", pos)
    arr = np.frombuffer(data, dtype=dt, count=w * h, offset=pos).reshape(h, w)
    return arr.astype(np.uint8 if maxval < 256 else np.uint16)


def read_frame(path, mode="fixed"):
    """Load a PGM as float32 [0, 1] using the full range of its bit depth."""
    from .imaging import normalize

    raw = read_pgm(path)
    return normalize(raw, mode)


def to_uint16(frame):
    return np.round(np.clip(frame, 0, 1) * 65535).astype(np.uint16)


def write_raw_f32(path, array):
    """Contiguous little-endian float32 dump with a tiny shape header: rank, dims."""
    a = np.ascontiguousarray(array, dtype="<f4")
    atomic_write_bytes(path, struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape) + a.tobytes())


def read_raw_f32(path):
    data = Path(path).read_bytes()
    (rank,) = struct.unpack_from("<I", data, 0)
    dims = struct.unpack_from(f"<{rank}I", data, 4)
    off = 4 + 4 * rank
    need = int(np.prod(dims, dtype=np.int64)) * 4
    if len(data) - off != need:
        raise FormatError(f"raw f32 payload size mismatch in {path}", off)
    return np.frombuffer(data, dtype="<f4", offset=off).reshape(dims).astype(np.float32)
