"""Training loop: batching, augmentation, composite loss, Adam, epoch log.

Everything random is drawn from generators seeded by ``(seed, epoch)`` so a
rerun with the same inputs and seed produces bit-identical weights. Sample
order is fixed before any augmentation happens.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple
import logging
import math
import time

import numpy as np

from . import dataio
from .config import TrainConfig
from .exceptions import ConfigError, DataError, NumericError
from .graph import Model
from .imaging import AugmentationSpec, augment_sample, bilinear_resize, preprocess
from .losses import LossBreakdown, assign_targets, collate_targets, composite_loss_and_grad
from .optim import Adam, cosine_lr

logger = logging.getLogger(__name__)

LOG_HEADER = "epoch,total,obj,cls,loc,lr,seconds"


@dataclass
class Sample:
    """One training image at native resolution with pixel corner boxes."""

    frame: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray
    image_id: str = ""
    tags: Tuple[str, ...] = ()


@dataclass
class EpochRecord:
    epoch: int
    loss: LossBreakdown
    lr: float
    seconds: float

    def csv_row(self):
        l = self.loss
        return f"{self.epoch},{l.total:.6f},{l.obj:.6f},{l.cls:.6f},{l.loc:.6f},{self.lr:.6e},{self.seconds:.3f}"


@dataclass
class TrainResult:
    model: Model
    history: List[EpochRecord] = field(default_factory=list)
    dropped_targets: int = 0


def samples_from_manifest(manifest):
    out = []
    for k in range(len(manifest)):
        frame, boxes, classes, tags = manifest.load_sample(k)
        out.append(Sample(frame, boxes, classes, manifest.entries[k].image_id, tags))
    return out


def scale_crop(sample, crop_w, crop_h, scale, rng, tag=""):
    """One ``crop_w x crop_h`` view of ``sample`` at ``scale`` output px per source px.

    The crop covers ``crop / scale`` source pixels placed at random so that a
    randomly chosen target lies wholly inside when it fits. Cut boxes keep
    their visible part if at least half survives.
    """
    h, w = sample.frame.shape
    rw, rh = min(int(round(crop_w / scale)), w), min(int(round(crop_h / scale)), h)
    fits = [k for k, b in enumerate(sample.boxes) if b[2] - b[0] <= rw - 2 and b[3] - b[1] <= rh - 2]
    if fits:
        b = sample.boxes[fits[int(rng.integers(len(fits)))]]
        x0 = int(rng.integers(max(0, math.ceil(b[2]) - rw), min(int(b[0]), w - rw) + 1))
        y0 = int(rng.integers(max(0, math.ceil(b[3]) - rh), min(int(b[1]), h - rh) + 1))
    else:
        x0 = int(rng.integers(0, w - rw + 1))
        y0 = int(rng.integers(0, h - rh + 1))
    frame = bilinear_resize(sample.frame[y0 : y0 + rh, x0 : x0 + rw], crop_w, crop_h)
    boxes = sample.boxes - np.array([x0, y0, x0, y0])
    clipped = np.clip(boxes, 0, [rw, rh, rw, rh])
    keep = _area(clipped) >= 0.5 * _area(boxes)
    scaled = clipped[keep] * np.array([crop_w / rw, crop_h / rh] * 2)
    return Sample(frame, scaled, sample.classes[keep], f"{sample.image_id}@{tag}", sample.tags)


def _area(b):
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


class Batcher:
    """Turns samples into ``(images, targets)`` batches in a fixed order.

    Each epoch covers every sample at the primary input resolution (plus
    ``scale_crops`` random crops of it) and once more at every extra
    resolution. A batch never mixes resolutions.
    """

    def __init__(self, samples, model_config, train_config, aug):
        if not samples:
            raise DataError("training set is empty")
        if train_config.batch_size > len(samples) * (1 + train_config.scale_crops):
            raise ConfigError(f"batch_size {train_config.batch_size} exceeds the {len(samples)} training views")
        self.samples = samples
        self.model_config = model_config
        self.cfg = train_config
        self.aug = aug
        self.resolutions = train_config.resolutions
        self._cache = {}

    def _prepare(self, frame, boxes, classes, res):
        img, b, rec = preprocess(frame, res[0], res[1], self.model_config.max_stride, boxes)
        tg = assign_targets(b, classes, self.model_config, rec.padded_dims)
        return img, tg

    def _group_sizes(self):
        n = len(self.samples)
        return [n * (1 + self.cfg.scale_crops)] + [n] * (len(self.resolutions) - 1)

    def views_per_epoch(self):
        return sum(self._group_sizes())

    def steps_per_epoch(self):
        return sum(math.ceil(g / self.cfg.batch_size) for g in self._group_sizes())

    def _crop(self, idx, n, rng):
        """Crop ``n`` of sample ``idx``: scale stratified between native and whole-frame."""
        s = self.samples[idx]
        h, w = s.frame.shape
        cw, ch = self.cfg.input_width, self.cfg.input_height
        if w < cw or h < ch:
            raise DataError(f"frame {s.image_id} ({w}x{h}) is smaller than the {cw}x{ch} crop")
        s_min = max(cw / w, ch / h)
        k = self.cfg.scale_crops
        scale = s_min ** ((n + rng.random()) / k)
        return scale_crop(s, cw, ch, scale, rng, f"crop{n}")

    def epoch(self, epoch):
        """Yield the batches of one epoch.

        The view order and the batch order are drawn before any pixel work.
        """
        rng = np.random.default_rng([self.cfg.seed, self.aug.seed, epoch])
        n = len(self.samples)
        bs = self.cfg.batch_size
        batches = []
        for r, size in enumerate(self._group_sizes()):
            order = rng.permutation(size)
            batches += [(r, order[i : i + bs]) for i in range(0, size, bs)]
        batches = [batches[i] for i in rng.permutation(len(batches))]
        identity = self.aug.is_identity

        def pool(r):
            picks = r.integers(0, len(self.samples), size=3)
            return [(self.samples[i].frame, self.samples[i].boxes, self.samples[i].classes) for i in picks]

        for r, views in batches:
            res = self.resolutions[r]
            imgs, tgs = [], []
            for view in views:
                idx, crop = view % n, view // n
                s = self.samples[idx]
                if crop:
                    s = self._crop(idx, crop - 1, rng)
                    frame, boxes, classes = augment_sample(s.frame, s.boxes, s.classes, self.aug, rng, pool)
                    img, tg = self._prepare(frame, boxes, classes, res)
                elif identity:
                    if (r, idx) not in self._cache:
                        self._cache[r, idx] = self._prepare(s.frame, s.boxes, s.classes, res)
                    img, tg = self._cache[r, idx]
                else:
                    frame, boxes, classes = augment_sample(s.frame, s.boxes, s.classes, self.aug, rng, pool)
                    img, tg = self._prepare(frame, boxes, classes, res)
                imgs.append(img)
                tgs.append(tg)
            yield np.stack(imgs)[:, None], collate_targets(tgs)


def _mean_breakdown(parts, weights):
    obj = float(np.mean([p.obj for p in parts]))
    cls = float(np.mean([p.cls for p in parts]))
    loc = float(np.mean([p.loc for p in parts]))
    return LossBreakdown.combine(obj, cls, loc, weights, sum(p.matched_cell_count for p in parts))


def write_log(path, history):
    dataio.atomic_write_text(path, LOG_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in history))


def train(samples, model, cfg: TrainConfig, aug: Optional[AugmentationSpec] = None, log_path=None, checkpoint_path=None):
    """Train ``model`` in place and return a :class:`TrainResult`.

    For the trailing ``cfg.bn_freeze`` fraction of epochs batch norm runs on
    its running statistics: with small batches the batch statistics shift
    with every reshuffle, which puts a floor under the loss and leaves the
    inference-mode network slightly different from the trained one.

    On a non-finite loss or gradient the weights from the end of the last
    finished epoch are restored (and written to ``checkpoint_path`` when
    given) before :class:`NumericError` is raised.
    """
    aug = aug if aug is not None else AugmentationSpec()
    batcher = Batcher(samples, model.config, cfg, aug)
    opt = Adam(cfg.betas, cfg.adam_eps, cfg.weight_decay)
    steps = batcher.steps_per_epoch()
    total_steps = cfg.epochs * steps
    result = TrainResult(model)
    last_good = {k: v.copy() for k, v in model.weights.items()}
    step = 0
    freeze_from = cfg.epochs - int(round(cfg.bn_freeze * cfg.epochs)) + 1
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        parts = []
        lr = cfg.learning_rate
        try:
            for images, targets in batcher.epoch(epoch):
                lr = cosine_lr(step, total_steps, cfg.learning_rate, cfg.eta_min)
                preds = model.forward(images, training=True, frozen_bn=epoch >= freeze_from)
                loss, grads = composite_loss_and_grad(preds, targets, cfg.loss, model.config.head_box_clamp)
                if not math.isfinite(loss.total):
                    raise NumericError(f"loss became non-finite at epoch {epoch}")
                model.backward([g.astype(model.dtype) for g in grads])
                opt.step(model.weights, model.grads, lr)
                parts.append(loss)
                result.dropped_targets += targets.dropped
                step += 1
        except NumericError:
            model.weights.update({k: v.copy() for k, v in last_good.items()})
            if checkpoint_path is not None:
                dataio.write_weights(checkpoint_path, model.weights)
            if log_path is not None:
                write_log(log_path, result.history)
            raise
        record = EpochRecord(epoch, _mean_breakdown(parts, cfg.loss), lr, time.perf_counter() - t0)
        result.history.append(record)
        last_good = {k: v.copy() for k, v in model.weights.items()}
        logger.info("epoch %d: %s", epoch, record.csv_row())
    if log_path is not None:
        write_log(log_path, result.history)
    if checkpoint_path is not None:
        dataio.write_weights(checkpoint_path, model.weights)
    return result
