"""Estimator-style front end: ``fit`` / ``transform`` / ``predict`` / ``score``.

``X`` is a sequence of thermal frames (2-D arrays or :class:`ThermalFrame`),
``y`` a sequence of ``(boxes, classes)`` pairs with corner-format pixel boxes
in the frame's own coordinates.
"""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .config import TrainConfig
from .exceptions import ConfigError, DataError
from .graph import Model, ModelConfig, reference_config, shrunk_config
from .imaging import AugmentationSpec, ThermalFrame, normalize, preprocess
from .losses import LossWeights
from .postprocess import decode, nms, threshold_filter
from .train import Sample, train
from . import evaluation


def check_frames(X):
    """Validate ``X`` and return a list of float32 [0, 1] frames."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    try:
        items = list(X)
    except TypeError:
        raise DataError(f"expected a sequence of frames, got {type(X).__name__}") from None
    if not items:
        raise DataError("no frames given")
    out = []
    for k, f in enumerate(items):
        px = f.pixels if isinstance(f, ThermalFrame) else np.asarray(f)
        if px.ndim != 2:
            raise DataError(f"frame {k} must be 2-D, got shape {px.shape}")
        if px.dtype.kind == "f":
            if not np.isfinite(px).all():
                raise DataError(f"frame {k} contains non-finite values")
            out.append(np.clip(px, 0, 1).astype(np.float32))
        else:
            out.append(normalize(px, "fixed"))
    return out


def check_targets(y, n_frames, num_classes):
    """Validate ``y`` as ``n_frames`` ``(boxes, classes)`` pairs."""
    if y is None:
        raise DataError("fit needs targets: a (boxes, classes) pair per frame")
    y = list(y)
    if len(y) != n_frames:
        raise DataError(f"{n_frames} frames but {len(y)} target entries")
    out = []
    for k, pair in enumerate(y):
        try:
            boxes, classes = pair
        except (TypeError, ValueError):
            raise DataError(f"target {k} must be a (boxes, classes) pair") from None
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        classes = np.asarray(classes, dtype=np.int64).reshape(-1)
        if len(boxes) != len(classes):
            raise DataError(f"target {k}: {len(boxes)} boxes but {len(classes)} classes")
        if np.any((classes < 0) | (classes >= num_classes)):
            raise DataError(f"target {k}: class id outside [0, {num_classes})")
        out.append((boxes, classes))
    return out


def resolve_model_config(model):
    if isinstance(model, ModelConfig):
        return model
    if model == "reference":
        return reference_config()
    if model == "shrunk":
        return shrunk_config()
    raise ConfigError(f"model must be 'reference', 'shrunk' or a ModelConfig, got {model!r}")


class FramePreprocessor(TransformerMixin, BaseEstimator):
    """Resize to the input resolution and letterbox to the stride multiple.

    ``transform`` returns an (N, 1, H, W) float32 batch; the pad records of
    the last call are kept in ``records_`` for mapping boxes back.
    """

    def __init__(self, width=140, height=112, stride_multiple=32):
        self.width = width
        self.height = height
        self.stride_multiple = stride_multiple

    def fit(self, X, y=None):
        check_frames(X)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        frames = check_frames(X)
        images, records = [], []
        for f in frames:
            img, _, rec = preprocess(f, self.width, self.height, self.stride_multiple)
            images.append(img)
            records.append(rec)
        shapes = {im.shape for im in images}
        if len(shapes) != 1:
            raise DataError(f"frames produced different padded shapes {sorted(shapes)}")
        self.records_ = records
        return np.stack(images)[:, None]


class DetectionPipeline:
    """preprocess -> forward -> decode -> threshold -> NMS for single frames."""

    def __init__(self, model, width, height, tau=0.5, iou_thresh=0.5):
        if not 0.0 <= tau <= 1.0:
            raise ConfigError(f"tau must lie in [0, 1], got {tau}")
        self.model = model
        self.width = width
        self.height = height
        self.tau = tau
        self.iou_thresh = iou_thresh

    def raw(self, frame):
        img, _, rec = preprocess(frame, self.width, self.height, self.model.config.max_stride)
        return self.model.forward(img[None, None]), rec

    def __call__(self, frame, tau=None):
        tau = self.tau if tau is None else tau
        preds, rec = self.raw(frame)
        return nms(threshold_filter(decode(preds, self.model.config, rec, min_score=tau), tau), self.iou_thresh)


class ThermalDetector(BaseEstimator):
    """Single-shot thermal pedestrian detector.

    Parameters mirror the training configuration; ``augment`` is an
    :class:`AugmentationSpec` or ``None`` for no augmentation.
    """

    def __init__(
        self,
        model="shrunk",
        epochs=200,
        batch_size=16,
        learning_rate=1e-3,
        eta_min=0.0,
        weight_decay=5e-4,
        lambda_obj=1.0,
        lambda_cls=1.0,
        lambda_loc=5.0,
        input_width=140,
        input_height=112,
        scale_crops=0,
        bn_freeze=0.25,
        augment=None,
        tau=0.5,
        iou_thresh=0.5,
        score_floor=0.01,
        seed=0,
    ):
        self.model = model
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.eta_min = eta_min
        self.weight_decay = weight_decay
        self.lambda_obj = lambda_obj
        self.lambda_cls = lambda_cls
        self.lambda_loc = lambda_loc
        self.input_width = input_width
        self.input_height = input_height
        self.scale_crops = scale_crops
        self.bn_freeze = bn_freeze
        self.augment = augment
        self.tau = tau
        self.iou_thresh = iou_thresh
        self.score_floor = score_floor
        self.seed = seed

    def train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            eta_min=self.eta_min,
            epochs=self.epochs,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            seed=self.seed,
            input_width=self.input_width,
            input_height=self.input_height,
            scale_crops=self.scale_crops,
            bn_freeze=self.bn_freeze,
            loss=LossWeights(self.lambda_obj, self.lambda_cls, self.lambda_loc),
        )

    def fit(self, X, y):
        config = resolve_model_config(self.model)
        frames = check_frames(X)
        targets = check_targets(y, len(frames), config.num_classes)
        samples = [Sample(f, b, c, f"x{k}") for k, (f, (b, c)) in enumerate(zip(frames, targets))]
        tc = self.train_config()
        aug = self.augment if self.augment is not None else AugmentationSpec.disabled(self.seed)
        net = Model.build(config, seed=self.seed)
        result = train(samples, net, tc, aug)
        self.model_ = net
        self.history_ = result.history
        self.classes_ = np.arange(config.num_classes)
        return self

    @classmethod
    def from_model(cls, model, **params):
        """Wrap an already trained :class:`Model`."""
        est = cls(model=model.config, **params)
        est.model_ = model
        est.history_ = []
        est.classes_ = np.arange(model.config.num_classes)
        return est

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("ThermalDetector is not fitted yet; call fit or from_model first")

    def pipeline(self, tau=None):
        self._check_fitted()
        return DetectionPipeline(
            self.model_, self.input_width, self.input_height, self.tau if tau is None else tau, self.iou_thresh
        )

    def predict(self, X, tau=None):
        """Detections per frame (list of :class:`Detection`), in frame pixels."""
        run = self.pipeline(tau)
        return [run(f) for f in check_frames(X)]

    def score(self, X, y):
        """mAP@0.5 over ``X``, ranking every detection above ``score_floor``."""
        frames = check_frames(X)
        targets = check_targets(y, len(frames), len(self.classes_) if hasattr(self, "classes_") else 2)
        dets = self.predict(frames, tau=self.score_floor)
        return evaluation.dataset_map(dets, targets, len(self.classes_))
