"""Lightweight single-shot detector for pedestrians in thermal frames.

numpy-only network, losses, training loop, evaluation and CLI; the
estimator classes in :mod:`ltvdet.estimator` give a fit/predict front end.
"""
from .config import RunConfig, TrainConfig, load_config, parse_config, serialize_config
from .dataio import Annotation, DatasetManifest, FoldSplit, make_folds, parse_annotation, read_weights, write_weights
from .estimator import DetectionPipeline, FramePreprocessor, ThermalDetector
from .exceptions import ConfigError, DataError, FormatError, LTVError, NumericError, ParseError, ShapeError, StateError
from .graph import Model, ModelConfig, reference_config, shrunk_config
from .imaging import AugmentationSpec, PadRecord, ThermalFrame
from .losses import LossBreakdown, LossWeights
from .postprocess import Detection

__version__ = "0.1.0"
