import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ltvdet import graph, synthetic
from ltvdet.estimator import FramePreprocessor, ThermalDetector, check_frames, check_targets
from ltvdet.exceptions import ConfigError, DataError
from ltvdet.imaging import AugmentationSpec, ThermalFrame


@pytest.fixture(scope="module")
def data():
    scenes = synthetic.overfit_set(0, 4)
    return [s.frame for s in scenes], [(s.boxes, s.classes) for s in scenes]


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return ThermalDetector(epochs=2, batch_size=2, input_width=96, input_height=77, seed=1).fit(X, y)


def test_get_params_and_clone():
    est = ThermalDetector(epochs=7, lambda_loc=2.0, augment=AugmentationSpec.disabled())
    params = est.get_params()
    assert params["epochs"] == 7 and params["lambda_loc"] == 2.0
    twin = clone(est)
    assert twin.get_params()["epochs"] == 7 and twin is not est
    assert est.set_params(epochs=3).epochs == 3


def test_unfitted_predict():
    with pytest.raises(NotFittedError):
        ThermalDetector().predict([np.zeros((16, 16))])


def test_fit_predict_score(fitted, data):
    X, y = data
    assert len(fitted.history_) == 2
    assert list(fitted.classes_) == [0, 1]
    preds = fitted.predict(X, tau=0.0)
    assert len(preds) == len(X)
    h, w = X[0].shape
    for dets in preds:
        for d in dets:
            assert 0 <= d.bbox[0] < d.bbox[2] <= w and 0 <= d.bbox[1] < d.bbox[3] <= h
    assert 0.0 <= fitted.score(X, y) <= 1.0


def test_fit_is_deterministic(fitted, data):
    X, y = data
    again = clone(fitted).fit(X, y)
    assert all(np.array_equal(fitted.model_.weights[k], again.model_.weights[k]) for k in fitted.model_.weights)


def test_from_model_wraps_trained_network():
    model = graph.Model.build(graph.shrunk_config(), seed=0)
    est = ThermalDetector.from_model(model, input_width=96, input_height=77)
    assert est.predict([np.zeros((77, 96), dtype=np.float32)], tau=0.9) == [[]]


def test_bad_model_name(data):
    with pytest.raises(ConfigError):
        ThermalDetector(model="huge", epochs=1).fit(*data)


def test_check_frames():
    frames = check_frames(np.zeros((3, 8, 10), dtype=np.float32))
    assert len(frames) == 3
    raw = check_frames([ThermalFrame(np.full((4, 4), 65535, dtype=np.uint16))])
    np.testing.assert_array_equal(raw[0], np.ones((4, 4), dtype=np.float32))
    for bad in ([], [np.zeros(5)], [np.full((2, 2), np.nan)], 5):
        with pytest.raises(DataError):
            check_frames(bad)


def test_check_targets():
    good = check_targets([([[0, 0, 1, 1]], [1]), ([], [])], 2, 2)
    assert good[1][0].shape == (0, 4)
    for bad, n in ((None, 1), ([([[0, 0, 1, 1]], [0])], 2), ([([[0, 0, 1, 1]], [0, 1])], 1),
                   ([([[0, 0, 1, 1]], [2])], 1), ([5], 1)):
        with pytest.raises(DataError):
            check_targets(bad, n, 2)


def test_frame_preprocessor():
    pre = FramePreprocessor(140, 112)
    X = [np.random.default_rng(0).random((512, 640)).astype(np.float32)] * 2
    out = pre.fit(X).transform(X)
    assert out.shape == (2, 1, 128, 160) and out.dtype == np.float32
    assert pre.records_[0].padded_dims == (128, 160)
    assert pre.fit_transform(X).shape == out.shape
