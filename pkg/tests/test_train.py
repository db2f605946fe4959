import numpy as np
import pytest

from ltvdet import dataio, graph, synthetic, train as T
from ltvdet.config import TrainConfig
from ltvdet.exceptions import ConfigError, DataError, NumericError
from ltvdet.imaging import AugmentationSpec


@pytest.fixture(scope="module")
def samples():
    scenes = [synthetic.make_scene(s, n_people=2, size=(320, 256)) for s in range(4)]
    return [T.Sample(s.frame, s.boxes, s.classes, f"s{k}") for k, s in enumerate(scenes)]


def small_config(**kw):
    base = dict(epochs=2, batch_size=2, input_width=96, input_height=77, seed=1)
    return TrainConfig(**{**base, **kw})


def run(samples, cfg, aug=None, **kw):
    model = graph.Model.build(graph.shrunk_config(), seed=cfg.seed)
    return model, T.train(samples, model, cfg, aug or AugmentationSpec.disabled(), **kw)


def test_epochs_zero_rejected():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)


@pytest.mark.parametrize("kw", [dict(learning_rate=0.0), dict(batch_size=0), dict(eta_min=1.0), dict(bn_freeze=1.0),
                                dict(extra_resolutions=(64,)), dict(schedule="step"), dict(preset="nope")])
def test_bad_train_config(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_presets():
    a = TrainConfig.from_preset("paper-4.2")
    b = TrainConfig.from_preset("paper-3.1.3")
    assert (a.epochs, a.batch_size, a.weight_decay, a.learning_rate) == (200, 16, 5e-4, 1e-3)
    assert (b.epochs, b.batch_size) == (100, 32)
    assert TrainConfig() == a


def test_bitwise_deterministic(samples, tmp_path):
    aug = AugmentationSpec(seed=3, temp_bias_p=0.5, cut_p=0.5)
    _, r1 = run(samples, small_config(), aug, checkpoint_path=tmp_path / "a.ltvw")
    _, r2 = run(samples, small_config(), aug, checkpoint_path=tmp_path / "b.ltvw")
    assert (tmp_path / "a.ltvw").read_bytes() == (tmp_path / "b.ltvw").read_bytes()
    assert [h.loss for h in r1.history] == [h.loss for h in r2.history]


def test_seed_changes_weights(samples, tmp_path):
    run(samples, small_config(seed=1), checkpoint_path=tmp_path / "a.ltvw")
    run(samples, small_config(seed=2), checkpoint_path=tmp_path / "b.ltvw")
    assert (tmp_path / "a.ltvw").read_bytes() != (tmp_path / "b.ltvw").read_bytes()


def test_epoch_log(samples, tmp_path):
    _, res = run(samples, small_config(epochs=3), log_path=tmp_path / "epochs.csv")
    lines = (tmp_path / "epochs.csv").read_text().splitlines()
    assert lines[0] == "epoch,total,obj,cls,loc,lr,seconds"
    assert [int(l.split(",")[0]) for l in lines[1:]] == [1, 2, 3]
    for rec in res.history:
        l = rec.loss
        assert l.total == pytest.approx(l.obj + l.cls + 5 * l.loc, rel=1e-12)


def test_loss_decreases(samples):
    _, res = run(samples, small_config(epochs=40, learning_rate=5e-3))
    assert res.history[-1].loss.total < 0.5 * res.history[0].loss.total


def test_batch_larger_than_dataset(samples):
    with pytest.raises(ConfigError):
        run(samples, small_config(batch_size=5))


def test_empty_dataset():
    with pytest.raises(DataError):
        T.train([], graph.Model.build(graph.shrunk_config()), small_config())


def test_nan_restores_last_good(samples, tmp_path, monkeypatch):
    real = T.composite_loss_and_grad
    calls = {"n": 0}
    steps_per_epoch = 2

    def poisoned(*a, **kw):
        calls["n"] += 1
        loss, grads = real(*a, **kw)
        if calls["n"] > steps_per_epoch:
            loss = type(loss)(float("nan"), loss.obj, loss.cls, loss.loc, loss.matched_cell_count)
        return loss, grads

    snapshot = {}
    real_epoch = T.Batcher.epoch

    def watch(self, epoch):
        if epoch == 2:
            snapshot.update({k: v.copy() for k, v in model.weights.items()})
        yield from real_epoch(self, epoch)

    monkeypatch.setattr(T, "composite_loss_and_grad", poisoned)
    monkeypatch.setattr(T.Batcher, "epoch", watch)
    model = graph.Model.build(graph.shrunk_config(), seed=1)
    with pytest.raises(NumericError, match="epoch 2"):
        T.train(samples, model, small_config(epochs=3), AugmentationSpec.disabled(),
                checkpoint_path=tmp_path / "ck.ltvw", log_path=tmp_path / "log.csv")
    saved = dataio.read_weights(tmp_path / "ck.ltvw")
    for k, v in snapshot.items():
        np.testing.assert_array_equal(model.weights[k], v)
        np.testing.assert_array_equal(saved[k], v)
    assert len((tmp_path / "log.csv").read_text().splitlines()) == 2


def test_batcher_order_and_views(samples):
    cfg = small_config(extra_resolutions=(64, 52))
    b = T.Batcher(samples, graph.shrunk_config(), cfg, AugmentationSpec.disabled())
    assert b.views_per_epoch() == 8 and b.steps_per_epoch() == 4
    shapes = [imgs.shape for imgs, _ in b.epoch(1)]
    assert sorted(s[2:] for s in shapes) == [(64, 64)] * 2 + [(96, 96)] * 2
    again = [imgs for imgs, _ in b.epoch(1)]
    other = [imgs for imgs, _ in b.epoch(2)]
    assert all(np.array_equal(a, c) for a, c in zip([i for i, _ in b.epoch(1)], again))
    assert not all(a.shape == c.shape and np.array_equal(a, c) for a, c in zip(again, other))


def test_scale_crop_keeps_targets(samples):
    rng = np.random.default_rng(0)
    s = samples[0]
    crop = T.scale_crop(s, 96, 77, 0.5, rng)
    assert crop.frame.shape == (77, 96)
    assert len(crop.boxes) >= 1
    assert np.all(crop.boxes[:, 2] <= 96 + 1e-9) and np.all(crop.boxes[:, 3] <= 77 + 1e-9)


def test_bn_freeze_schedule(samples):
    model = graph.Model.build(graph.shrunk_config(), seed=1)
    flags = []
    forward = model.forward

    def spy(x, training=False, frozen_bn=False):
        flags.append(frozen_bn)
        return forward(x, training, frozen_bn)

    model.forward = spy
    T.train(samples, model, small_config(epochs=4, bn_freeze=0.5), AugmentationSpec.disabled())
    assert flags == [False] * 4 + [True] * 4  # two steps per epoch, last two epochs frozen


def test_frozen_epochs_leave_running_stats(samples):
    model = graph.Model.build(graph.shrunk_config(), seed=1)
    T.train(samples, model, small_config(epochs=1, bn_freeze=0.0), AugmentationSpec.disabled())
    stats = {k: v.copy() for k, v in model.weights.items() if k.endswith(("running_mean", "running_var"))}
    assert any(v.any() for k, v in stats.items() if k.endswith("running_mean"))
    batcher = T.Batcher(samples, model.config, small_config(), AugmentationSpec.disabled())
    images, _ = next(batcher.epoch(1))
    model.forward(images, training=True, frozen_bn=True)
    for k, v in stats.items():
        np.testing.assert_array_equal(model.weights[k], v)
