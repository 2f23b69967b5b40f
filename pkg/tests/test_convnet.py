import math

import numpy as np
import pytest

from oracles import fd_relative_errors, tiny_net
from spinecade.convnet import (
    ConvNetModel,
    TrainConfig,
    conv,
    desk64,
    dropout,
    fc,
    infer_shapes,
    load_model,
    maxpool,
    model_bytes,
    paper64,
    relu,
    save_model,
    softmax,
    train,
)
from spinecade.errors import ChecksumMismatchError, ShapeMismatchError, SingleClassDatasetError, VersionMismatchError


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    assert fd_relative_errors(seed).max() < 1e-4


def test_paper64_layout():
    layers, shapes = infer_shapes(paper64(), (3, 64, 64))
    assert [l.kind.name for l in layers].count("CONV") == 5
    assert [l.kind.name for l in layers].count("FC") == 3
    assert layers[0].kernel_size == 5 and layers[0].stride == 1
    assert shapes[-1] == (2,)
    infer_shapes(desk64(), (3, 64, 64))


def test_shape_errors():
    with pytest.raises(ShapeMismatchError):
        infer_shapes([conv(3, 4, 3), fc(99, 2), softmax()], (3, 8, 8))
    with pytest.raises(ShapeMismatchError):
        infer_shapes([conv(2, 4, 3), fc(0, 2), softmax()], (3, 8, 8))
    model = tiny_net(0)
    with pytest.raises(ShapeMismatchError):
        model.forward(np.zeros((2, 3, 9, 8)))
    with pytest.raises(ShapeMismatchError):
        model.loss_and_grads(np.zeros((2, 3, 8, 8)), [0])


def test_softmax_rows_and_duplicates():
    model = ConvNetModel.build("desk64", seed=4)
    x = np.random.default_rng(0).random((5, 3, 64, 64)).astype(np.float32)
    x[3] = x[1]
    p = model.forward(x)
    assert p.shape == (5, 2)
    assert np.all(p >= 0) and np.all(p <= 1)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.array_equal(p[1], p[3])


def test_batch_size_does_not_change_predictions():
    model = ConvNetModel.build("desk64", seed=2)
    x = np.random.default_rng(1).random((12, 3, 64, 64)).astype(np.float32)
    assert np.array_equal(model.predict_proba(x, 1), model.predict_proba(x, 12))


def test_keep_prob_one_ignores_mode():
    model = tiny_net(3, keep_prob=1.0)
    x = np.random.default_rng(0).random((4, 3, 8, 8))
    a = model.forward(x)
    model.training_mode = True
    assert np.array_equal(a, model.forward(x))


def test_uniform_prediction_loss_is_ln2():
    model = tiny_net(1)
    model.weights[-2]["W"][:] = 0
    model.weights[-2]["b"][:] = 0
    loss, _ = model.loss_and_grads(np.random.default_rng(0).random((6, 3, 8, 8)), [0, 1, 0, 1, 1, 0])
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_confident_correct_prediction():
    model = tiny_net(1)
    model.weights[-2]["W"][:] = 0
    model.weights[-2]["b"][:] = [0.0, 40.0]
    loss, grads = model.loss_and_grads(np.random.default_rng(0).random((3, 3, 8, 8)), [1, 1, 1])
    assert loss < 1e-6
    assert max(np.abs(g).max() for w in grads for g in w.values()) < 1e-6


def test_dropout_keep_frequency():
    p, n = 0.5, 10_000
    model = ConvNetModel.build([fc(0, 8), dropout(p), fc(8, 2), softmax()], (1, 1, 1), seed=0, dtype=np.float64)
    model.training_mode = True
    kept = np.zeros(8)
    x = np.ones((1, 1, 1, 1))
    for _ in range(n):
        _, caches = model._run(x, keep_cache=True)
        kept += caches[1][0] > 0
        assert set(np.unique(caches[1])) <= {0.0, 1 / p}
    se = math.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(kept / n - p) < 3 * se + 1e-12)


def toy_set(n=200, seed=0):
    """Class = sign of mean intensity relative to 0.5; separable by a linear unit."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.random((n, 3, 8, 8)) * 0.4 + np.where(y, 0.55, 0.05)[:, None, None, None]
    return x.astype(np.float32), y


def small_net(seed=0):
    return ConvNetModel.build([conv(3, 4, 3), relu(), maxpool(2), conv(4, 4, 3), relu(), fc(0, 2), softmax()],
                              (3, 8, 8), seed=seed)


def test_separable_toy_set():
    x, y = toy_set()
    cfg = TrainConfig(learning_rate=0.05, epochs=50, batch_size=20, seed=0)
    model, hist = train(small_net(), (x, y), cfg)
    assert max(h.train_accuracy for h in hist) >= 0.99
    assert hist[-1].train_accuracy >= 0.99
    losses = [h.mean_loss for h in hist]
    assert losses[-1] < losses[0]
    late = losses[5:]
    assert all(b <= a * 1.05 + 1e-3 for a, b in zip(late, late[1:]))


def test_zero_learning_rate_is_no_op():
    x, y = toy_set(40)
    model = small_net()
    trained, hist = train(model, (x, y), TrainConfig(learning_rate=0.0, epochs=3, weight_decay=0.0))
    assert model_bytes(trained) == model_bytes(model)
    assert len({h.mean_loss for h in hist}) == 1


def test_training_is_deterministic():
    x, y = toy_set(40)
    cfg = TrainConfig(learning_rate=0.05, epochs=3, batch_size=8, seed=5)
    a, ha = train(small_net(), (x, y), cfg)
    b, hb = train(small_net(), (x, y), cfg)
    assert ha == hb
    assert model_bytes(a) == model_bytes(b)


def test_single_class_rejected():
    x, _ = toy_set(10)
    with pytest.raises(SingleClassDatasetError):
        train(small_net(), (x, np.zeros(10, int)), TrainConfig())


def test_bad_config():
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_checkpoint_round_trip(tmp_path):
    model = ConvNetModel.build("desk64", seed=9)
    save_model(model, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    assert back.layers == model.layers
    x = np.random.default_rng(0).random((3, 3, 64, 64)).astype(np.float32)
    assert np.array_equal(back.forward(x), model.forward(x))

    blob = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ChecksumMismatchError):
        load_model(tmp_path / "t.bin")
    (tmp_path / "f.bin").write_bytes(blob[:100] + bytes([blob[100] ^ 1]) + blob[101:])
    with pytest.raises(ChecksumMismatchError):
        load_model(tmp_path / "f.bin")
    (tmp_path / "w.bin").write_bytes(b"XNET" + blob[4:])
    with pytest.raises(VersionMismatchError):
        load_model(tmp_path / "w.bin")
