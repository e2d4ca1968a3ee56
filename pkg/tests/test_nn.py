import json
import math
import struct
import time

import numpy as np
import pytest

from gazelens.errors import EmptyDataset, HeaderMismatch, MissingCache, ShapeMismatch
from gazelens.nn import (Conv2d, Dropout, MaxPool2d, MiniVggSpec, ReLU, TrainConfig, backward, bce_loss, build_minivgg,
                         forward, load_checkpoint, save_checkpoint, train)

from oracles import conv2d_naive, gradient_errors, maxpool_naive, toy_net

def test_gradients_match_finite_differences():
    start = time.monotonic()
    for seed in range(50):
        for name, rel in gradient_errors(seed).items():
            assert rel <= 1e-6, (seed, name, rel)
    assert time.monotonic() - start < 120


def test_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(0)
    net = toy_net(rng)
    _, cache = net.forward(rng.normal(size=(3, 2, 6, 6)), train=True, rng=np.random.default_rng(1))
    dx, grads = net.backward(cache, np.zeros((3, 1)))
    assert not np.any(dx)
    assert all(not np.any(g) for g in grads.values())


def test_relu_backward_negative():
    relu = ReLU()
    y, c = relu.forward(np.array([-2.0, -0.1, 0.5]))
    dx, _ = relu.backward(c, np.ones(3))
    assert list(y) == [0, 0, 0.5] and list(dx) == [0, 0, 1]


def test_identity_kernel():
    conv = Conv2d(1, 1, 3, 1, np.float64)
    conv.params["weight"][...] = 0
    conv.params["weight"][0, 0, 1, 1] = 1
    x = np.random.default_rng(2).normal(size=(2, 1, 5, 7))
    y, _ = conv.forward(x)
    assert np.array_equal(y, x)


def test_pool_example():
    y, _ = MaxPool2d().forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert y.item() == 4


def test_conv_and_pool_match_naive():
    rng = np.random.default_rng(5)
    conv = Conv2d(3, 4, 3, 1, np.float64, rng)
    x = rng.normal(size=(2, 3, 6, 8))
    y, _ = conv.forward(x)
    assert np.allclose(y, conv2d_naive(x, conv.params["weight"], conv.params["bias"], 1), atol=1e-12)
    p, _ = MaxPool2d().forward(x)
    assert np.array_equal(p, maxpool_naive(x))


def test_zero_weights_give_half():
    net = build_minivgg(MiniVggSpec(32, 32), "f64", seed=3)
    for v in net.params.values():
        v[...] = 0
    p, _ = forward(net, np.random.default_rng(0).normal(size=(4, 3, 32, 32)))
    assert np.all(p == 0.5)


@pytest.mark.parametrize("size", [32, 64, 96, 224])
def test_minivgg_shapes(size):
    spec = MiniVggSpec(size, size)
    net = build_minivgg(spec, "f32")
    x = np.zeros((1, 3, size, size), dtype=np.float32)
    h = x
    for i, layer in enumerate(net.layers):
        h, _ = layer.forward(h)
        if isinstance(layer, Conv2d):
            assert h.shape[2:] == (size >> sum(j < i for j in net.block_ends),) * 2
        if i == net.block_ends[-1]:
            assert h.shape[1:] == spec.feature_shape == (64, size // 8, size // 8)
    assert h.shape == (1, 1)


def test_96_feature_map_is_12():
    assert MiniVggSpec(96, 96).feature_shape == (64, 12, 12)
    with pytest.raises(ShapeMismatch):
        MiniVggSpec(100, 96)


def test_forward_shape_check():
    net = build_minivgg(MiniVggSpec(32, 32))
    with pytest.raises(ShapeMismatch):
        forward(net, np.zeros((1, 3, 64, 64), dtype=np.float32))


def test_missing_cache():
    net = build_minivgg(MiniVggSpec(32, 32))
    with pytest.raises(MissingCache):
        backward(net, None, np.ones((1, 1)))


def test_dropout_scaling_and_eval():
    d = Dropout(0.2)
    x = np.ones((200, 500))
    y, _ = d.forward(x, train=True, rng=np.random.default_rng(0))
    assert abs(y.mean() - 1.0) < 0.01
    assert set(np.unique(y)) <= {0.0, 1.25}
    assert d.forward(x)[0] is x


def test_eval_forward_deterministic():
    net = build_minivgg(MiniVggSpec(32, 32), "f32", 1)
    x = np.random.default_rng(0).random((3, 3, 32, 32)).astype(np.float32)
    assert np.array_equal(net.predict_proba(x), net.predict_proba(x))


def test_bce_examples():
    loss, _ = bce_loss(np.array([0.5]), np.array([1]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    loss, _ = bce_loss(np.array([1.0, 0.0]), np.array([1, 0]))
    assert loss <= 1.1e-6 * abs(math.log(1e-7))
    assert loss == pytest.approx(-math.log(1 - 1e-7), rel=1e-6)


def test_bce_grad_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p = rng.uniform(0.2, 0.8, 5)
        y = rng.integers(0, 2, 5).astype(float)
        _, g = bce_loss(p, y)
        eps = 1e-6
        num = np.zeros(5)
        for i in range(5):
            e = np.zeros(5)
            e[i] = eps
            num[i] = (bce_loss(p + e, y)[0] - bce_loss(p - e, y)[0]) / (2 * eps)
        assert np.max(np.abs(g - num) / np.abs(num)) <= 1e-8


def toy_images(n=8, size=32, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.random((n, 3, size, size)).astype(np.float32) * 0.2
    X[y == 1, 0, : size // 2] += 0.8  # relevant images carry a red top half
    return X, y


def test_overfit_eight_images():
    X, y = toy_images()
    net = build_minivgg(MiniVggSpec(32, 32), "f32", seed=0)
    _, log = train(net, (X, y), TrainConfig(epochs=200, batch_size=8, seed=0))
    assert log[-1].train_acc == 1.0
    assert np.all((net.predict_proba(X) >= 0.5) == (y == 1))


def test_training_deterministic():
    X, y = toy_images(seed=1)
    cfg = TrainConfig(epochs=3, batch_size=4, seed=9)
    runs = []
    for _ in range(2):
        net = build_minivgg(MiniVggSpec(32, 32), "f32", seed=2)
        _, log = train(net, (X, y), cfg, val=(X, y))
        runs.append([(e.train_loss, e.val_loss) for e in log])
    assert runs[0] == runs[1]


def test_zero_step_keeps_parameters():
    X, y = toy_images(seed=2)
    net = build_minivgg(MiniVggSpec(32, 32), "f32", seed=2)
    before = {k: v.copy() for k, v in net.params.items()}
    train(net, (X, y), TrainConfig(epochs=3, batch_size=3, momentum=0.0, learning_rate=0.0))
    assert all(np.array_equal(before[k], v) for k, v in net.params.items())


def test_empty_dataset():
    net = build_minivgg(MiniVggSpec(32, 32))
    with pytest.raises(EmptyDataset):
        train(net, (np.zeros((0, 3, 32, 32)), np.zeros(0)))


def test_checkpoint_round_trip(tmp_path):
    X, y = toy_images(seed=3)
    for prec in ("f32", "f64"):
        net = build_minivgg(MiniVggSpec(32, 32), prec, seed=4)
        train(net, (X, y), TrainConfig(epochs=1, batch_size=4, precision=prec))
        save_checkpoint(net, tmp_path / f"{prec}.ckpt")
        back = load_checkpoint(tmp_path / f"{prec}.ckpt", precision=prec)
        assert back.trained and back.precision == prec
        for k, v in net.params.items():
            assert back.params[k].tobytes() == v.tobytes()
        assert np.array_equal(net.predict_proba(X), back.predict_proba(X))


def test_checkpoint_precision_mismatch(tmp_path):
    net = build_minivgg(MiniVggSpec(32, 32), "f64")
    save_checkpoint(net, tmp_path / "m.ckpt")
    with pytest.raises(HeaderMismatch):
        load_checkpoint(tmp_path / "m.ckpt", precision="f32")


def test_checkpoint_edited_shape(tmp_path):
    net = build_minivgg(MiniVggSpec(32, 32), "f32")
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, path)
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    header["tensors"][0]["shape"] = [16, 3, 3, 2]
    hb = json.dumps(header).encode()
    path.write_bytes(raw[:8] + struct.pack("<Q", len(hb)) + hb + raw[16 + hlen:])
    with pytest.raises(HeaderMismatch):
        load_checkpoint(path)
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(HeaderMismatch):
        load_checkpoint(path)
