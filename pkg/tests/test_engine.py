import math
import struct

import numpy as np
import pytest

from cumnet.engine import (SGD, BatchNorm2D, Conv2D, Dense, Flatten, MaxPool2D, Network, ReLU, backward,
                           build_vgg, forward, forward_with_cache, load_checkpoint, save_checkpoint,
                           sgd_step)
from cumnet.engine.checkpoint import decode, encode
from cumnet.errors import (CheckpointFormatError, CheckpointLengthError, CheckpointVersionError,
                           CompositionError, ConfigError, DomainError, NumericError,
                           TruncatedCheckpointError)

import gradcheck
from oracles import forward_loop, mean_xent


def _random_bn(net, rng):
    for layer in net.layers:
        if isinstance(layer, BatchNorm2D):
            c = layer.channels
            layer.params["gamma"] = rng.uniform(0.5, 1.5, c).astype(np.float32)
            layer.params["beta"] = rng.normal(0, 0.2, c).astype(np.float32)
            layer.buffers["running_mean"] = rng.normal(0, 0.2, c).astype(np.float32)
            layer.buffers["running_var"] = rng.uniform(0.5, 2.0, c).astype(np.float32)


def test_identity_dense_is_passthrough():
    d = Dense(3, 3)
    d.params["weight"] = np.eye(3, dtype=np.float32)
    net = Network([d], (3,), 3)
    x = np.array([[1.5, -2.0, 0.25]], np.float32)
    np.testing.assert_array_equal(forward(net, x), x)


def test_relu_definition():
    y, _ = ReLU().forward(np.array([-1.0, 0.0, 2.0], np.float32))
    np.testing.assert_array_equal(y, [0.0, 0.0, 2.0])


def test_uniform_logits_loss_is_ln2():
    net = Network([Dense(2, 2)], (2,), 2)
    logits, cache = forward_with_cache(net, np.zeros((1, 2), np.float32))
    np.testing.assert_array_equal(logits, [[0.0, 0.0]])
    _, loss = backward(net, cache, [0])
    assert loss == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_cnn_forward_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    net = build_vgg([3, "M", 4], (2, 6, 6), 5, seed=seed)
    _random_bn(net, rng)
    x = rng.normal(size=(3, 2, 6, 6)).astype(np.float32)
    got = forward(net, x, "eval")
    want = forward_loop(net, x)
    assert got.dtype == np.float32
    assert np.max(np.abs(got - want)) <= 1e-5


def test_strided_conv_and_overlapping_pool_match_oracle():
    rng = np.random.default_rng(7)
    layers = [Conv2D(2, 3, 3, stride=2, padding=1, rng=rng), ReLU(), MaxPool2D(3, 1), Flatten(),
              Dense(3 * 2 * 2, 4, rng=rng)]
    net = Network(layers, (2, 7, 7), 4)
    x = rng.normal(size=(2, 2, 7, 7)).astype(np.float32)
    assert np.max(np.abs(forward(net, x) - forward_loop(net, x))) <= 1e-5


def test_maxpool_ties_route_to_first_element():
    pool = MaxPool2D(2)
    x = np.ones((1, 1, 2, 2), np.float32)
    y, cache = pool.forward(x)
    dx, _ = pool.backward(np.ones_like(y), cache)
    np.testing.assert_array_equal(dx[0, 0], [[1, 0], [0, 0]])


def test_shape_mismatch_is_composition_error():
    net = build_vgg([4], (1, 5, 5), 3)
    with pytest.raises(CompositionError):
        forward(net, np.zeros((2, 1, 6, 6), np.float32))
    with pytest.raises(CompositionError):
        Network([Conv2D(1, 2), Flatten(), Dense(10, 3)], (1, 4, 4), 3)


def test_non_finite_output_names_layer():
    net = build_vgg([2], (1, 4, 4), 2)
    net.layers[0].params["weight"][:] = np.inf
    with pytest.raises(NumericError, match="layer 0"):
        forward(net, np.ones((1, 1, 4, 4), np.float32))


def test_label_out_of_range_is_domain_error():
    net = Network([Dense(2, 3, rng=np.random.default_rng(0))], (2,), 3)
    _, cache = forward_with_cache(net, np.ones((2, 2), np.float32))
    with pytest.raises(DomainError):
        backward(net, cache, [0, 3])


def test_loss_matches_reference():
    rng = np.random.default_rng(1)
    net = build_vgg([3], (1, 4, 4), 4, seed=1)
    x = rng.normal(size=(5, 1, 4, 4)).astype(np.float32)
    y = rng.integers(0, 4, 5)
    logits, cache = forward_with_cache(net, x)
    _, loss = backward(net, cache, y)
    assert loss == pytest.approx(mean_xent(logits, y), rel=1e-12)


def test_gradients_two_conv_one_dense_finite_differences():
    # 2-conv + 1-dense network, batch 4, checked in float64.
    for seed in range(3):
        net = build_vgg([3, "M", 4], (1, 6, 6), 3, seed=seed)
        errs = gradcheck.check_network(net, batch=4, seed=seed)
        assert max(errs.values()) <= 1e-3, errs


@pytest.mark.parametrize("kind", gradcheck.KINDS)
def test_gradcheck_each_layer_kind(kind):
    for seed in range(3):
        errs = gradcheck.check_kind(kind, seed)
        assert max(errs.values()) <= 1e-3, (kind, seed, errs)


def test_all_frozen_network_has_zero_gradients():
    net = build_vgg([3, "M"], (1, 4, 4), 3, seed=0)
    for layer in net.layers:
        for pname, p in layer.params.items():
            layer.frozen[pname] = np.ones(p.shape, bool)
    x = np.random.default_rng(0).normal(size=(4, 1, 4, 4)).astype(np.float32)
    _, cache = forward_with_cache(net, x)
    grads, _ = backward(net, cache, [0, 1, 2, 0])
    for g in grads:
        for arr in g.values():
            assert not np.any(arr)


def _scalar_net(w=1.0):
    d = Dense(1, 1)
    d.params["weight"][:] = w
    return Network([d], (1,), 1)


def test_sgd_update_arithmetic():
    net = _scalar_net(1.0)
    grads = [{"weight": np.array([[2.0]], np.float32), "bias": np.zeros(1, np.float32)}]
    sgd_step(net, grads, lr=0.1)
    assert net.layers[0].params["weight"][0, 0] == np.float32(1.0) - np.float32(0.1) * np.float32(2.0)
    assert net.layers[0].params["weight"][0, 0] == pytest.approx(0.8)


def test_sgd_lr_zero_is_noop_and_negative_lr_rejected():
    net = build_vgg([2], (1, 3, 3), 2, seed=3)
    before = [l.params["weight"].copy() for l in net.layers if "weight" in l.params]
    grads = [{k: np.ones_like(v) for k, v in l.params.items()} for l in net.layers]
    sgd_step(net, grads, lr=0.0, momentum=0.9, weight_decay=0.1)
    after = [l.params["weight"] for l in net.layers if "weight" in l.params]
    for a, b in zip(before, after):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ConfigError):
        sgd_step(net, grads, lr=-0.1)


def test_frozen_scalar_unchanged():
    net = _scalar_net(1.0)
    net.layers[0].frozen["weight"] = np.ones((1, 1), bool)
    grads = [{"weight": np.array([[2.0]], np.float32), "bias": np.zeros(1, np.float32)}]
    opt = SGD(0.1, momentum=0.9, weight_decay=0.5)
    for _ in range(3):
        opt.step(net, grads)
    assert net.layers[0].params["weight"][0, 0] == np.float32(1.0)


def test_momentum_accumulates():
    net = _scalar_net(0.0)
    grads = [{"weight": np.array([[1.0]], np.float32), "bias": np.zeros(1, np.float32)}]
    opt = SGD(1.0, momentum=0.5)
    opt.step(net, grads)
    opt.step(net, grads)
    # v1 = 1, v2 = 1.5 -> w = -2.5
    assert net.layers[0].params["weight"][0, 0] == pytest.approx(-2.5)


def test_forward_determinism():
    net = build_vgg([4, "M", 4], (1, 8, 8), 3, seed=11)
    x = np.random.default_rng(2).normal(size=(6, 1, 8, 8)).astype(np.float32)
    a = forward(net.copy(), x, "train")
    b = forward(net.copy(), x, "train")
    assert a.tobytes() == b.tobytes()
    assert forward(net, x).tobytes() == forward(net, x).tobytes()


def test_batchnorm_eval_is_affine_per_channel():
    rng = np.random.default_rng(5)
    bn = BatchNorm2D(3)
    bn.params["gamma"] = rng.uniform(0.5, 2, 3).astype(np.float64)
    bn.params["beta"] = rng.normal(size=3)
    bn.buffers["running_mean"] = rng.normal(size=3)
    bn.buffers["running_var"] = rng.uniform(0.5, 2, 3)
    f = lambda x: bn.forward(x, train=False)[0]
    x1, x2 = rng.normal(size=(2, 1, 3, 4, 4))
    a, b = 0.3, 0.7
    zero = f(np.zeros_like(x1))
    # affine: f(a x1 + b x2) = a f(x1) + b f(x2) + (1 - a - b) f(0)
    np.testing.assert_allclose(f(a * x1 + b * x2), a * f(x1) + b * f(x2) + (1 - a - b) * zero, atol=1e-12)


def test_batchnorm_train_updates_running_stats():
    bn = BatchNorm2D(2)
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(8, 2, 4, 4)).astype(np.float32)
    bn.forward(x, train=True)
    mean = x.astype(np.float64).mean(axis=(0, 2, 3))
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * mean, rtol=1e-6)
    assert np.all(bn.buffers["running_var"] > 0)


# -- checkpoints ---------------------------------------------------------------

def _trained_like_net():
    net = build_vgg([3, "M", 4], (1, 6, 6), 4, seed=9)
    _random_bn(net, np.random.default_rng(9))
    net.layers[0].frozen["weight"] = np.random.default_rng(1).random(net.layers[0].params["weight"].shape) < 0.3
    net.morph_log.append({"op": "deepen", "site": 2, "id": "m-1"})
    net.lineage.append("m-1")
    return net


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = _trained_like_net()
    cid = save_checkpoint(net, tmp_path / "a.mtck")
    back = load_checkpoint(tmp_path / "a.mtck")
    assert len(cid) == 16
    assert back.num_classes == net.num_classes and back.input_shape == net.input_shape
    assert back.morph_log == net.morph_log and back.lineage == net.lineage
    for la, lb in zip(net.layers, back.layers):
        assert la.kind == lb.kind and la.name == lb.name and la.config() == lb.config()
        for k in la.params:
            assert la.params[k].tobytes() == lb.params[k].tobytes()
            np.testing.assert_array_equal(la.mask(k), lb.mask(k))
        for k in la.buffers:
            assert la.buffers[k].tobytes() == lb.buffers[k].tobytes()
    assert encode(back) == encode(net)


def test_checkpoint_truncated_blob_is_length_error():
    data = encode(_trained_like_net())
    with pytest.raises(CheckpointLengthError):
        decode(data[:-4])
    with pytest.raises(CheckpointLengthError):
        decode(data + b"\0")


def test_checkpoint_distinct_errors():
    data = encode(_trained_like_net())
    with pytest.raises(TruncatedCheckpointError):
        decode(data[:10])
    with pytest.raises(TruncatedCheckpointError):
        decode(data[:40])
    with pytest.raises(CheckpointFormatError):
        decode(b"XXXX" + data[4:])
    bumped = data[:4] + struct.pack("<I", 99) + data[8:]
    with pytest.raises(CheckpointVersionError):
        decode(bumped)


def test_checkpoint_header_num_classes_edit_is_composition_error():
    data = encode(_trained_like_net())
    hlen = struct.unpack_from("<Q", data, 8)[0]
    header = data[16:16 + hlen]
    edited = header.replace(b'"num_classes": 4', b'"num_classes": 7')
    assert edited != header and len(edited) == len(header)
    with pytest.raises(CompositionError):
        decode(data[:16] + edited + data[16 + hlen:])
