import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_cnn, random_mlp
from mtzip.model import (
    MAGIC,
    ConvSpec,
    Layer,
    ModelFormatError,
    Network,
    ZippedModel,
    forward,
    infer_task,
    load_model,
    model_from_bytes,
    model_to_bytes,
    predict,
    save_model,
    zip_without_sharing,
)
from mtzip.trainer import lenet, residual_mlp


def naive_forward(net, x):
    """Loop-based dense forward pass used as an oracle."""
    h = list(x)
    for layer in net.layers:
        w, b = layer.weights, layer.bias
        out = []
        for j in range(w.shape[1]):
            s = b[j]
            for i in range(w.shape[0]):
                s += h[i] * w[i, j]
            out.append(max(s, 0.0) if layer.activation == "relu" else s)
        h = out
    return np.array(h)


# forward


def test_forward_identity_relu():
    net = Network([Layer("dense", np.eye(2), np.zeros(2), "relu")], 2)
    res = forward(net, [1.0, -1.0])
    np.testing.assert_array_equal(res.pre_activations[0], [1.0, -1.0])
    np.testing.assert_array_equal(res.activations[1], [1.0, 0.0])
    np.testing.assert_array_equal(res.output, [1.0, -1.0])


def test_forward_zero_weights_gives_bias():
    layers = [
        Layer("dense", np.zeros((3, 4)), np.zeros(4)),
        Layer("dense", np.zeros((4, 2)), np.array([0.5, -2.0]), "none"),
    ]
    out = forward(Network(layers, 3), np.array([[1.0, 2.0, 3.0], [-1.0, 0.0, 9.0]])).output
    np.testing.assert_array_equal(out, [[0.5, -2.0], [0.5, -2.0]])


def test_forward_matches_naive():
    rng = np.random.default_rng(0)
    net = random_mlp(rng, [5, 7, 3])
    for x in rng.normal(size=(10, 5)):
        np.testing.assert_allclose(forward(net, x).output, naive_forward(net, x), rtol=1e-12, atol=1e-12)


def test_conv_forward_matches_direct_convolution():
    rng = np.random.default_rng(1)
    spec = ConvSpec(2, 6, 5, 3, padding=1)
    w = rng.normal(size=(2 * 9, 4))
    b = rng.normal(size=4)
    layer = Layer("conv", w, b, "none", conv=spec)
    net = Network([layer, Layer("dense", np.eye(4 * 30), np.zeros(4 * 30), "none", in_group=30)], 60)
    x = rng.normal(size=(2, 60))
    y = forward(net, x).pre_activations[0].reshape(2, 4, 6, 5)
    img = np.pad(x.reshape(2, 2, 6, 5), ((0, 0), (0, 0), (1, 1), (1, 1)))
    kern = w.reshape(2, 3, 3, 4)  # rows ordered (channel, kernel row, kernel col)
    ref = np.zeros((2, 4, 6, 5))
    for n in range(2):
        for o in range(4):
            for r in range(6):
                for c in range(5):
                    ref[n, o, r, c] = np.sum(img[n, :, r : r + 3, c : c + 3] * kern[..., o]) + b[o]
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_forward_rejects_bad_input():
    net = random_mlp(np.random.default_rng(2), [3, 2])
    with pytest.raises(ValueError):
        forward(net, np.ones(4))
    with pytest.raises(ValueError):
        forward(net, [np.nan, 0.0, 0.0])


def test_forward_non_finite_intermediate():
    layers = [Layer("dense", np.full((2, 2), 1e308), np.zeros(2)), Layer("dense", np.full((2, 1), 1e308), np.zeros(1), "none")]
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(FloatingPointError):
        forward(Network(layers, 2), [1e10, 1e10])


def test_network_checks_dimensions():
    with pytest.raises(ValueError):
        Network([Layer("dense", np.zeros((3, 2)), np.zeros(2)), Layer("dense", np.zeros((3, 1)), np.zeros(1))], 3)


def test_mask_requires_zero_weights():
    with pytest.raises(ValueError):
        Layer("dense", np.ones((2, 2)), np.zeros(2), mask=np.eye(2))
    layer = Layer("dense", np.eye(2), np.zeros(2), mask=np.eye(2))
    assert layer.parameter_count() == 2 + 2


def test_residual_forward():
    net = residual_mlp(4, 6, 3, 1, 2, seed=0)
    x = np.random.default_rng(3).normal(size=(5, 4))
    stem, entry, exit_, head = net.layers
    h0 = np.maximum(x @ stem.weights + stem.bias, 0)
    h1 = np.maximum(h0 @ entry.weights + entry.bias, 0)
    h2 = np.maximum(h1 @ exit_.weights + exit_.bias + h0, 0)
    np.testing.assert_allclose(forward(net, x).output, h2 @ head.weights + head.bias, rtol=1e-12)


# joint model


def test_zero_sharing_reproduces_originals_exactly():
    rng = np.random.default_rng(4)
    a, b = random_mlp(rng, [6, 5, 4, 3], "a"), random_mlp(rng, [6, 7, 2, 3], "b")
    zm = zip_without_sharing([a, b])
    x = rng.normal(size=(20, 6))
    assert np.array_equal(infer_task(zm, "a", x), forward(a, x).output)
    assert np.array_equal(infer_task(zm, "b", x), forward(b, x).output)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(1, 6), min_size=1, max_size=3))
def test_zero_sharing_property(seed, hidden):
    rng = np.random.default_rng(seed)
    a = random_mlp(rng, [4, *hidden, 3], "a")
    b = random_mlp(rng, [4, *[h + 1 for h in hidden], 3], "b")
    c = random_mlp(rng, [4, *hidden, 2], "c")
    zm = zip_without_sharing([a, b, c])
    x = rng.normal(size=(10, 4))
    for net in (a, b, c):
        assert np.array_equal(infer_task(zm, net.task_id, x), forward(net, x).output)


def test_zero_sharing_cnn_and_residual():
    rng = np.random.default_rng(5)
    a, b = random_cnn(rng, "a"), random_cnn(rng, "b")
    zm = zip_without_sharing([a, b])
    x = rng.random((6, 64))
    for net in (a, b):
        assert np.array_equal(infer_task(zm, net.task_id, x), forward(net, x).output)
    ra, rb = residual_mlp(5, 6, 4, 2, 3, 0, "a"), residual_mlp(5, 6, 4, 2, 3, 1, "b")
    zm = zip_without_sharing([ra, rb])
    x = rng.normal(size=(6, 5))
    for net in (ra, rb):
        assert np.array_equal(infer_task(zm, net.task_id, x), forward(net, x).output)


def test_unequal_input_dims_use_fictive_zero_connections():
    rng = np.random.default_rng(6)
    a, b = random_mlp(rng, [4, 3, 2], "a"), random_mlp(rng, [6, 3, 2], "b")
    zm = zip_without_sharing([a, b])
    assert zm.layers[0].weights.shape[0] == 6
    np.testing.assert_array_equal(zm.layers[0].weights[4:, :3], 0.0)
    x = rng.normal(size=(3, 4))
    assert np.array_equal(infer_task(zm, "a", x), forward(a, x).output)


def test_other_task_blocks_do_not_affect_output():
    rng = np.random.default_rng(7)
    a, b = random_mlp(rng, [4, 5, 3, 2], "a"), random_mlp(rng, [4, 5, 3, 2], "b")
    zm = zip_without_sharing([a, b])
    x = rng.normal(size=(8, 4))
    before = infer_task(zm, "a", x)
    for k in range(zm.depth):
        cols = zm.members[k][:, 1] & ~zm.members[k][:, 0]
        zm.layers[k].weights[:, cols] += rng.normal(size=(zm.layers[k].weights.shape[0], int(cols.sum())))
        zm.layers[k].bias[cols] += 1.0
    assert np.array_equal(infer_task(zm, "a", x), before)


def test_infer_task_pure_and_unknown_task():
    rng = np.random.default_rng(8)
    zm = zip_without_sharing([random_mlp(rng, [3, 4, 2], "a"), random_mlp(rng, [3, 4, 2], "b")])
    x = rng.normal(size=(4, 3))
    assert np.array_equal(infer_task(zm, "a", x), infer_task(zm, "a", x))
    with pytest.raises(KeyError):
        infer_task(zm, "zzz", x)


def test_shared_layer_blocks_without_sharing():
    rng = np.random.default_rng(9)
    a, b = random_mlp(rng, [4, 5, 3, 2], "a"), random_mlp(rng, [4, 6, 3, 2], "b")
    zm = zip_without_sharing([a, b])
    v = zm.shared_layer(1)
    assert (v.shared_count, v.specific_a, v.specific_b) == (0, 3, 3)
    assert v.w_hat_a.shape == (5, 3) and v.w_hat_b.shape == (6, 3)
    assert v.w_tilde.shape == (0, 0)
    np.testing.assert_array_equal(v.w_hat_a, a.layers[1].weights)
    np.testing.assert_array_equal(v.w_hat_b, b.layers[1].weights)
    assert len(zm.task_heads) == 2 and len(zm.shared_layers) == 2


# serialization


def test_network_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    net = random_mlp(rng, [5, 4, 3], "digits")
    net.layers[0].mask = rng.random(net.layers[0].weights.shape) < 0.5
    net.layers[0].weights *= net.layers[0].mask
    save_model(net, tmp_path / "n.mtz")
    back = load_model(tmp_path / "n.mtz")
    assert back.task_id == "digits" and back.input_dim == 5
    for la, lb in zip(net.layers, back.layers):
        assert la.kind == lb.kind and la.activation == lb.activation
        assert np.array_equal(la.weights, lb.weights) and np.array_equal(la.bias, lb.bias)
    assert np.array_equal(back.layers[0].mask, net.layers[0].mask)
    assert back.layers[1].mask is None


def test_cnn_and_residual_roundtrip():
    rng = np.random.default_rng(11)
    for net in (random_cnn(rng), lenet((1, 12, 12), channels=(2, 3), hidden=(4,), n_out=3, kernel=3), residual_mlp(4, 5, 3, 2, 2)):
        back = model_from_bytes(model_to_bytes(net))
        x = rng.random((3, net.input_dim))
        assert np.array_equal(predict(back, x), predict(net, x))
        assert model_to_bytes(back) == model_to_bytes(net)


def test_zipped_roundtrip_preserves_outputs(tmp_path):
    rng = np.random.default_rng(12)
    a, b = residual_mlp(4, 5, 3, 1, 2, 0, "a"), residual_mlp(4, 5, 3, 1, 2, 1, "b")
    zm = zip_without_sharing([a, b])
    save_model(zm, tmp_path / "z.mtz")
    back = load_model(tmp_path / "z.mtz")
    assert isinstance(back, ZippedModel) and back.tasks == ["a", "b"]
    x = rng.normal(size=(5, 4))
    for t in ("a", "b"):
        assert np.array_equal(infer_task(back, t, x), infer_task(zm, t, x))


def test_corrupted_files_rejected():
    blob = model_to_bytes(random_mlp(np.random.default_rng(13), [3, 2]))
    with pytest.raises(ModelFormatError, match="magic"):
        model_from_bytes(b"XX" + blob[2:])
    with pytest.raises(ModelFormatError):
        model_from_bytes(blob[:-5])
    with pytest.raises(ModelFormatError):
        model_from_bytes(blob[:20])
    flipped = bytearray(blob)
    flipped[len(MAGIC) + 40] ^= 0xFF
    with pytest.raises(ModelFormatError, match="checksum"):
        model_from_bytes(bytes(flipped))


def test_version_mismatch_rejected():
    blob = model_to_bytes(random_mlp(np.random.default_rng(14), [3, 2]))
    body = bytearray(blob[:-32])
    body[len(MAGIC) : len(MAGIC) + 4] = struct.pack("<I", 99)
    forged = bytes(body) + hashlib.sha256(bytes(body)).digest()
    with pytest.raises(ModelFormatError, match="version"):
        model_from_bytes(forged)
