import numpy as np
import pytest

from fmprune.dataset_io import LabeledImage
from fmprune.inference import (
    Engine,
    evaluate_accuracy,
    forward,
    forward_capture,
)
from fmprune.model_ir import Layer

from conftest import chain_model, make_bn, make_conv, make_dense, random_images, small_cnn
from oracles import naive_conv2d, naive_depthwise


def conv_layer(w, stride=1, padding="valid", bias=None):
    tensors = {"weight": np.asarray(w, dtype=np.float32)}
    layer = Layer("Conv2D", kernel=w.shape[2], stride=stride, padding=padding, tensors=tensors)
    if bias is not None:
        layer.has_bias = True
        layer.tensors["bias"] = np.asarray(bias, dtype=np.float32)
    return layer


class TestConv:
    def test_identity_1x1_kernel(self):
        w = np.ones((1, 1, 1, 1), np.float32)
        model = chain_model([conv_layer(w)], input_shape=(1, 4, 4))
        x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        out = forward(model, x).scores
        np.testing.assert_array_equal(out.reshape(1, 4, 4), x)

    def test_all_ones_3x3_valid(self):
        w = np.ones((1, 1, 3, 3), np.float32)
        model = chain_model([conv_layer(w)], input_shape=(1, 3, 3))
        out = forward(model, np.ones((1, 3, 3), np.float32)).scores
        assert out.reshape(-1)[0] == 9.0

    @pytest.mark.parametrize("stride,padding", [(1, "valid"), (1, "same"), (2, "same"), (2, "valid")])
    def test_conv_matches_naive_oracle(self, rng, stride, padding):
        x = rng.random((3, 9, 9))
        w = rng.normal(size=(5, 3, 3, 3))
        bias = rng.normal(size=5)
        model = chain_model(
            [conv_layer(w, stride=stride, padding=padding, bias=bias)], input_shape=(3, 9, 9)
        )
        got = forward(model, x.astype(np.float32)).scores
        want = naive_conv2d(x.astype(np.float32), w.astype(np.float32), bias.astype(np.float32), stride, padding)
        np.testing.assert_allclose(got, want, rtol=1e-5)

    def test_two_layer_model_matches_oracle(self, rng):
        model = chain_model(
            [
                make_conv(rng, 3, 4, stride=2, padding="same", bias=True),
                make_conv(rng, 4, 6, padding="valid", bias=True),
            ],
            input_shape=(3, 9, 9),
        )
        x = rng.random((3, 9, 9)).astype(np.float32)
        got = forward(model, x).scores
        l0, l1 = model.layers
        mid = naive_conv2d(x, l0.tensors["weight"], l0.tensors["bias"], 2, "same")
        want = naive_conv2d(mid, l1.tensors["weight"], l1.tensors["bias"], 1, "valid")
        np.testing.assert_allclose(got, want, rtol=1e-5)

    def test_depthwise_matches_oracle(self, rng):
        w = rng.normal(size=(4, 1, 3, 3)).astype(np.float32)
        layer = Layer("DepthwiseConv2D", kernel=3, stride=2, padding="same", tensors={"weight": w})
        model = chain_model([layer], input_shape=(4, 7, 7))
        x = rng.random((4, 7, 7)).astype(np.float32)
        got = forward(model, x).scores
        np.testing.assert_allclose(got, naive_depthwise(x, w, 2, "same"), rtol=1e-5)

    def test_linearity_without_bias(self, rng):
        model = chain_model([make_conv(rng, 3, 4)], input_shape=(3, 8, 8))
        x = rng.random((3, 8, 8)).astype(np.float32)
        base = forward(model, x).scores
        scaled = forward(model, (3.5 * x).astype(np.float32)).scores
        np.testing.assert_allclose(scaled, 3.5 * base, rtol=1e-5)

    def test_depthwise_channel_independence(self, rng):
        w = rng.normal(size=(3, 1, 3, 3)).astype(np.float32)
        layer = Layer("DepthwiseConv2D", kernel=3, tensors={"weight": w})
        model = chain_model([layer], input_shape=(3, 6, 6))
        x = rng.random((3, 6, 6)).astype(np.float32)
        base = forward(model, x).scores
        x2 = x.copy()
        x2[1] += 1.0
        bumped = forward(model, x2).scores
        np.testing.assert_array_equal(base[0], bumped[0])
        np.testing.assert_array_equal(base[2], bumped[2])
        assert np.any(base[1] != bumped[1])

    def test_same_padding_preserves_extent_odd_kernel(self, rng):
        for k in (1, 3, 5):
            w = rng.normal(size=(2, 3, k, k)).astype(np.float32)
            model = chain_model(
                [Layer("Conv2D", kernel=k, padding="same", tensors={"weight": w})],
                input_shape=(3, 11, 11),
            )
            assert forward(model, rng.random((3, 11, 11)).astype(np.float32)).scores.shape == (2, 11, 11)

    def test_input_shape_mismatch(self, rng):
        model = small_cnn(seed=0)
        with pytest.raises(ValueError, match="input shape"):
            forward(model, np.zeros((3, 9, 9), np.float32))

    def test_manifest_normalization_applied_at_input(self, rng):
        w = np.ones((1, 3, 1, 1), np.float32)  # 1x1 conv summing channels
        model = chain_model([conv_layer(w)], input_shape=(3, 2, 2))
        model.normalization = {"mean": [0.5, 0.5, 0.5], "std": [0.25, 0.5, 1.0]}
        x = rng.random((3, 2, 2)).astype(np.float32)
        got = forward(model, x).scores
        xn = (x.astype(np.float64) - 0.5) / np.array([0.25, 0.5, 1.0])[:, None, None]
        np.testing.assert_allclose(got[0], xn.sum(axis=0), rtol=1e-12)


class TestBatchNormAndPooling:
    def test_batchnorm_formula(self, rng):
        bn = make_bn(rng, 3, epsilon=1e-3)
        model = chain_model([bn], input_shape=(3, 4, 4))
        x = rng.random((3, 4, 4)).astype(np.float32)
        got = forward(model, x).scores
        t = bn.tensors
        want = (
            (x.astype(np.float64) - t["mean"].astype(np.float64)[:, None, None])
            / np.sqrt(t["var"].astype(np.float64)[:, None, None] + 1e-3)
            * t["scale"].astype(np.float64)[:, None, None]
            + t["shift"].astype(np.float64)[:, None, None]
        )
        np.testing.assert_allclose(got, want, rtol=1e-6)

    def test_batchnorm_uses_manifest_epsilon(self, rng):
        x = np.ones((1, 1, 1), np.float32)
        for eps in (1e-3, 1e-5):
            bn = Layer(
                "BatchNorm",
                epsilon=eps,
                tensors={
                    "scale": np.ones(1, np.float32),
                    "shift": np.zeros(1, np.float32),
                    "mean": np.zeros(1, np.float32),
                    "var": np.zeros(1, np.float32),
                },
            )
            got = forward(chain_model([bn], input_shape=(1, 1, 1)), x).scores
            np.testing.assert_allclose(got, 1.0 / np.sqrt(eps), rtol=1e-9)

    def test_maxpool(self):
        model = chain_model([Layer("MaxPool", kernel=2, stride=2, padding="valid")], input_shape=(1, 4, 4))
        x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        out = forward(model, x).scores
        np.testing.assert_array_equal(out, np.array([[[5, 7], [13, 15]]], np.float32))

    def test_avgpool(self):
        model = chain_model([Layer("AvgPool", kernel=2, stride=2, padding="valid")], input_shape=(1, 4, 4))
        x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        out = forward(model, x).scores
        np.testing.assert_allclose(out, np.array([[[2.5, 4.5], [10.5, 12.5]]]))

    def test_softmax_normalizes(self, rng):
        model = chain_model(
            [Layer("Flatten"), make_dense(rng, 12, 4), Layer("Softmax")], input_shape=(3, 2, 2)
        )
        out = forward(model, rng.random((3, 2, 2)).astype(np.float32)).scores
        assert out.shape == (4,)
        np.testing.assert_allclose(out.sum(), 1.0, rtol=1e-12)


class TestCapture:
    def test_capture_is_transparent(self, rng):
        model = small_cnn(seed=6)
        x = rng.random((3, 8, 8)).astype(np.float32)
        plain = forward(model, x).scores
        for lid in range(len(model.layers)):
            logits, stack = forward_capture(model, x, lid)
            np.testing.assert_array_equal(logits.scores, plain)

    def test_capture_after_final_layer_reshapes_to_logits(self, rng):
        model = small_cnn(seed=6)
        x = rng.random((3, 8, 8)).astype(np.float32)
        logits, stack = forward_capture(model, x, len(model.layers) - 1)
        np.testing.assert_array_equal(stack.maps.reshape(-1), logits.scores)

    def test_capture_after_relu_nonnegative(self, rng):
        model = small_cnn(seed=6)
        x = rng.random((3, 8, 8)).astype(np.float32)
        _, stack = forward_capture(model, x, 2)  # conv -> bn -> relu
        assert np.all(stack.maps >= 0)

    def test_capture_equals_consumed_activation(self, rng):
        # The captured tensor must be bitwise what the next layer consumed:
        # re-running from the capture must reproduce downstream exactly.
        model = small_cnn(seed=8)
        x = rng.random((3, 8, 8)).astype(np.float32)
        _, before_pool = forward_capture(model, x, 4)
        _, after_pool = forward_capture(model, x, 5)
        tail = chain_model([model.layers[5]], input_shape=before_pool.maps.shape)
        redo = Engine(tail).run(before_pool.maps)[0]
        np.testing.assert_array_equal(redo, after_pool.maps)

    def test_duplicate_filters_give_identical_maps(self, rng):
        model = chain_model([make_conv(rng, 3, 6, bias=True)], input_shape=(3, 8, 8))
        w = model.layers[0].tensors["weight"]
        w[4] = w[1]
        model.layers[0].tensors["bias"][4] = model.layers[0].tensors["bias"][1]
        _, stack = forward_capture(model, rng.random((3, 8, 8)).astype(np.float32), 0)
        np.testing.assert_array_equal(stack.maps[1], stack.maps[4])

    def test_invalid_capture_id(self, rng):
        model = small_cnn(seed=0)
        with pytest.raises(ValueError, match="capture"):
            forward_capture(model, np.zeros((3, 8, 8), np.float32), 99)


def one_hot_probe_model():
    """Reads the input vector straight through: logits = flattened pixels."""
    w = np.eye(10, dtype=np.float32)
    dense = Layer("Dense", has_bias=False, tensors={"weight": w})
    return chain_model([Layer("Flatten"), dense], input_shape=(10, 1, 1))


class TestAccuracy:
    def test_oracle_stub_is_perfect(self):
        model = one_hot_probe_model()
        data = []
        for label in range(10):
            pixels = np.zeros((10, 1, 1), np.float32)
            pixels[label] = 1.0
            data.append(LabeledImage(pixels=pixels, label=label))
        assert evaluate_accuracy(model, data) == (1.0, 1.0)

    def test_uniform_logits_tie_break_to_class_zero(self):
        model = one_hot_probe_model()
        data = [LabeledImage(pixels=np.ones((10, 1, 1), np.float32), label=0) for _ in range(4)]
        top1, top5 = evaluate_accuracy(model, data)
        assert top1 == 1.0
        # Ties resolve low-index first, so labels 5..9 are outside the top 5.
        data9 = [LabeledImage(pixels=np.ones((10, 1, 1), np.float32), label=9)]
        assert evaluate_accuracy(model, data9) == (0.0, 0.0)

    def test_matches_independent_argmax_check(self):
        model = small_cnn(seed=11)
        data = random_images(200, seed=12)
        top1, top5 = evaluate_accuracy(model, data)
        hits1 = 0
        hits5 = 0
        for img in data:
            scores = forward(model, img).scores
            order = sorted(range(10), key=lambda c: (-scores[c], c))
            hits1 += order[0] == img.label
            hits5 += img.label in order[:5]
        assert top1 == hits1 / 200 and top5 == hits5 / 200

    def test_empty_data_rejected(self):
        with pytest.raises(ValueError):
            evaluate_accuracy(small_cnn(seed=0), [])
