import numpy as np
import pytest

from fmprune.dataset_io import LabeledImage
from fmprune.model_ir import Layer, Model


def make_conv(rng, c_in, c_out, k=3, stride=1, padding="same", bias=False, std=None):
    if std is None:
        std = np.sqrt(2.0 / (c_in * k * k))
    tensors = {"weight": rng.normal(0, std, (c_out, c_in, k, k)).astype(np.float32)}
    if bias:
        tensors["bias"] = rng.normal(0, 0.05, c_out).astype(np.float32)
    return Layer("Conv2D", kernel=k, stride=stride, padding=padding, has_bias=bias, tensors=tensors)


def make_bn(rng, c, epsilon=1e-3):
    return Layer(
        "BatchNorm",
        epsilon=epsilon,
        tensors={
            "scale": (1 + 0.1 * rng.normal(size=c)).astype(np.float32),
            "shift": (0.1 * rng.normal(size=c)).astype(np.float32),
            "mean": (0.1 * rng.normal(size=c)).astype(np.float32),
            "var": np.abs(1 + 0.1 * rng.normal(size=c)).astype(np.float32),
        },
    )


def make_dense(rng, n_in, n_out, bias=True):
    tensors = {"weight": rng.normal(0, np.sqrt(1.0 / n_in), (n_out, n_in)).astype(np.float32)}
    if bias:
        tensors["bias"] = rng.normal(0, 0.05, n_out).astype(np.float32)
    return Layer("Dense", has_bias=bias, tensors=tensors)


def chain_model(layers, input_shape=(3, 8, 8), class_count=10, name="test-model"):
    """Wire layers in a straight line; layer i consumes layer i-1."""
    edges = [[] if i == 0 else [i - 1] for i in range(len(layers))]
    return Model(layers=layers, edges=edges, name=name, input_shape=input_shape, class_count=class_count)


def small_cnn(seed=0, c1=6, c2=8, input_shape=(3, 8, 8), class_count=10, bias=False):
    """Conv+BN+ReLU -> Conv+ReLU -> MaxPool -> Flatten -> Dense."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    layers = [
        make_conv(rng, c, c1, bias=bias),
        make_bn(rng, c1),
        Layer("ReLU"),
        make_conv(rng, c1, c2, bias=bias),
        Layer("ReLU"),
        Layer("MaxPool", kernel=2, stride=2, padding="valid"),
        Layer("Flatten"),
        make_dense(rng, c2 * (h // 2) * (w // 2), class_count),
    ]
    return chain_model(layers, input_shape=input_shape, class_count=class_count)


def random_images(count, seed, shape=(3, 8, 8), classes=10):
    rng = np.random.default_rng(seed)
    return [
        LabeledImage(
            pixels=rng.random(shape, dtype=np.float64).astype(np.float32),
            label=int(rng.integers(0, classes)),
        )
        for _ in range(count)
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
