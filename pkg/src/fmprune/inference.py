"""Forward execution of the layer graph with optional activation capture.

The engine is pure: a model is never mutated, per-call scratch lives on the
stack, and concurrent forwards on one shared model are safe. Arithmetic runs
in float64 on top of the stored float32 weights so long layer chains stay
well-conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model_ir import Model


@dataclass
class FeatureMapStack:
    """One layer's full output for one image, channels-first (N, X, Y)."""

    layer_id: int
    maps: np.ndarray
    image_index: int = -1


@dataclass
class Logits:
    scores: np.ndarray
    image_index: int = -1


def _pad_amounts(size: int, kernel: int, stride: int) -> tuple[int, int]:
    # "same": total pad so out = ceil(size/stride); extra pixel goes after.
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _patches(x: np.ndarray, kernel: int, stride: int, padding: str, fill: float = 0.0):
    """(C, Ho, Wo, K, K) view of all convolution/pool windows."""
    if padding == "same":
        pt, pb = _pad_amounts(x.shape[1], kernel, stride)
        pl, pr = _pad_amounts(x.shape[2], kernel, stride)
        if pt or pb or pl or pr:
            x = np.pad(x, ((0, 0), (pt, pb), (pl, pr)), constant_values=fill)
    win = sliding_window_view(x, (kernel, kernel), axis=(1, 2))
    return win[:, ::stride, ::stride]


def _conv2d(x, layer):
    w = layer.tensors["weight"].astype(np.float64)
    n, c, k, _ = w.shape
    p = _patches(x, k, layer.stride, layer.padding)
    _, ho, wo, _, _ = p.shape
    cols = p.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * k * k)
    out = cols @ w.reshape(n, c * k * k).T
    out = out.T.reshape(n, ho, wo)
    if layer.has_bias:
        out += layer.tensors["bias"].astype(np.float64)[:, None, None]
    return out


def _depthwise2d(x, layer):
    w = layer.tensors["weight"].astype(np.float64)
    k = layer.kernel
    p = _patches(x, k, layer.stride, layer.padding)
    out = np.einsum("chwkl,ckl->chw", p, w[:, 0], optimize=True)
    if layer.has_bias:
        out += layer.tensors["bias"].astype(np.float64)[:, None, None]
    return out


def _avgpool(x, layer):
    p = _patches(x, layer.kernel, layer.stride, layer.padding)
    if layer.padding == "same":
        # Exclude zero padding from the mean: divide by the live window count.
        ones = np.ones((1,) + x.shape[1:])
        counts = _patches(ones, layer.kernel, layer.stride, "same").sum(axis=(3, 4))
        return p.sum(axis=(3, 4)) / counts
    return p.mean(axis=(3, 4))


def _maxpool(x, layer):
    p = _patches(x, layer.kernel, layer.stride, layer.padding, fill=-np.inf)
    return p.max(axis=(3, 4))


def _batchnorm(x, layer):
    t = layer.tensors
    inv = 1.0 / np.sqrt(t["var"].astype(np.float64) + layer.epsilon)
    scaled = (t["scale"].astype(np.float64) * inv)[:, None, None]
    mean = t["mean"].astype(np.float64)[:, None, None]
    shift = t["shift"].astype(np.float64)[:, None, None]
    return (x - mean) * scaled + shift


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


class Engine:
    """Reusable executor for one immutable model."""

    def __init__(self, model: Model):
        self.model = model
        self._norm = None
        if model.normalization:
            mean = np.asarray(model.normalization["mean"], dtype=np.float64)
            std = np.asarray(model.normalization["std"], dtype=np.float64)
            self._norm = (mean[:, None, None], std[:, None, None])
        self._cons = model.consumers()

    def run(
        self, x: np.ndarray, capture: int | None = None, stop_at_capture: bool = False
    ) -> tuple[np.ndarray | None, np.ndarray | None]:
        """Execute layers in topological order; returns (logits, captured)."""
        model = self.model
        if capture is not None and not (0 <= capture < len(model.layers)):
            raise ValueError(f"capture id {capture} out of range")
        x = np.asarray(x, dtype=np.float64)
        if x.shape != tuple(model.input_shape):
            raise ValueError(f"input shape {x.shape} != model input {model.input_shape}")
        if self._norm is not None:
            x = (x - self._norm[0]) / self._norm[1]

        acts: dict[int, np.ndarray] = {}
        pending = [len(self._cons[i]) for i in range(len(model.layers))]
        captured = None
        out = None
        for lid, layer in enumerate(model.layers):
            preds = model.edges[lid]
            ins = [acts[p] for p in preds] if preds else [x]
            kind = layer.kind
            if kind == "Conv2D":
                y = _conv2d(ins[0], layer)
            elif kind == "DepthwiseConv2D":
                y = _depthwise2d(ins[0], layer)
            elif kind == "BatchNorm":
                y = _batchnorm(ins[0], layer)
            elif kind == "ReLU":
                y = np.maximum(ins[0], 0.0)
            elif kind == "Add":
                y = ins[0] + ins[1]
            elif kind == "AvgPool":
                y = _avgpool(ins[0], layer)
            elif kind == "MaxPool":
                y = _maxpool(ins[0], layer)
            elif kind == "Flatten":
                y = ins[0].reshape(-1)
            elif kind == "Dense":
                w = layer.tensors["weight"].astype(np.float64)
                y = w @ ins[0]
                if layer.has_bias:
                    y = y + layer.tensors["bias"].astype(np.float64)
            elif kind == "Softmax":
                y = _softmax(ins[0])
            else:
                raise ValueError(f"unknown layer kind {kind!r}")

            if lid == capture:
                captured = y
                if stop_at_capture:
                    return None, captured
            acts[lid] = y
            out = y
            # Free activations no longer needed by any consumer.
            for p in preds:
                pending[p] -= 1
                if pending[p] == 0:
                    del acts[p]
        return out, captured


def _as_input(image) -> tuple[np.ndarray, int]:
    if hasattr(image, "pixels"):
        return image.pixels, getattr(image, "label", -1)
    return np.asarray(image), -1


def forward(model: Model, image) -> Logits:
    """Run the model on one image (LabeledImage or raw channels-first array)."""
    x, _ = _as_input(image)
    out, _ = Engine(model).run(x)
    return Logits(scores=out)


def forward_capture(model: Model, image, capture: int) -> tuple[Logits, FeatureMapStack]:
    """Forward pass returning both the logits and one intermediate activation."""
    x, _ = _as_input(image)
    out, cap = Engine(model).run(x, capture=capture)
    maps = cap if cap.ndim == 3 else cap.reshape(cap.shape[0], 1, 1)
    return Logits(scores=out), FeatureMapStack(layer_id=capture, maps=maps)


def capture_stack(engine: Engine, image, capture: int, image_index: int = -1) -> FeatureMapStack:
    """Capture one activation without finishing the forward pass."""
    x, _ = _as_input(image)
    _, cap = engine.run(x, capture=capture, stop_at_capture=True)
    maps = cap if cap.ndim == 3 else cap.reshape(cap.shape[0], 1, 1)
    return FeatureMapStack(layer_id=capture, maps=maps, image_index=image_index)


def topk_hit(scores: np.ndarray, label: int, k: int) -> bool:
    order = np.argsort(-scores, kind="stable")  # ties resolve to lower class index
    return label in order[:k]


def evaluate_accuracy(model: Model, data) -> tuple[float, float]:
    """Top-1/top-5 fractions over labeled images; ties break to the lower class."""
    if not len(data):
        raise ValueError("evaluation data is empty")
    engine = Engine(model)
    top1 = 0
    top5 = 0
    for img in data:
        x, label = _as_input(img)
        scores, _ = engine.run(x)
        if int(np.argmax(scores)) == label:
            top1 += 1
        if topk_hit(scores, label, 5):
            top5 += 1
    n = len(data)
    return top1 / n, top5 / n
