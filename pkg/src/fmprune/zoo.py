"""Deterministic CIFAR-sized architecture fixtures with seeded random weights.

These builders exist so structural experiments, schedules, and tests run
without downloading anything: the graphs match the standard CIFAR adaptations
of each architecture, and every tensor comes from one seeded generator, so a
(builder, seed) pair always produces the same model. Weight scales are chosen
so activations stay well-behaved through deep stacks; nothing here is trained.
"""

from __future__ import annotations

import numpy as np

from .model_ir import Layer, Model

# VGG-16 conv plan: channel count or 'M' for 2x2/2 max pooling.
VGG16_PLAN = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]

# MobileNet-V2 CIFAR bottleneck plan: (expansion t, out channels, repeat, first stride).
MOBILENET_V2_PLAN = [
    (1, 16, 1, 1),
    (6, 24, 2, 1),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
]


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []
        self.edges: list[list[int]] = []

    def add(self, layer: Layer, preds: list[int]) -> int:
        self.layers.append(layer)
        self.edges.append(list(preds))
        return len(self.layers) - 1

    def conv(self, prev: int, c_in: int, c_out: int, k: int, stride: int = 1,
             padding: str = "same", bias: bool = False, name: str = "", gain: float = 1.0) -> int:
        std = gain * np.sqrt(2.0 / (c_in * k * k))
        w = (self.rng.normal(0.0, std, (c_out, c_in, k, k))).astype(np.float32)
        tensors = {"weight": w}
        if bias:
            tensors["bias"] = (self.rng.normal(0.0, 0.01, c_out)).astype(np.float32)
        layer = Layer("Conv2D", name=name, kernel=k, stride=stride, padding=padding,
                      has_bias=bias, tensors=tensors)
        return self.add(layer, [prev] if prev >= 0 else [])

    def depthwise(self, prev: int, c: int, k: int, stride: int = 1, name: str = "") -> int:
        std = np.sqrt(2.0 / (k * k))
        w = (self.rng.normal(0.0, std, (c, 1, k, k))).astype(np.float32)
        layer = Layer("DepthwiseConv2D", name=name, kernel=k, stride=stride,
                      padding="same", tensors={"weight": w})
        return self.add(layer, [prev])

    def bn(self, prev: int, c: int, name: str = "") -> int:
        tensors = {
            "scale": (1.0 + 0.1 * self.rng.normal(size=c)).astype(np.float32),
            "shift": (0.1 * self.rng.normal(size=c)).astype(np.float32),
            "mean": (0.1 * self.rng.normal(size=c)).astype(np.float32),
            "var": (np.abs(1.0 + 0.1 * self.rng.normal(size=c))).astype(np.float32),
        }
        return self.add(Layer("BatchNorm", name=name, epsilon=1e-3, tensors=tensors), [prev])

    def relu(self, prev: int) -> int:
        return self.add(Layer("ReLU"), [prev])

    def dense(self, prev: int, n_in: int, n_out: int, name: str = "") -> int:
        std = np.sqrt(1.0 / n_in)
        tensors = {
            "weight": (self.rng.normal(0.0, std, (n_out, n_in))).astype(np.float32),
            "bias": np.zeros(n_out, dtype=np.float32),
        }
        return self.add(Layer("Dense", name=name, has_bias=True, tensors=tensors), [prev])

    def finish(self, name: str, input_shape, class_count: int, notes: str = "") -> Model:
        return Model(layers=self.layers, edges=self.edges, name=name,
                     input_shape=tuple(input_shape), class_count=class_count, notes=notes)


def build_vgg16(seed: int = 0, class_count: int = 10) -> Model:
    """VGG-16 with BN for 32x32 inputs; classifier is a single 512-way Dense."""
    b = _Builder(seed)
    prev = -1
    c_in = 3
    idx = 0
    for item in VGG16_PLAN:
        if item == "M":
            prev = b.add(Layer("MaxPool", kernel=2, stride=2, padding="valid"), [prev])
            continue
        idx += 1
        prev = b.conv(prev, c_in, item, 3, name=f"conv{idx}")
        prev = b.bn(prev, item, name=f"bn{idx}")
        prev = b.relu(prev)
        c_in = item
    prev = b.add(Layer("Flatten"), [prev])
    b.dense(prev, 512, class_count, name="classifier")
    return b.finish(
        "vgg16-cifar", (3, 32, 32), class_count,
        notes="CIFAR adaptation: single 512->classes Dense head",
    )


def build_resnet56(seed: int = 0, class_count: int = 10) -> Model:
    """Three stages of nine residual blocks at 16/32/64 channels.

    Stage transitions use a 1x1 projection conv on the shortcut so both Add
    operands always share a shape. Only the first conv of each block has
    channels that never reach an Add, which is what makes it prunable.
    """
    b = _Builder(seed)
    gain = 0.8  # keeps activations from growing across 27 residual adds
    prev = b.conv(-1, 3, 16, 3, name="stem")
    prev = b.bn(prev, 16, name="stem_bn")
    prev = b.relu(prev)
    c_in = 16
    for stage, c_out in enumerate((16, 32, 64)):
        for block in range(9):
            stride = 2 if (stage > 0 and block == 0) else 1
            bname = f"s{stage + 1}b{block + 1}"
            x = b.conv(prev, c_in, c_out, 3, stride=stride, name=f"{bname}_conv1", gain=gain)
            x = b.bn(x, c_out, name=f"{bname}_bn1")
            x = b.relu(x)
            x = b.conv(x, c_out, c_out, 3, name=f"{bname}_conv2", gain=gain)
            x = b.bn(x, c_out, name=f"{bname}_bn2")
            if stride != 1 or c_in != c_out:
                sc = b.conv(prev, c_in, c_out, 1, stride=stride, name=f"{bname}_proj", gain=gain)
                sc = b.bn(sc, c_out, name=f"{bname}_proj_bn")
            else:
                sc = prev
            prev = b.add(Layer("Add", name=f"{bname}_add"), [x, sc])
            prev = b.relu(prev)
            c_in = c_out
    prev = b.add(Layer("AvgPool", kernel=8, stride=8, padding="valid"), [prev])
    prev = b.add(Layer("Flatten"), [prev])
    b.dense(prev, 64, class_count, name="classifier")
    return b.finish("resnet56-cifar", (3, 32, 32), class_count)


def build_mobilenet_v2(seed: int = 0, class_count: int = 10) -> Model:
    """Inverted-residual MobileNet-V2 adapted to 32x32 inputs (stride-1 stem)."""
    b = _Builder(seed)
    prev = b.conv(-1, 3, 32, 3, name="stem")
    prev = b.bn(prev, 32, name="stem_bn")
    prev = b.relu(prev)
    c_in = 32
    bidx = 0
    for t, c_out, repeat, first_stride in MOBILENET_V2_PLAN:
        for r in range(repeat):
            bidx += 1
            stride = first_stride if r == 0 else 1
            bname = f"btn{bidx}"
            block_in = prev
            expanded = c_in * t
            x = block_in
            if t != 1:
                x = b.conv(x, c_in, expanded, 1, name=f"{bname}_expand")
                x = b.bn(x, expanded, name=f"{bname}_expand_bn")
                x = b.relu(x)
            x = b.depthwise(x, expanded, 3, stride=stride, name=f"{bname}_dw")
            x = b.bn(x, expanded, name=f"{bname}_dw_bn")
            x = b.relu(x)
            x = b.conv(x, expanded, c_out, 1, name=f"{bname}_project", gain=0.8)
            x = b.bn(x, c_out, name=f"{bname}_project_bn")
            if stride == 1 and c_in == c_out:
                x = b.add(Layer("Add", name=f"{bname}_add"), [x, block_in])
            prev = x
            c_in = c_out
    prev = b.conv(prev, 320, 1280, 1, name="head")
    prev = b.bn(prev, 1280, name="head_bn")
    prev = b.relu(prev)
    prev = b.add(Layer("AvgPool", kernel=4, stride=4, padding="valid"), [prev])
    prev = b.add(Layer("Flatten"), [prev])
    b.dense(prev, 1280, class_count, name="classifier")
    return b.finish("mobilenet_v2-cifar", (3, 32, 32), class_count)


BUILDERS = {
    "vgg16-cifar": build_vgg16,
    "resnet56-cifar": build_resnet56,
    "mobilenet_v2-cifar": build_mobilenet_v2,
}


def build(architecture: str, seed: int = 0, class_count: int = 10) -> Model:
    if architecture not in BUILDERS:
        raise ValueError(f"unknown architecture {architecture!r}; have {sorted(BUILDERS)}")
    return BUILDERS[architecture](seed=seed, class_count=class_count)


def synthetic_images(count: int, seed: int, shape=(3, 32, 32), classes: int = 10):
    """Seeded stand-in probe/eval images in [0,1] with uniform random labels."""
    from .dataset_io import LabeledImage

    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        pixels = rng.random(shape, dtype=np.float64).astype(np.float32)
        out.append(LabeledImage(pixels=pixels, label=int(rng.integers(0, classes))))
    return out
