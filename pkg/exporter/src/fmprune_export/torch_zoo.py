"""Torch reference models for the supported architectures.

Each architecture is one declarative layer list; ``SpecNet`` materializes it
as a torch module whose names match the exported manifest one-to-one, so the
converter is a plain walk with no name heuristics. Stride-2 convolutions pad
asymmetrically (extra pixel bottom/right) to match the engine's "same"
convention; checkpoints trained with symmetric padding would fail the parity
gate rather than export silently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass
class LayerSpec:
    kind: str
    name: str
    preds: list[int]
    kernel: int = 0
    stride: int = 1
    padding: str = "same"
    c_in: int = 0
    c_out: int = 0
    bias: bool = False
    epsilon: float = 1e-5


class _Plan:
    def __init__(self):
        self.specs: list[LayerSpec] = []

    def add(self, spec: LayerSpec) -> int:
        self.specs.append(spec)
        return len(self.specs) - 1

    def conv(self, prev, c_in, c_out, k, stride=1, padding="same", bias=False, name=""):
        return self.add(LayerSpec("Conv2D", name, [prev] if prev >= 0 else [],
                                  k, stride, padding, c_in, c_out, bias))

    def depthwise(self, prev, c, k=3, stride=1, name=""):
        return self.add(LayerSpec("DepthwiseConv2D", name, [prev], k, stride, "same", c, c))

    def bn(self, prev, c, name=""):
        return self.add(LayerSpec("BatchNorm", name, [prev], c_in=c, c_out=c))

    def relu(self, prev):
        return self.add(LayerSpec("ReLU", "", [prev]))

    def dense(self, prev, n_in, n_out, name=""):
        return self.add(LayerSpec("Dense", name, [prev], c_in=n_in, c_out=n_out, bias=True))


def _vgg16_spec() -> list[LayerSpec]:
    plan = _Plan()
    prev = -1
    c_in = 3
    idx = 0
    for item in (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"):
        if item == "M":
            prev = plan.add(LayerSpec("MaxPool", "", [prev], kernel=2, stride=2, padding="valid"))
            continue
        idx += 1
        prev = plan.conv(prev, c_in, item, 3, name=f"conv{idx}")
        prev = plan.bn(prev, item, name=f"bn{idx}")
        prev = plan.relu(prev)
        c_in = item
    prev = plan.add(LayerSpec("Flatten", "", [prev]))
    plan.dense(prev, 512, 10, name="classifier")
    return plan.specs


def _resnet56_spec() -> list[LayerSpec]:
    plan = _Plan()
    prev = plan.conv(-1, 3, 16, 3, name="stem")
    prev = plan.bn(prev, 16, name="stem_bn")
    prev = plan.relu(prev)
    c_in = 16
    for stage, c_out in enumerate((16, 32, 64)):
        for block in range(9):
            stride = 2 if (stage > 0 and block == 0) else 1
            bname = f"s{stage + 1}b{block + 1}"
            x = plan.conv(prev, c_in, c_out, 3, stride=stride, name=f"{bname}_conv1")
            x = plan.bn(x, c_out, name=f"{bname}_bn1")
            x = plan.relu(x)
            x = plan.conv(x, c_out, c_out, 3, name=f"{bname}_conv2")
            x = plan.bn(x, c_out, name=f"{bname}_bn2")
            if stride != 1 or c_in != c_out:
                sc = plan.conv(prev, c_in, c_out, 1, stride=stride, name=f"{bname}_proj")
                sc = plan.bn(sc, c_out, name=f"{bname}_proj_bn")
            else:
                sc = prev
            prev = plan.add(LayerSpec("Add", f"{bname}_add", [x, sc]))
            prev = plan.relu(prev)
            c_in = c_out
    prev = plan.add(LayerSpec("AvgPool", "", [prev], kernel=8, stride=8, padding="valid"))
    prev = plan.add(LayerSpec("Flatten", "", [prev]))
    plan.dense(prev, 64, 10, name="classifier")
    return plan.specs


def _mobilenet_v2_spec() -> list[LayerSpec]:
    plan = _Plan()
    prev = plan.conv(-1, 3, 32, 3, name="stem")
    prev = plan.bn(prev, 32, name="stem_bn")
    prev = plan.relu(prev)
    c_in = 32
    bidx = 0
    for t, c_out, repeat, first_stride in (
        (1, 16, 1, 1), (6, 24, 2, 1), (6, 32, 3, 2), (6, 64, 4, 2),
        (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1),
    ):
        for r in range(repeat):
            bidx += 1
            stride = first_stride if r == 0 else 1
            bname = f"btn{bidx}"
            block_in = prev
            expanded = c_in * t
            x = block_in
            if t != 1:
                x = plan.conv(x, c_in, expanded, 1, name=f"{bname}_expand")
                x = plan.bn(x, expanded, name=f"{bname}_expand_bn")
                x = plan.relu(x)
            x = plan.depthwise(x, expanded, 3, stride=stride, name=f"{bname}_dw")
            x = plan.bn(x, expanded, name=f"{bname}_dw_bn")
            x = plan.relu(x)
            x = plan.conv(x, expanded, c_out, 1, name=f"{bname}_project")
            x = plan.bn(x, c_out, name=f"{bname}_project_bn")
            if stride == 1 and c_in == c_out:
                x = plan.add(LayerSpec("Add", f"{bname}_add", [x, block_in]))
            prev = x
            c_in = c_out
    prev = plan.conv(prev, 320, 1280, 1, name="head")
    prev = plan.bn(prev, 1280, name="head_bn")
    prev = plan.relu(prev)
    prev = plan.add(LayerSpec("AvgPool", "", [prev], kernel=4, stride=4, padding="valid"))
    prev = plan.add(LayerSpec("Flatten", "", [prev]))
    plan.dense(prev, 1280, 10, name="classifier")
    return plan.specs


def _tiny_cnn_spec() -> list[LayerSpec]:
    plan = _Plan()
    prev = plan.conv(-1, 3, 4, 3, bias=True, name="conv1")
    prev = plan.relu(prev)
    prev = plan.add(LayerSpec("Flatten", "", [prev]))
    plan.dense(prev, 4 * 32 * 32, 10, name="classifier")
    return plan.specs


ARCHITECTURES = {
    "vgg16-cifar": _vgg16_spec,
    "resnet56-cifar": _resnet56_spec,
    "mobilenet_v2-cifar": _mobilenet_v2_spec,
    "tiny-cnn": _tiny_cnn_spec,
}

INPUT_SHAPE = (3, 32, 32)


def arch_spec(architecture: str) -> list[LayerSpec]:
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}; have {sorted(ARCHITECTURES)}")
    return ARCHITECTURES[architecture]()


def _same_pad_amount(kernel: int, stride: int) -> tuple[int, str]:
    """(symmetric padding, extra) for torch; extra='asym' needs a ZeroPad2d."""
    if stride == 1:
        return (kernel - 1) // 2, "none"
    return 0, "asym" if kernel > 1 else "none"


class _PaddedConv(nn.Module):
    """Conv2d with bottom/right-heavy padding when stride and kernel demand it."""

    def __init__(self, spec: LayerSpec, depthwise: bool):
        super().__init__()
        pad, extra = (0, "none") if spec.padding == "valid" else _same_pad_amount(spec.kernel, spec.stride)
        self.pre = nn.ZeroPad2d((0, 1, 0, 1)) if extra == "asym" else None
        groups = spec.c_in if depthwise else 1
        self.conv = nn.Conv2d(
            spec.c_in, spec.c_out, spec.kernel, stride=spec.stride, padding=pad,
            bias=spec.bias, groups=groups,
        )

    def forward(self, x):
        if self.pre is not None:
            x = self.pre(x)
        return self.conv(x)


class SpecNet(nn.Module):
    """Executes a layer spec list; module names are the spec indices."""

    def __init__(self, specs: list[LayerSpec]):
        super().__init__()
        self.specs = specs
        # Registered as l<i> directly so state-dict keys mirror manifest ids.
        for i, s in enumerate(specs):
            key = f"l{i}"
            if s.kind == "Conv2D":
                self.add_module(key, _PaddedConv(s, depthwise=False))
            elif s.kind == "DepthwiseConv2D":
                self.add_module(key, _PaddedConv(s, depthwise=True))
            elif s.kind == "BatchNorm":
                self.add_module(key, nn.BatchNorm2d(s.c_in, eps=s.epsilon))
            elif s.kind == "Dense":
                self.add_module(key, nn.Linear(s.c_in, s.c_out, bias=s.bias))
            elif s.kind == "MaxPool":
                self.add_module(key, nn.MaxPool2d(s.kernel, s.stride))
            elif s.kind == "AvgPool":
                self.add_module(key, nn.AvgPool2d(s.kernel, s.stride))

    def forward(self, x):
        acts: dict[int, torch.Tensor] = {}
        pending = [0] * len(self.specs)
        for s in self.specs:
            for p in s.preds:
                pending[p] += 1
        out = x
        for i, s in enumerate(self.specs):
            ins = [acts[p] for p in s.preds] if s.preds else [x]
            key = f"l{i}"
            if s.kind in ("Conv2D", "DepthwiseConv2D", "BatchNorm", "Dense", "MaxPool", "AvgPool"):
                out = getattr(self, key)(ins[0])
            elif s.kind == "ReLU":
                out = torch.relu(ins[0])
            elif s.kind == "Add":
                out = ins[0] + ins[1]
            elif s.kind == "Flatten":
                out = torch.flatten(ins[0], 1)
            elif s.kind == "Softmax":
                out = torch.softmax(ins[0], dim=1)
            else:
                raise ValueError(f"unknown kind {s.kind!r}")
            acts[i] = out
            for p in s.preds:  # free activations no consumer still needs
                pending[p] -= 1
                if pending[p] == 0:
                    del acts[p]
        return out


# Residual-block first convs seeded with near-zero ("unimportant") filters so
# the no-retraining deletion experiment has something real to remove.
RESNET_NEAR_ZERO = {"s1b1_conv1": (1, 7), "s1b2_conv1": (3,), "s1b3_conv1": (0, 5)}


def make_fixture(architecture: str, seed: int) -> dict[str, torch.Tensor]:
    """Deterministic random checkpoint (state dict) for CI-scale experiments.

    All values come from one numpy generator, so identical (architecture,
    seed) pairs produce identical checkpoints on any platform. The ResNet-56
    fixture additionally carries a handful of near-zero filters whose BN rows
    are neutral, mirroring how dead filters look in practice.
    """
    specs = arch_spec(architecture)
    net = SpecNet(specs)
    rng = np.random.default_rng(seed)
    state = net.state_dict()
    for i, s in enumerate(specs):
        key = f"l{i}"
        if s.kind in ("Conv2D", "DepthwiseConv2D"):
            fan_in = (s.c_in if s.kind == "Conv2D" else 1) * s.kernel ** 2
            std = 0.8 * np.sqrt(2.0 / fan_in)
            w = rng.normal(0.0, std, tuple(state[f"{key}.conv.weight"].shape))
            state[f"{key}.conv.weight"] = torch.from_numpy(w.astype(np.float32))
            if s.bias:
                b = rng.normal(0.0, 0.01, s.c_out)
                state[f"{key}.conv.bias"] = torch.from_numpy(b.astype(np.float32))
        elif s.kind == "BatchNorm":
            c = s.c_in
            state[f"{key}.weight"] = torch.from_numpy((1 + 0.1 * rng.normal(size=c)).astype(np.float32))
            state[f"{key}.bias"] = torch.from_numpy((0.1 * rng.normal(size=c)).astype(np.float32))
            state[f"{key}.running_mean"] = torch.from_numpy((0.1 * rng.normal(size=c)).astype(np.float32))
            state[f"{key}.running_var"] = torch.from_numpy(np.abs(1 + 0.1 * rng.normal(size=c)).astype(np.float32))
        elif s.kind == "Dense":
            w = rng.normal(0.0, np.sqrt(1.0 / s.c_in), (s.c_out, s.c_in))
            state[f"{key}.weight"] = torch.from_numpy(w.astype(np.float32))
            state[f"{key}.bias"] = torch.zeros(s.c_out)

    if architecture == "resnet56-cifar":
        by_name = {s.name: i for i, s in enumerate(specs)}
        for conv_name, filters in RESNET_NEAR_ZERO.items():
            cid = by_name[conv_name]
            bnid = by_name[conv_name.replace("_conv1", "_bn1")]
            for j in filters:
                state[f"l{cid}.conv.weight"][j] = 1e-33
                state[f"l{bnid}.running_mean"][j] = 0.0
                state[f"l{bnid}.bias"][j] = 0.0
    return state


def save_fixture(architecture: str, seed: int, path) -> None:
    torch.save(make_fixture(architecture, seed), path)


def torch_logits(net: SpecNet, images: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Forward in eval mode, chunked to bound activation memory."""
    net.eval()
    outs = []
    with torch.no_grad():
        for lo in range(0, images.shape[0], chunk):
            batch = np.ascontiguousarray(images[lo : lo + chunk], dtype=np.float32)
            outs.append(net(torch.from_numpy(batch)).numpy())
    return np.concatenate(outs, axis=0)
