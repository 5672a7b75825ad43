"""Checkpoint conversion into the engine's model directory format.

The converter owns every layout and semantics decision (tensor ordering, BN
epsilon, padding emulation, normalization constants) so the consuming engine
stays convention-free. Every export runs an activation parity gate: the
written model is loaded back through the engine and compared against the
source network on a batch of fixture images, and any disagreement beyond
tolerance aborts the export loudly instead of leaving a silently wrong model
on disk.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from fmprune.inference import Engine
from fmprune.model_ir import load_model

from .torch_zoo import INPUT_SHAPE, LayerSpec, SpecNet, arch_spec, torch_logits

FORMAT_TAG = "fmprune-model/1"
PARITY_TOLERANCE = 1e-3
PARITY_IMAGES = 16


class ExportError(Exception):
    """Checkpoint does not map cleanly onto the requested architecture."""


class ParityError(ExportError):
    """Exported model disagrees with the source network beyond tolerance."""


def _tensor_entries(spec: LayerSpec, key: str, state: dict) -> dict[str, np.ndarray]:
    def grab(name: str, expect: tuple) -> np.ndarray:
        full = f"{key}.{name}"
        if full not in state:
            raise ExportError(f"checkpoint is missing tensor {full!r} for layer {spec.name or spec.kind}")
        arr = state[full].detach().cpu().contiguous().numpy().astype(np.float32)
        if tuple(arr.shape) != expect:
            raise ExportError(
                f"tensor {full!r} has shape {tuple(arr.shape)}, layer {spec.name or spec.kind} requires {expect}"
            )
        return arr

    if spec.kind == "Conv2D":
        out = {"weight": grab("conv.weight", (spec.c_out, spec.c_in, spec.kernel, spec.kernel))}
        if spec.bias:
            out["bias"] = grab("conv.bias", (spec.c_out,))
        return out
    if spec.kind == "DepthwiseConv2D":
        return {"weight": grab("conv.weight", (spec.c_in, 1, spec.kernel, spec.kernel))}
    if spec.kind == "BatchNorm":
        return {
            "scale": grab("weight", (spec.c_in,)),
            "shift": grab("bias", (spec.c_in,)),
            "mean": grab("running_mean", (spec.c_in,)),
            "var": grab("running_var", (spec.c_in,)),
        }
    if spec.kind == "Dense":
        out = {"weight": grab("weight", (spec.c_out, spec.c_in))}
        if spec.bias:
            out["bias"] = grab("bias", (spec.c_out,))
        return out
    return {}


def write_model_dir(
    specs: list[LayerSpec],
    state: dict,
    out_path: str | Path,
    name: str,
    class_count: int = 10,
    normalization: dict | None = None,
) -> None:
    """Emit ``manifest`` + ``tensors/`` exactly as the engine's format defines."""
    root = Path(out_path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for lid, spec in enumerate(specs):
        entry: dict = {"id": lid, "kind": spec.kind, "preds": list(spec.preds)}
        if spec.name:
            entry["name"] = spec.name
        if spec.kind in ("Conv2D", "DepthwiseConv2D", "AvgPool", "MaxPool"):
            entry.update(kernel=spec.kernel, stride=spec.stride, padding=spec.padding)
        if spec.kind in ("Conv2D", "DepthwiseConv2D", "Dense"):
            entry["bias"] = spec.bias
        if spec.kind == "BatchNorm":
            entry["epsilon"] = spec.epsilon
        tensors = _tensor_entries(spec, f"l{lid}", state)
        if tensors:
            entry["tensors"] = {}
            for role in sorted(tensors):
                arr = tensors[role]
                fname = f"t{lid:04d}_{role}.bin"
                with open(root / "tensors" / fname, "wb") as f:
                    f.write(arr.astype("<f4", copy=False).tobytes())
                entry["tensors"][role] = {"dims": list(arr.shape), "file": fname}
        entries.append(entry)
    manifest = {
        "format": FORMAT_TAG,
        "name": name,
        "input_shape": list(INPUT_SHAPE),
        "class_count": class_count,
        "normalization": normalization,
        "notes": "",
        "layers": entries,
    }
    with open(root / "manifest", "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")


def parity_diff(net: SpecNet, model_dir: str | Path, images: np.ndarray) -> float:
    """Max absolute logit difference between source network and engine."""
    model = load_model(model_dir)
    engine = Engine(model)
    want = torch_logits(net, images)
    worst = 0.0
    for i in range(images.shape[0]):
        got, _ = engine.run(images[i])
        worst = max(worst, float(np.max(np.abs(got - want[i]))))
    return worst


def export(
    checkpoint_path: str | Path,
    architecture: str,
    out_path: str | Path,
    verify: bool = True,
    parity_images: int = PARITY_IMAGES,
    tolerance: float = PARITY_TOLERANCE,
    seed: int = 0,
) -> float:
    """Convert a torch state-dict checkpoint; returns the parity diff.

    Raises ExportError on unmapped/mismatched tensors and ParityError when the
    written model's activations disagree with the source beyond tolerance.
    """
    specs = arch_spec(architecture)
    net = SpecNet(specs)
    try:
        state = torch.load(checkpoint_path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, ValueError) as e:
        raise ExportError(f"cannot read checkpoint {checkpoint_path}: {e}") from e
    try:
        net.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise ExportError(f"checkpoint does not match {architecture}: {e}") from e
    write_model_dir(specs, state, out_path, name=architecture)
    if not verify:
        return float("nan")
    rng = np.random.default_rng(seed)
    images = rng.random((parity_images, *INPUT_SHAPE)).astype(np.float32)
    diff = parity_diff(net, out_path, images)
    if diff > tolerance:
        raise ParityError(
            f"max |logit delta| {diff:.3e} exceeds tolerance {tolerance:.1e}; "
            "refusing to keep a model whose activations do not reproduce"
        )
    return diff
