"""Layer-graph model representation, structural validation, and the on-disk format.

A model is an ordered list of layers plus a predecessor list per layer. Layers
are stored in topological order, so layer ids double as topological indices.
Weights live in ``Layer.tensors`` as float32 numpy arrays; the on-disk format
is a JSON ``manifest`` next to a ``tensors/`` directory of raw little-endian
float32 blobs, which round-trips bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ModelFormatError, PruneError

LAYER_KINDS = (
    "Conv2D",
    "DepthwiseConv2D",
    "BatchNorm",
    "ReLU",
    "Add",
    "AvgPool",
    "MaxPool",
    "Dense",
    "Softmax",
    "Flatten",
)

# Layers that neither mix nor reorder channels; channel deletions pass through.
CHANNEL_TRANSPARENT = ("ReLU", "AvgPool", "MaxPool", "Softmax")

MANIFEST_NAME = "manifest"
TENSOR_DIR = "tensors"
FORMAT_TAG = "fmprune-model/1"


@dataclass
class Layer:
    kind: str
    name: str = ""
    kernel: int = 0
    stride: int = 1
    padding: str = "same"  # "same" | "valid"
    epsilon: float = 1e-3  # BatchNorm only
    has_bias: bool = False
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "Layer":
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()})


@dataclass
class Model:
    layers: list[Layer]
    edges: list[list[int]]  # predecessor ids per layer; [] consumes the model input
    name: str = "model"
    input_shape: tuple[int, int, int] = (3, 32, 32)
    class_count: int = 10
    normalization: dict | None = None  # {"mean": [c], "std": [c]} applied at input
    notes: str = ""

    def consumers(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.layers]
        for lid, preds in enumerate(self.edges):
            for p in preds:
                out[p].append(lid)
        return out

    def conv_ids(self) -> list[int]:
        return [
            i
            for i, l in enumerate(self.layers)
            if l.kind in ("Conv2D", "DepthwiseConv2D")
        ]


@dataclass
class PruneBlock:
    """A conv layer together with the BN/activation it is fused with for capture."""

    conv_id: int
    bn_id: int | None
    act_id: int | None
    capture_id: int
    prunable: bool = True
    reason: str = ""


@dataclass
class RewirePlan:
    """Which layers change when output channels of one conv are deleted.

    ``filter_drops`` lose output filters (axis 0), ``bn_drops`` lose entries in
    all four per-channel vectors, ``input_drops`` lose input-channel slices
    (axis 1), and ``dense_drops`` lose ``span`` consecutive input columns per
    deleted channel (``span`` = flattened spatial size at the Dense boundary).
    """

    filter_drops: list[int]
    bn_drops: list[int]
    input_drops: list[int]
    dense_drops: list[tuple[int, int]]


# ---------------------------------------------------------------------------
# Shape inference
# ---------------------------------------------------------------------------


def conv_out_hw(h: int, w: int, kernel: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        return math.ceil(h / stride), math.ceil(w / stride)
    return (h - kernel) // stride + 1, (w - kernel) // stride + 1


def _layer_output_shape(layer: Layer, in_shapes: list[tuple]) -> tuple:
    kind = layer.kind
    if kind == "Conv2D":
        c, h, w = in_shapes[0]
        n = layer.tensors["weight"].shape[0]
        oh, ow = conv_out_hw(h, w, layer.kernel, layer.stride, layer.padding)
        return (n, oh, ow)
    if kind == "DepthwiseConv2D":
        c, h, w = in_shapes[0]
        oh, ow = conv_out_hw(h, w, layer.kernel, layer.stride, layer.padding)
        return (c, oh, ow)
    if kind in ("AvgPool", "MaxPool"):
        c, h, w = in_shapes[0]
        oh, ow = conv_out_hw(h, w, layer.kernel, layer.stride, layer.padding)
        return (c, oh, ow)
    if kind in ("BatchNorm", "ReLU", "Softmax", "Add"):
        return in_shapes[0]
    if kind == "Flatten":
        return (int(np.prod(in_shapes[0])),)
    if kind == "Dense":
        return (layer.tensors["weight"].shape[0],)
    raise ValueError(f"unknown layer kind {kind!r}")


def infer_shapes(model: Model) -> list[tuple]:
    """Output shape per layer, walking the graph from the model input.

    Requires a model that passes :func:`validate`; raises ValueError otherwise.
    """
    violations = validate(model)
    if violations:
        raise ValueError("model fails validation: " + "; ".join(violations))
    return _propagate_shapes(model)


def _propagate_shapes(model: Model) -> list[tuple]:
    shapes: list[tuple] = []
    for lid, layer in enumerate(model.layers):
        preds = model.edges[lid]
        ins = [shapes[p] for p in preds] if preds else [tuple(model.input_shape)]
        shapes.append(_layer_output_shape(layer, ins))
    return shapes


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate(model: Model) -> list[str]:
    """Structural consistency check; returns one message per violated rule."""
    v: list[str] = []
    n = len(model.layers)
    if len(model.edges) != n:
        return [f"edge list length {len(model.edges)} != layer count {n}"]

    inputs = [i for i, preds in enumerate(model.edges) if not preds]
    if len(inputs) != 1:
        v.append(f"expected exactly one input layer, found {inputs}")
    cons = model.consumers()
    outputs = [i for i in range(n) if not cons[i]]
    if len(outputs) != 1:
        v.append(f"expected exactly one output layer, found {outputs}")

    for lid, preds in enumerate(model.edges):
        for p in preds:
            if not (0 <= p < lid):
                v.append(f"layer {lid}: predecessor {p} violates topological order")
        layer = model.layers[lid]
        if layer.kind not in LAYER_KINDS:
            v.append(f"layer {lid}: unsupported kind {layer.kind!r}")
            continue
        expected_preds = 2 if layer.kind == "Add" else 1
        if preds and len(preds) != expected_preds:
            v.append(f"layer {lid} ({layer.kind}): expected {expected_preds} predecessors, got {len(preds)}")
        v.extend(_check_tensors(lid, layer))

    if v:
        return v

    # Shape propagation: channel compatibility and Add operand agreement.
    shapes: list[tuple] = []
    for lid, layer in enumerate(model.layers):
        preds = model.edges[lid]
        ins = [shapes[p] for p in preds] if preds else [tuple(model.input_shape)]
        if layer.kind in ("Conv2D", "DepthwiseConv2D", "AvgPool", "MaxPool"):
            if len(ins[0]) != 3:
                v.append(f"layer {lid} ({layer.kind}): requires a 3D input, got shape {ins[0]}")
                break
        if layer.kind == "Conv2D":
            declared_in = layer.tensors["weight"].shape[1]
            if declared_in != ins[0][0]:
                v.append(
                    f"layer {lid} (Conv2D): declared input channels {declared_in} "
                    f"!= producer output channels {ins[0][0]}"
                )
        if layer.kind == "DepthwiseConv2D":
            if layer.tensors["weight"].shape[0] != ins[0][0]:
                v.append(
                    f"layer {lid} (DepthwiseConv2D): filter count "
                    f"{layer.tensors['weight'].shape[0]} != input channels {ins[0][0]}"
                )
        if layer.kind == "BatchNorm":
            if layer.tensors["scale"].shape[0] != ins[0][0]:
                v.append(
                    f"layer {lid} (BatchNorm): vector length {layer.tensors['scale'].shape[0]} "
                    f"!= input channels {ins[0][0]}"
                )
        if layer.kind == "Add" and ins[0] != ins[1]:
            v.append(f"layer {lid} (Add): predecessor shapes differ: {ins[0]} vs {ins[1]}")
        if layer.kind == "Dense":
            if len(ins[0]) != 1:
                v.append(f"layer {lid} (Dense): requires a 1D input, got shape {ins[0]}")
            elif layer.tensors["weight"].shape[1] != ins[0][0]:
                v.append(
                    f"layer {lid} (Dense): weight input size {layer.tensors['weight'].shape[1]} "
                    f"!= producer size {ins[0][0]}"
                )
        if v:
            break
        shapes.append(_layer_output_shape(layer, ins))
    return v


def _check_tensors(lid: int, layer: Layer) -> list[str]:
    v: list[str] = []
    for role, arr in layer.tensors.items():
        if not np.all(np.isfinite(arr)):
            v.append(f"layer {lid}: tensor {role!r} has non-finite values")
    kind = layer.kind
    if kind == "Conv2D":
        w = layer.tensors.get("weight")
        if w is None or w.ndim != 4 or w.shape[2] != layer.kernel or w.shape[3] != layer.kernel:
            v.append(f"layer {lid} (Conv2D): weight must have shape (N, C, {layer.kernel}, {layer.kernel})")
        elif layer.has_bias and ("bias" not in layer.tensors or layer.tensors["bias"].shape != (w.shape[0],)):
            v.append(f"layer {lid} (Conv2D): bias length must equal filter count")
    elif kind == "DepthwiseConv2D":
        w = layer.tensors.get("weight")
        if w is None or w.ndim != 4 or w.shape[1] != 1 or w.shape[2] != layer.kernel or w.shape[3] != layer.kernel:
            v.append(f"layer {lid} (DepthwiseConv2D): weight must have shape (N, 1, {layer.kernel}, {layer.kernel})")
        elif layer.has_bias and ("bias" not in layer.tensors or layer.tensors["bias"].shape != (w.shape[0],)):
            v.append(f"layer {lid} (DepthwiseConv2D): bias length must equal filter count")
    elif kind == "BatchNorm":
        vecs = [layer.tensors.get(r) for r in ("scale", "shift", "mean", "var")]
        if any(x is None or x.ndim != 1 for x in vecs):
            v.append(f"layer {lid} (BatchNorm): needs 1D scale/shift/mean/var vectors")
        elif len({x.shape[0] for x in vecs}) != 1:
            v.append(f"layer {lid} (BatchNorm): scale/shift/mean/var lengths differ")
    elif kind == "Dense":
        w = layer.tensors.get("weight")
        if w is None or w.ndim != 2:
            v.append(f"layer {lid} (Dense): weight must be 2D (out, in)")
        elif layer.has_bias and ("bias" not in layer.tensors or layer.tensors["bias"].shape != (w.shape[0],)):
            v.append(f"layer {lid} (Dense): bias length must equal output size")
    return v


# ---------------------------------------------------------------------------
# Prune blocks and channel rewiring plans
# ---------------------------------------------------------------------------


def identify_prune_blocks(model: Model) -> list[PruneBlock]:
    """Group each conv with the BatchNorm/ReLU immediately after it.

    The capture point is the last fused layer; similarity statistics are taken
    on its output. Fusion stops at fan-out so the captured tensor is exactly
    what the rest of the graph consumes.
    """
    cons = model.consumers()
    blocks = []
    for cid in model.conv_ids():
        bn_id = None
        act_id = None
        tail = cid
        while True:
            nxt = cons[tail]
            if len(nxt) != 1 or model.edges[nxt[0]] != [tail]:
                break
            kind = model.layers[nxt[0]].kind
            if kind == "BatchNorm" and bn_id is None and act_id is None:
                bn_id = nxt[0]
            elif kind == "ReLU" and act_id is None:
                act_id = nxt[0]
            else:
                break
            tail = nxt[0]
        try:
            channel_rewire_plan(model, cid)
            prunable, reason = True, ""
        except PruneError as e:
            prunable, reason = False, str(e)
        blocks.append(PruneBlock(cid, bn_id, act_id, tail, prunable, reason))
    return blocks


def channel_rewire_plan(model: Model, conv_id: int) -> RewirePlan:
    """Resolve every layer coupled to the output channels of ``conv_id``.

    Walks the graph in both directions: downstream until a channel-mixing
    weighted layer absorbs the deletion, upstream through depthwise convs whose
    channels correspond 1:1 with their producer's. An Add or the model
    input/output boundary makes the deletion unsafe.
    """
    layer = model.layers[conv_id]
    if layer.kind not in ("Conv2D", "DepthwiseConv2D"):
        raise PruneError(f"layer {conv_id} ({layer.kind}) has no filters to delete")

    cons = model.consumers()
    shapes = _propagate_shapes(model)
    filter_drops: set[int] = set()
    bn_drops: set[int] = set()
    input_drops: set[int] = set()
    dense_drops: set[tuple[int, int]] = set()

    visited: set[int] = set()
    queue: list[int] = [conv_id]  # layer ids whose OUTPUT loses the channels
    while queue:
        sid = queue.pop()
        if sid in visited:
            continue
        visited.add(sid)
        kind = model.layers[sid].kind

        # Producer side: who creates these channels?
        if kind in ("Conv2D", "DepthwiseConv2D"):
            filter_drops.add(sid)
            if kind == "DepthwiseConv2D":
                # Depthwise output channel j is tied to input channel j.
                preds = model.edges[sid]
                if not preds:
                    raise PruneError(
                        f"layer {sid}: depthwise channels are tied to the model input"
                    )
                queue.append(preds[0])
        elif kind == "BatchNorm" or kind in CHANNEL_TRANSPARENT:
            if kind == "BatchNorm":
                bn_drops.add(sid)
            preds = model.edges[sid]
            if not preds:
                raise PruneError(f"layer {sid}: channels are tied to the model input")
            queue.append(preds[0])
        elif kind == "Add":
            raise PruneError(
                f"layer {sid}: deletion would change a residual Add operand shape; "
                "only convs whose channels never reach an Add can be pruned"
            )
        else:
            raise PruneError(f"layer {sid} ({kind}): cannot delete output channels")

        # Consumer side: who reads these channels?
        if not cons[sid]:
            raise PruneError(
                f"layer {sid}: output channels feed the model output and cannot be deleted"
            )
        for t in cons[sid]:
            tkind = model.layers[t].kind
            if tkind == "Conv2D":
                input_drops.add(t)
            elif tkind == "DepthwiseConv2D":
                queue.append(t)
            elif tkind == "Dense":
                dense_drops.add((t, 1))
            elif tkind == "Flatten":
                c, h, w = shapes[sid]
                for d in cons[t]:
                    if model.layers[d].kind != "Dense":
                        raise PruneError(
                            f"layer {d} ({model.layers[d].kind}): unsupported consumer after Flatten"
                        )
                    dense_drops.add((d, h * w))
            elif tkind == "BatchNorm" or tkind in CHANNEL_TRANSPARENT:
                queue.append(t)
            elif tkind == "Add":
                raise PruneError(
                    f"layer {t}: deletion would change a residual Add operand shape; "
                    "only convs whose channels never reach an Add can be pruned"
                )
            else:
                raise PruneError(f"layer {t} ({tkind}): unsupported consumer for channel deletion")

    return RewirePlan(
        sorted(filter_drops), sorted(bn_drops), sorted(input_drops), sorted(dense_drops)
    )


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------


def save_model(model: Model, path: str | Path) -> None:
    """Write ``manifest`` + ``tensors/`` blobs; load_model round-trips bit-exactly."""
    root = Path(path)
    (root / TENSOR_DIR).mkdir(parents=True, exist_ok=True)
    entries = []
    for lid, layer in enumerate(model.layers):
        entry: dict = {"id": lid, "kind": layer.kind, "preds": list(model.edges[lid])}
        if layer.name:
            entry["name"] = layer.name
        if layer.kind in ("Conv2D", "DepthwiseConv2D", "AvgPool", "MaxPool"):
            entry.update(kernel=layer.kernel, stride=layer.stride, padding=layer.padding)
        if layer.kind in ("Conv2D", "DepthwiseConv2D", "Dense"):
            entry["bias"] = layer.has_bias
        if layer.kind == "BatchNorm":
            entry["epsilon"] = layer.epsilon
        if layer.tensors:
            entry["tensors"] = {}
            for role in sorted(layer.tensors):
                arr = np.ascontiguousarray(layer.tensors[role], dtype=np.float32)
                fname = f"t{lid:04d}_{role}.bin"
                with open(root / TENSOR_DIR / fname, "wb") as f:
                    f.write(arr.astype("<f4", copy=False).tobytes())
                entry["tensors"][role] = {"dims": list(arr.shape), "file": fname}
        entries.append(entry)
    manifest = {
        "format": FORMAT_TAG,
        "name": model.name,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "normalization": model.normalization,
        "notes": model.notes,
        "layers": entries,
    }
    with open(root / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")


def load_model(path: str | Path) -> Model:
    """Read a model directory; raises ModelFormatError with the layer index on failure."""
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise ModelFormatError(f"no manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"malformed manifest: {e}") from e
    if manifest.get("format") != FORMAT_TAG:
        raise ModelFormatError(f"unsupported format tag {manifest.get('format')!r}")

    layers: list[Layer] = []
    edges: list[list[int]] = []
    for i, entry in enumerate(manifest.get("layers", [])):
        kind = entry.get("kind")
        if kind not in LAYER_KINDS:
            raise ModelFormatError(f"layer {i}: unsupported layer kind {kind!r}")
        layer = Layer(
            kind=kind,
            name=entry.get("name", ""),
            kernel=int(entry.get("kernel", 0)),
            stride=int(entry.get("stride", 1)),
            padding=entry.get("padding", "same"),
            epsilon=float(entry.get("epsilon", 1e-3)),
            has_bias=bool(entry.get("bias", False)),
        )
        for role, spec in entry.get("tensors", {}).items():
            dims = tuple(int(d) for d in spec["dims"])
            blob = (root / TENSOR_DIR / spec["file"]).read_bytes()
            expected = int(np.prod(dims)) * 4
            if len(blob) != expected:
                raise ModelFormatError(
                    f"layer {i}: tensor {role!r} has {len(blob)} bytes, "
                    f"dims {list(dims)} require {expected}"
                )
            layer.tensors[role] = np.frombuffer(blob, dtype="<f4").reshape(dims).copy()
        layers.append(layer)
        edges.append([int(p) for p in entry.get("preds", [])])

    model = Model(
        layers=layers,
        edges=edges,
        name=manifest.get("name", "model"),
        input_shape=tuple(manifest.get("input_shape", (3, 32, 32))),
        class_count=int(manifest.get("class_count", 10)),
        normalization=manifest.get("normalization"),
        notes=manifest.get("notes", ""),
    )
    violations = validate(model)
    if violations:
        raise ModelFormatError("loaded model fails validation: " + "; ".join(violations))
    return model


def model_equal(a: Model, b: Model) -> bool:
    """Field-by-field equality with bit-exact tensor comparison."""
    if (
        a.name != b.name
        or tuple(a.input_shape) != tuple(b.input_shape)
        or a.class_count != b.class_count
        or a.normalization != b.normalization
        or a.notes != b.notes
        or a.edges != b.edges
        or len(a.layers) != len(b.layers)
    ):
        return False
    for la, lb in zip(a.layers, b.layers):
        if (
            la.kind != lb.kind
            or la.name != lb.name
            or la.kernel != lb.kernel
            or la.stride != lb.stride
            or la.padding != lb.padding
            or la.epsilon != lb.epsilon
            or la.has_bias != lb.has_bias
            or set(la.tensors) != set(lb.tensors)
        ):
            return False
        for role in la.tensors:
            ta, tb = la.tensors[role], lb.tensors[role]
            if ta.shape != tb.shape or not np.array_equal(
                ta.view(np.uint32), tb.view(np.uint32)
            ):
                return False
    return True
