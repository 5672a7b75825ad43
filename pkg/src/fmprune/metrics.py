"""FLOPs and parameter accounting with explicit convention knobs.

Conventions differ across the compression literature, so both knobs are
explicit: ``mac_factor`` counts a multiply-accumulate as 1 or 2 FLOPs, and
``bn_convention`` counts either all four BatchNorm vectors or just the two
trainable ones. Pruning rates are ratios and do not depend on mac_factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .model_ir import Model, _propagate_shapes, validate

BN_CONVENTIONS = ("all4", "trainable2")


@dataclass
class CostBreakdown:
    per_layer: list[dict] = field(default_factory=list)  # id, kind, flops, params
    total_flops: int = 0
    total_params: int = 0
    convention: str = "mac=2,bn=all4"


def analyze_costs(
    model: Model,
    input_shape: tuple[int, ...] | None = None,
    mac_factor: int = 2,
    bn_convention: str = "all4",
) -> CostBreakdown:
    """Per-layer and total FLOPs/parameters for a validating model."""
    if mac_factor not in (1, 2):
        raise ValueError("mac_factor must be 1 or 2")
    if bn_convention not in BN_CONVENTIONS:
        raise ValueError(f"unknown BN convention {bn_convention!r}")
    violations = validate(model)
    if violations:
        raise ValueError("model fails validation: " + "; ".join(violations))
    if input_shape is not None and tuple(input_shape) != tuple(model.input_shape):
        model = replace(model, input_shape=tuple(input_shape))
    shapes = _propagate_shapes(model)

    bd = CostBreakdown(convention=f"mac={mac_factor},bn={bn_convention}")
    for lid, layer in enumerate(model.layers):
        preds = model.edges[lid]
        in_shape = shapes[preds[0]] if preds else tuple(model.input_shape)
        flops = 0
        params = 0
        if layer.kind == "Conv2D":
            n, c, k, _ = layer.tensors["weight"].shape
            _, oh, ow = shapes[lid]
            params = n * c * k * k + (n if layer.has_bias else 0)
            flops = mac_factor * n * c * k * k * oh * ow
        elif layer.kind == "DepthwiseConv2D":
            n, _, k, _ = layer.tensors["weight"].shape
            _, oh, ow = shapes[lid]
            params = n * k * k + (n if layer.has_bias else 0)
            flops = mac_factor * n * k * k * oh * ow
        elif layer.kind == "BatchNorm":
            c = layer.tensors["scale"].shape[0]
            params = 4 * c if bn_convention == "all4" else 2 * c
            if len(shapes[lid]) == 3:
                _, oh, ow = shapes[lid]
                flops = 2 * c * oh * ow  # scale + shift per element
            else:
                flops = 2 * c
        elif layer.kind == "Dense":
            out_n, in_n = layer.tensors["weight"].shape
            params = in_n * out_n + (out_n if layer.has_bias else 0)
            flops = mac_factor * in_n * out_n
        # Pooling, activations, Add, Flatten, Softmax: no parameters; their
        # FLOPs are excluded by convention (below 2% of conv totals).
        bd.per_layer.append(
            {"id": lid, "kind": layer.kind, "flops": flops, "params": params}
        )
        bd.total_flops += flops
        bd.total_params += params
    return bd


def count_params(model: Model, bn_convention: str = "all4") -> CostBreakdown:
    """Parameter totals (FLOPs computed alongside at the model's input shape)."""
    return analyze_costs(model, bn_convention=bn_convention)


def count_flops(
    model: Model, input_shape: tuple[int, ...] | None = None, mac_factor: int = 2
) -> CostBreakdown:
    """FLOP totals at the given input shape (defaults to the model's)."""
    return analyze_costs(model, input_shape=input_shape, mac_factor=mac_factor)


def pruning_rate(before: CostBreakdown, after: CostBreakdown) -> tuple[float, float]:
    """Percent reduction of FLOPs and parameters relative to the baseline."""
    if before.total_flops <= 0 or before.total_params <= 0:
        raise ValueError("baseline totals must be positive")
    flops_pr = (before.total_flops - after.total_flops) / before.total_flops * 100.0
    params_pr = (before.total_params - after.total_params) / before.total_params * 100.0
    return flops_pr, params_pr


def calibrate_mac_factor(
    model: Model, target_flops: float, rel_tol: float = 0.05
) -> int | None:
    """Pick the mac convention whose total lands within rel_tol of the target."""
    for factor in (1, 2):
        total = analyze_costs(model, mac_factor=factor).total_flops
        if abs(total - target_flops) <= rel_tol * target_flops:
            return factor
    return None
