"""Delete-set selection, structural rewiring, and multi-layer schedules.

Selection walks similar pairs greedily: among all pairs with neither member
already deleted, take the one with the highest similarity; the pair member
with the lower auxiliary score is deleted (ties delete the first member).
Pruning then removes the chosen filters and rewires every coupled layer so the
result is a new, structurally valid model. Schedules apply this block by
block in topological order, recomputing statistics on the current model.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .auxiliary import AUX_KINDS, AuxiliaryScore, RankVector, avg_rank, l1_scores
from .dataset_io import ProbeSet
from .errors import PruneError, ScheduleError
from .inference import evaluate_accuracy
from .metrics import CostBreakdown, analyze_costs, pruning_rate
from .model_ir import (
    Model,
    PruneBlock,
    channel_rewire_plan,
    identify_prune_blocks,
    validate,
)
from .similarity import SimilarityMatrix, SimilarityMeasure, pairwise_similarity

log = logging.getLogger(__name__)

SELECTORS = ("qsfm", "rank_only", "random", "l1_only")


@dataclass
class DeleteSet:
    layer_id: int
    indices: tuple[int, ...]  # sorted, unique
    target_size: int
    trace: list[dict] = field(default_factory=list)


@dataclass
class PruneSchedule:
    steps: list[tuple[int, float]]  # (conv layer id, compression ratio in [0, 1))
    measure: SimilarityMeasure = field(default_factory=SimilarityMeasure)
    auxiliary: str = "rank"
    selector: str = "qsfm"
    probe_m: int = 64
    seed: int = 0


@dataclass
class PruneReport:
    header: dict
    rows: list[dict]
    traces: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------


def select_delete_set(
    matrix: SimilarityMatrix, aux: RankVector | AuxiliaryScore, n_delete: int
) -> DeleteSet:
    """Greedy most-similar-pair selection with auxiliary tie-breaking."""
    n = matrix.n
    values = np.asarray(aux.values, dtype=np.float64)
    if values.shape[0] != n:
        raise ValueError(f"auxiliary length {values.shape[0]} != channel count {n}")
    if not 0 <= n_delete <= n - 1:
        raise ValueError(f"n_delete {n_delete} out of range 0..{n - 1}")

    pairs = sorted(
        ((-matrix.scores[m, k], m, k) for m in range(n) for k in range(m + 1, n))
    )
    deleted: set[int] = set()
    trace: list[dict] = []
    for neg_s, m, k in pairs:
        if len(deleted) == n_delete:
            break
        if m in deleted or k in deleted:
            continue
        victim = k if values[m] > values[k] else m
        deleted.add(victim)
        trace.append(
            {
                "pair": [m, k],
                "score": -neg_s,
                "aux": [float(values[m]), float(values[k])],
                "deleted": victim,
            }
        )
    if len(deleted) != n_delete:
        raise ValueError(f"only {len(deleted)} of {n_delete} deletions possible")
    return DeleteSet(
        layer_id=matrix.layer_id,
        indices=tuple(sorted(deleted)),
        target_size=n_delete,
        trace=trace,
    )


def select_baseline(
    selector: str, aux: RankVector | AuxiliaryScore, n_delete: int, layer_id: int
) -> DeleteSet:
    """Score-only selectors: delete the n lowest-auxiliary channels.

    rank_only drops the lowest average ranks, l1_only the smallest norms, and
    random uses seeded uniform scores, i.e. a uniform sample. Ties resolve to
    the lower channel index.
    """
    if selector not in ("rank_only", "random", "l1_only"):
        raise ValueError(f"unknown baseline selector {selector!r}")
    values = np.asarray(aux.values, dtype=np.float64)
    n = values.shape[0]
    if not 0 <= n_delete <= n - 1:
        raise ValueError(f"n_delete {n_delete} out of range 0..{n - 1}")
    order = np.argsort(values, kind="stable")[:n_delete]
    trace = [
        {"deleted": int(j), "aux": float(values[j]), "selector": selector} for j in order
    ]
    return DeleteSet(
        layer_id=layer_id,
        indices=tuple(sorted(int(j) for j in order)),
        target_size=n_delete,
        trace=trace,
    )


# ---------------------------------------------------------------------------
# Structural rewiring
# ---------------------------------------------------------------------------


def prune_block(model: Model, block: PruneBlock, dset: DeleteSet) -> Model:
    """Return a new model with the delete-set's filters removed everywhere.

    The conv loses the filters themselves, fused/downstream BatchNorms lose the
    matching vector entries, consumer convs lose the matching input-channel
    slices, paired depthwise channels collapse with their producer, and Dense
    consumers lose the flattened columns. Raises PruneError when the deletion
    would change a residual Add operand or the model output.
    """
    if dset.layer_id != block.conv_id:
        raise PruneError(
            f"delete set targets layer {dset.layer_id}, block is conv {block.conv_id}"
        )
    conv = model.layers[block.conv_id]
    n = conv.tensors["weight"].shape[0]
    idx = np.asarray(sorted(set(dset.indices)), dtype=np.int64)
    if idx.size != len(dset.indices):
        raise PruneError(f"delete set for layer {block.conv_id} has duplicate indices")
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise PruneError(f"delete set for layer {block.conv_id} has out-of-range indices")
    if idx.size >= n:
        raise PruneError(f"cannot delete all {n} filters of layer {block.conv_id}")

    plan = channel_rewire_plan(model, block.conv_id)
    layers = [l.copy() for l in model.layers]
    if idx.size:
        for lid in plan.filter_drops:
            t = layers[lid].tensors
            t["weight"] = np.delete(t["weight"], idx, axis=0)
            if layers[lid].has_bias:
                t["bias"] = np.delete(t["bias"], idx)
        for lid in plan.bn_drops:
            t = layers[lid].tensors
            for role in ("scale", "shift", "mean", "var"):
                t[role] = np.delete(t[role], idx)
        for lid in plan.input_drops:
            t = layers[lid].tensors
            t["weight"] = np.delete(t["weight"], idx, axis=1)
        for lid, span in plan.dense_drops:
            cols = (idx[:, None] * span + np.arange(span)[None, :]).reshape(-1)
            t = layers[lid].tensors
            t["weight"] = np.delete(t["weight"], cols, axis=1)

    pruned = replace(model, layers=layers, edges=[list(p) for p in model.edges])
    violations = validate(pruned)
    if violations:
        raise PruneError(
            "pruned model fails validation (rewiring bug): " + "; ".join(violations)
        )
    return pruned


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def load_schedule(path: str | Path) -> PruneSchedule:
    """Read a JSON schedule file; see the README for the format."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ScheduleError(f"cannot read schedule {path}: {e}") from e
    try:
        measure_raw = raw.get("measure", {})
        if isinstance(measure_raw, str):
            measure_raw = {"kind": measure_raw}
        kind = measure_raw.get("kind", "ssim")
        measure = SimilarityMeasure(
            kind={"psnr": "neg_euclidean"}.get(kind, kind),
            k1=float(measure_raw.get("k1", 0.01)),
            k2=float(measure_raw.get("k2", 0.03)),
        )
        probe = raw.get("probe", {})
        schedule = PruneSchedule(
            steps=[(int(s["block"]), float(s["ratio"])) for s in raw["steps"]],
            measure=measure,
            auxiliary=raw.get("auxiliary", "rank"),
            selector=raw.get("selector", "qsfm"),
            probe_m=int(probe.get("m", 64)),
            seed=int(probe.get("seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ScheduleError(f"malformed schedule {path}: {e}") from e
    return schedule


def save_schedule(schedule: PruneSchedule, path: str | Path) -> None:
    doc = {
        "measure": {
            "kind": schedule.measure.kind,
            "k1": schedule.measure.k1,
            "k2": schedule.measure.k2,
        },
        "auxiliary": schedule.auxiliary,
        "selector": schedule.selector,
        "probe": {"m": schedule.probe_m, "seed": schedule.seed},
        "steps": [{"block": b, "ratio": r} for b, r in schedule.steps],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def validate_schedule(model: Model, schedule: PruneSchedule) -> list[PruneBlock]:
    """Check the schedule against the model; returns the targeted blocks in order."""
    if schedule.selector not in SELECTORS:
        raise ScheduleError(f"unknown selector {schedule.selector!r}")
    if schedule.auxiliary not in AUX_KINDS:
        raise ScheduleError(f"unknown auxiliary kind {schedule.auxiliary!r}")
    blocks = {b.conv_id: b for b in identify_prune_blocks(model)}
    chosen = []
    prev = -1
    for cid, ratio in schedule.steps:
        if cid not in blocks:
            raise ScheduleError(f"schedule targets layer {cid}, which is not a conv layer")
        if not 0 <= ratio < 1:
            raise ScheduleError(f"layer {cid}: compression ratio {ratio} not in [0, 1)")
        if cid <= prev:
            raise ScheduleError("schedule blocks must be listed in topological order")
        if not blocks[cid].prunable:
            raise ScheduleError(f"layer {cid} cannot be pruned: {blocks[cid].reason}")
        prev = cid
        chosen.append(blocks[cid])
    return chosen


def _auxiliary_for(
    model: Model, block: PruneBlock, probe: ProbeSet | None, kind: str, rng: np.random.Generator
) -> RankVector | AuxiliaryScore:
    if kind == "rank":
        return avg_rank(model, block, probe)
    if kind == "l1_norm":
        return l1_scores(model, block, probe)
    n = model.layers[block.conv_id].tensors["weight"].shape[0]
    return AuxiliaryScore(kind="random", values=rng.random(n))


def run_schedule(
    model: Model,
    schedule: PruneSchedule,
    probe: ProbeSet | None = None,
    eval_data=None,
    mac_factor: int = 2,
) -> tuple[Model, PruneReport]:
    """Prune the scheduled blocks in order, recomputing statistics per step.

    Each step selects floor(ratio * N_i) filters of the current model, deletes
    them, and records FLOPs/parameter movement. ``probe`` may be omitted only
    for the pure random selector. Nothing is retrained; the pruned model is
    returned as-is.
    """
    blocks = validate_schedule(model, schedule)
    needs_probe = bool(schedule.steps) and schedule.selector != "random"
    if needs_probe and (probe is None or not len(probe)):
        raise ScheduleError(f"selector {schedule.selector!r} requires a probe set")

    rng = np.random.default_rng(schedule.seed)
    baseline = analyze_costs(model, mac_factor=mac_factor)
    header = {
        "model": model.name,
        "selector": schedule.selector,
        "measure": schedule.measure.kind,
        "auxiliary": schedule.auxiliary,
        "probe_m": len(probe) if probe is not None else schedule.probe_m,
        "seed": schedule.seed,
        "mac_factor": mac_factor,
        "baseline_flops": baseline.total_flops,
        "baseline_params": baseline.total_params,
    }
    rows: list[dict] = []
    traces: list[dict] = []

    current = model
    acc_before = None
    if eval_data is not None:
        acc_before = evaluate_accuracy(current, eval_data)
    rows.append(
        _report_row(
            step=0,
            layer_id=None,
            n_before=None,
            n_after=None,
            costs=baseline,
            baseline=baseline,
            accuracy=acc_before,
        )
    )

    for step, ((cid, ratio), block) in enumerate(zip(schedule.steps, blocks), start=1):
        n_i = current.layers[cid].tensors["weight"].shape[0]
        # floor(ratio * N_i), nudged so binary ratios like 0.7 hit the intended count
        n_delete = int(ratio * n_i + 1e-9)
        if n_delete >= n_i:
            raise ScheduleError(f"layer {cid}: ratio {ratio} would delete every filter")

        if schedule.selector == "qsfm":
            matrix = pairwise_similarity(current, block, probe, schedule.measure)
            aux = _auxiliary_for(current, block, probe, schedule.auxiliary, rng)
            dset = select_delete_set(matrix, aux, n_delete)
        elif schedule.selector == "random":
            aux = _auxiliary_for(current, block, None, "random", rng)
            dset = select_baseline("random", aux, n_delete, cid)
        else:
            kind = "rank" if schedule.selector == "rank_only" else "l1_norm"
            aux = _auxiliary_for(current, block, probe, kind, rng)
            dset = select_baseline(schedule.selector, aux, n_delete, cid)

        current = prune_block(current, block, dset)
        costs = analyze_costs(current, mac_factor=mac_factor)
        accuracy = evaluate_accuracy(current, eval_data) if eval_data is not None else None
        rows.append(
            _report_row(
                step=step,
                layer_id=cid,
                n_before=n_i,
                n_after=n_i - n_delete,
                costs=costs,
                baseline=baseline,
                accuracy=accuracy,
            )
        )
        traces.append({"step": step, "layer": cid, "deleted": list(dset.indices), "trace": dset.trace})
        log.info(
            "step %d: layer %d pruned %d -> %d filters (flops %d, params %d)",
            step,
            cid,
            n_i,
            n_i - n_delete,
            costs.total_flops,
            costs.total_params,
        )

    return current, PruneReport(header=header, rows=rows, traces=traces)


def _report_row(
    step,
    layer_id,
    n_before,
    n_after,
    costs: CostBreakdown,
    baseline: CostBreakdown,
    accuracy,
) -> dict:
    flops_pr, params_pr = pruning_rate(baseline, costs)
    row = {
        "step": step,
        "layer": layer_id,
        "filters_before": n_before,
        "filters_after": n_after,
        "flops": costs.total_flops,
        "params": costs.total_params,
        "flops_pr": flops_pr,
        "params_pr": params_pr,
    }
    if accuracy is not None:
        row["top1"], row["top5"] = accuracy
    return row


def render_report(report: PruneReport) -> str:
    """Fixed-width text table of the report; one row per step."""
    lines = ["# prune report"]
    for k, v in report.header.items():
        lines.append(f"# {k}: {v}")
    cols = ["step", "layer", "filters_before", "filters_after", "flops", "params", "flops_pr", "params_pr"]
    has_acc = any("top1" in r for r in report.rows)
    if has_acc:
        cols += ["top1", "top5"]
    lines.append(" ".join(f"{c:>14}" for c in cols))
    for r in report.rows:
        cells = []
        for c in cols:
            v = r.get(c)
            if v is None:
                cells.append(f"{'-':>14}")
            elif isinstance(v, float):
                cells.append(f"{v:>14.4f}")
            else:
                cells.append(f"{v:>14}")
        lines.append(" ".join(cells))
    return "\n".join(lines) + "\n"


def save_report(report: PruneReport, json_path: str | Path, text_path: str | Path | None = None) -> None:
    with open(json_path, "w") as f:
        json.dump({"header": report.header, "rows": report.rows}, f, indent=1)
        f.write("\n")
    if text_path is not None:
        Path(text_path).write_text(render_report(report))


def save_trace(report: PruneReport, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(report.traces, f, indent=1)
        f.write("\n")
