"""Command-line entry point: prune, eval, and inspect subcommands.

Every run resolves its configuration (including all seeds) into a
``run_config.json`` in the output directory, so rerunning with the same inputs
reproduces every output byte for byte. Progress goes to stderr as log lines;
machine-readable results only ever go to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from dataclasses import replace
from pathlib import Path

from . import __version__
from .auxiliary import detect_unimportant_filters
from .dataset_io import load_cifar_file, load_probe_dir, sample_probe_set
from .errors import ToolkitError
from .inference import evaluate_accuracy
from .metrics import analyze_costs
from .model_ir import identify_prune_blocks, load_model, save_model
from .pruner import load_schedule, run_schedule, save_report, save_trace
from .similarity import SimilarityMeasure, dump_matrix, pairwise_similarity

log = logging.getLogger("fmprune")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

MEASURE_ALIASES = {"ssim": "ssim", "psnr": "neg_euclidean"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    p = _Parser(prog="fmprune", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("prune", help="run a pruning schedule and write the pruned model")
    pr.add_argument("--model", required=True, help="model directory (manifest + tensors/)")
    pr.add_argument("--schedule", required=True, help="JSON schedule file")
    pr.add_argument("--out", required=True, help="output directory (owned by this run)")
    pr.add_argument("--data", help="probe source: CIFAR batch file or blob directory")
    pr.add_argument("--data-format", choices=["auto", "cifar10", "cifar100", "blobs"], default="auto")
    pr.add_argument("--eval-data", help="optional labeled data for per-step accuracy")
    pr.add_argument("--probe-m", type=int, help="override the schedule's probe size")
    pr.add_argument("--seed", type=int, help="override the schedule's seed")
    pr.add_argument("--measure", choices=sorted(MEASURE_ALIASES), help="override measure")
    pr.add_argument("--selector", choices=["qsfm", "rank_only", "random", "l1_only"])
    pr.add_argument("--mac-factor", type=int, choices=[1, 2], default=2)

    ev = sub.add_parser("eval", help="report top-1/top-5 accuracy on a dataset")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--data-format", choices=["auto", "cifar10", "cifar100"], default="auto")
    ev.add_argument("--limit", type=int, help="evaluate at most this many images")

    ins = sub.add_parser("inspect", help="per-layer shape/cost/near-zero-filter table")
    ins.add_argument("--model", required=True)
    ins.add_argument("--out", help="also write inspect.json here")
    ins.add_argument("--mac-factor", type=int, choices=[1, 2], default=2)
    ins.add_argument("--threshold", type=float, default=1e-30, help="near-zero filter threshold")
    ins.add_argument("--dump-similarity", metavar="BLOCK", type=int,
                     help="write the similarity matrix of this conv layer")
    ins.add_argument("--data", help="probe source for --dump-similarity")
    ins.add_argument("--data-format", choices=["auto", "cifar10", "cifar100", "blobs"], default="auto")
    ins.add_argument("--probe-m", type=int, default=16)
    ins.add_argument("--seed", type=int, default=0)
    ins.add_argument("--measure", choices=sorted(MEASURE_ALIASES), default="ssim")
    return p


def _load_dataset(path: str, fmt: str, input_shape):
    p = Path(path)
    if not p.exists():
        raise ToolkitError(f"data path {p} does not exist")
    if fmt == "blobs" or (fmt == "auto" and p.is_dir()):
        return load_probe_dir(p, input_shape)
    if fmt == "auto":
        size = p.stat().st_size
        if size % 3073 == 0:
            fmt = "cifar10"
        elif size % 3074 == 0:
            fmt = "cifar100"
        else:
            raise ToolkitError(f"cannot infer CIFAR format from size {size}; pass --data-format")
    return load_cifar_file(p, fmt)


def _cmd_prune(args) -> int:
    model = load_model(args.model)
    schedule = load_schedule(args.schedule)
    if args.probe_m is not None:
        schedule.probe_m = args.probe_m
    if args.seed is not None:
        schedule.seed = args.seed
    if args.measure is not None:
        schedule.measure = replace(schedule.measure, kind=MEASURE_ALIASES[args.measure])
    if args.selector is not None:
        schedule.selector = args.selector

    probe = None
    if args.data:
        dataset = _load_dataset(args.data, args.data_format, model.input_shape)
        m = min(schedule.probe_m, len(dataset))
        probe = sample_probe_set(dataset, m, schedule.seed, source=str(args.data))
    eval_data = None
    if args.eval_data:
        eval_data = _load_dataset(args.eval_data, args.data_format, model.input_shape)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pruned, report = run_schedule(
        model, schedule, probe=probe, eval_data=eval_data, mac_factor=args.mac_factor
    )
    save_model(pruned, out / "pruned_model")
    save_report(report, out / "report.json", out / "report.txt")
    save_trace(report, out / "trace.json")
    run_config = {
        "command": "prune",
        "model": str(args.model),
        "schedule": str(args.schedule),
        "data": str(args.data) if args.data else None,
        "eval_data": str(args.eval_data) if args.eval_data else None,
        "probe_m": schedule.probe_m,
        "seed": schedule.seed,
        "measure": schedule.measure.kind,
        "selector": schedule.selector,
        "auxiliary": schedule.auxiliary,
        "mac_factor": args.mac_factor,
    }
    with open(out / "run_config.json", "w") as f:
        json.dump(run_config, f, indent=1)
        f.write("\n")
    log.info("pruned model and report written to %s", out)
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = load_model(args.model)
    data = _load_dataset(args.data, args.data_format, model.input_shape)
    if args.limit:
        data = data[: args.limit]
    top1, top5 = evaluate_accuracy(model, data)
    print(f"top1 {top1:.4f} top5 {top5:.4f} images {len(data)}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    model = load_model(args.model)
    costs = analyze_costs(model, mac_factor=args.mac_factor)
    unimportant = detect_unimportant_filters(model, threshold=args.threshold)
    print(f"model {model.name}  layers {len(model.layers)}  convention {costs.convention}")
    print(f"{'id':>4} {'kind':<16} {'name':<18} {'filters':>8} {'flops':>14} {'params':>10} {'near-zero':>10}")
    for entry in costs.per_layer:
        lid = entry["id"]
        layer = model.layers[lid]
        filters = ""
        frac = ""
        if lid in unimportant:
            filters = str(unimportant[lid]["filters"])
            frac = f"{unimportant[lid]['fraction']:.3f}"
        print(
            f"{lid:>4} {entry['kind']:<16} {layer.name:<18} {filters:>8} "
            f"{entry['flops']:>14} {entry['params']:>10} {frac:>10}"
        )
    print(f"totals flops {costs.total_flops} params {costs.total_params}")

    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        doc = {
            "model": model.name,
            "convention": costs.convention,
            "per_layer": costs.per_layer,
            "total_flops": costs.total_flops,
            "total_params": costs.total_params,
            "unimportant": {
                str(k): {"fraction": v["fraction"], "indices": v["indices"]}
                for k, v in unimportant.items()
            },
        }
        with open(outdir / "inspect.json", "w") as f:
            json.dump(doc, f, indent=1)
            f.write("\n")

    if args.dump_similarity is not None:
        if not args.data:
            raise ToolkitError("--dump-similarity requires --data for the probe set")
        blocks = {b.conv_id: b for b in identify_prune_blocks(model)}
        if args.dump_similarity not in blocks:
            raise ToolkitError(f"layer {args.dump_similarity} is not a conv layer")
        dataset = _load_dataset(args.data, args.data_format, model.input_shape)
        probe = sample_probe_set(dataset, min(args.probe_m, len(dataset)), args.seed)
        measure = SimilarityMeasure(kind=MEASURE_ALIASES[args.measure])
        matrix = pairwise_similarity(model, blocks[args.dump_similarity], probe, measure)
        target = Path(args.out or ".") / f"similarity_layer{args.dump_similarity}.csv"
        dump_matrix(matrix, target)
        log.info("similarity matrix written to %s", target)
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.command == "prune":
            return _cmd_prune(args)
        if args.command == "eval":
            return _cmd_eval(args)
        return _cmd_inspect(args)
    except (ToolkitError, ValueError) as e:
        log.error("%s", e)
        return EXIT_DATA
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
