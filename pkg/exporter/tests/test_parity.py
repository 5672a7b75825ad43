"""Acceptance for the converter: dual-engine agreement at evaluation scale.

A deterministic ResNet-56 fixture checkpoint stands in for trained weights
(downloads are not assumed); the images are CIFAR-shaped with fixed labels.
Dropping real data in via the RESNET56_CKPT / CIFAR10_BIN environment
variables runs the same assertions against a genuine checkpoint and the
official test batch.
"""

import os
import time

import numpy as np
import torch

from fmprune.auxiliary import detect_unimportant_filters
from fmprune.dataset_io import LabeledImage, load_cifar_file
from fmprune.inference import evaluate_accuracy
from fmprune.model_ir import identify_prune_blocks, load_model, validate
from fmprune.pruner import DeleteSet, prune_block

from fmprune_export.export import export
from fmprune_export.torch_zoo import SpecNet, arch_spec, save_fixture, torch_logits

EVAL_IMAGES = 1000
TOP1_PARITY_POINTS = 0.3
UNIMPORTANT_DRIFT_POINTS = 0.2


def evaluation_set():
    path = os.environ.get("CIFAR10_BIN")
    if path:
        return load_cifar_file(path)[:EVAL_IMAGES]
    rng = np.random.default_rng(99)
    return [
        LabeledImage(
            pixels=rng.random((3, 32, 32), dtype=np.float64).astype(np.float32),
            label=int(rng.integers(0, 10)),
        )
        for _ in range(EVAL_IMAGES)
    ]


def torch_top1(net, images):
    batch = np.stack([img.pixels for img in images])
    logits = torch_logits(net, batch)
    preds = logits.argmax(axis=1)
    labels = np.array([img.label for img in images])
    return float((preds == labels).mean())


def exported_resnet(tmp_path):
    ckpt = os.environ.get("RESNET56_CKPT")
    if ckpt is None:
        ckpt = tmp_path / "resnet56.pt"
        save_fixture("resnet56-cifar", 17, ckpt)
    net = SpecNet(arch_spec("resnet56-cifar"))
    net.load_state_dict(torch.load(ckpt, map_location="cpu", weights_only=True))
    diff = export(ckpt, "resnet56-cifar", tmp_path / "model")
    return net, tmp_path / "model", diff


def test_export_parity_resnet56(tmp_path):
    """Exported ResNet-56 agrees with the source network: per-logit diff under
    the gate tolerance and top-1 within 0.3 points over 1000 images."""
    t0 = time.perf_counter()
    net, model_dir, diff = exported_resnet(tmp_path)
    assert diff < 1e-3
    images = evaluation_set()
    model = load_model(model_dir)
    engine_top1, _ = evaluate_accuracy(model, images)
    source_top1 = torch_top1(net, images)
    gap = abs(engine_top1 - source_top1) * 100
    assert gap < TOP1_PARITY_POINTS
    print(
        f"\nPASS export-parity: logit diff {diff:.2e}, top1 engine "
        f"{engine_top1:.4f} vs source {source_top1:.4f} "
        f"(gap {gap:.3f} points), {time.perf_counter() - t0:.0f}s"
    )


def test_unimportant_filter_pruning_preserves_top1(tmp_path):
    """Deleting only the near-zero filters moves top-1 by < 0.2 points."""
    t0 = time.perf_counter()
    _, model_dir, _ = exported_resnet(tmp_path)
    model = load_model(model_dir)
    flagged = detect_unimportant_filters(model, threshold=1e-30)
    total = sum(len(v["indices"]) for v in flagged.values())
    assert total >= 3  # the fixture plants near-zero filters
    early = [
        cid for cid, v in flagged.items()
        if v["fraction"] > 0 and model.layers[cid].name.startswith("s1")
    ]
    assert early  # the nonzero fractions sit in early-stage blocks

    blocks = {b.conv_id: b for b in identify_prune_blocks(model)}
    pruned = model
    for cid in sorted(flagged):
        idx = flagged[cid]["indices"]
        if idx:
            assert blocks[cid].prunable
            pruned = prune_block(pruned, blocks[cid], DeleteSet(cid, tuple(idx), len(idx)))
    assert validate(pruned) == []

    images = evaluation_set()
    base_top1, _ = evaluate_accuracy(model, images)
    pruned_top1, _ = evaluate_accuracy(pruned, images)
    drift = abs(base_top1 - pruned_top1) * 100
    assert drift < UNIMPORTANT_DRIFT_POINTS
    print(
        f"\nPASS unimportant-filter-pruning: {total} filters removed, top1 "
        f"{base_top1:.4f} -> {pruned_top1:.4f} (drift {drift:.3f} points), "
        f"{time.perf_counter() - t0:.0f}s"
    )
