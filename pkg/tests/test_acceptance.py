"""Acceptance suite: one test per release criterion, each printing a PASS line
with its measured numbers (run with ``pytest -s tests/test_acceptance.py -v``).

Tolerances are fixed here and nowhere else; every expected value is either
computed by an independent oracle in this repo or taken from the published
totals for these architectures.
"""

import time

import numpy as np

from fmprune import zoo
from fmprune.auxiliary import avg_rank, detect_unimportant_filters
from fmprune.cli import main
from fmprune.dataset_io import ProbeSet, serialize_cifar_batch
from fmprune.inference import forward
from fmprune.metrics import analyze_costs, calibrate_mac_factor, pruning_rate
from fmprune.model_ir import (
    Layer,
    identify_prune_blocks,
    save_model,
    validate,
)
from fmprune.pruner import (
    DeleteSet,
    PruneSchedule,
    prune_block,
    run_schedule,
    save_schedule,
    select_delete_set,
)
from fmprune.similarity import (
    SimilarityMatrix,
    SimilarityMeasure,
    neg_euclidean,
    pairwise_similarity,
    ssim,
)

from conftest import chain_model, make_bn, make_conv, make_dense, random_images
from oracles import brute_force_delete_set, neg_euclidean_reference, ssim_reference


def test_similarity_oracle_equivalence():
    """50 random pairs match single-expression references to 1e-10 relative;
    self-similarity is exact. Budget: 1 s."""
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        shape = (int(rng.integers(2, 12)), int(rng.integers(2, 12)))
        a = rng.normal(size=shape) * rng.uniform(0.1, 5)
        b = rng.normal(size=shape) * rng.uniform(0.1, 5)
        d = rng.uniform(0.1, 10)
        got_s = ssim(a, b, d)
        want_s = ssim_reference(a, b, d)
        got_e = neg_euclidean(a, b)
        want_e = neg_euclidean_reference(a, b)
        worst = max(worst, abs(got_s - want_s) / abs(want_s), abs(got_e - want_e) / abs(want_e))
        assert abs(got_s - want_s) <= 1e-10 * abs(want_s)
        assert abs(got_e - want_e) <= 1e-10 * abs(want_e)
        assert ssim(a, a, d) == 1.0
        assert neg_euclidean(a, a) == 0.0
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    print(f"\nPASS similarity-oracle-equivalence: worst rel err {worst:.2e}, {elapsed:.2f}s")


def test_selection_oracle_equivalence():
    """100 random (matrix, ranks) instances with N<=8 match the brute-force
    greedy exactly. Budget: 5 s."""
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    for trial in range(100):
        n = int(rng.integers(2, 9))
        raw = rng.normal(size=(n, n))
        sym = (raw + raw.T) / 2
        if trial % 3 == 0:  # force score ties so the (m, n) tie-break is hit
            sym[:] = np.round(sym, 1)
        np.fill_diagonal(sym, np.nan)
        ranks = rng.integers(0, 4, n).astype(np.float64)
        n_delete = int(rng.integers(0, n))
        matrix = SimilarityMatrix(0, n, sym, SimilarityMeasure(), 1)
        from fmprune.auxiliary import RankVector

        got = select_delete_set(matrix, RankVector(0, ranks), n_delete)
        want = brute_force_delete_set(sym, ranks, n_delete)
        assert list(got.indices) == want, f"trial {trial}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0
    print(f"\nPASS selection-oracle-equivalence: 100 instances exact, {elapsed:.2f}s")


def test_duplicate_filter_redundancy():
    """A duplicated filter pair is the strict matrix maximum under both
    measures and exactly one member is deleted first."""
    rng = np.random.default_rng(11)
    model = chain_model(
        [make_conv(rng, 3, 8), Layer("ReLU"), make_conv(rng, 8, 6)], input_shape=(3, 8, 8)
    )
    w = model.layers[0].tensors["weight"]
    w[6] = w[2]
    block = identify_prune_blocks(model)[0]
    probe = ProbeSet(images=random_images(4, seed=12))
    for kind, best in (("ssim", 1.0), ("neg_euclidean", 0.0)):
        matrix = pairwise_similarity(model, block, probe, SimilarityMeasure(kind=kind))
        assert matrix.scores[2, 6] == best
        others = [
            matrix.scores[m, k]
            for m in range(8)
            for k in range(m + 1, 8)
            if (m, k) != (2, 6)
        ]
        assert max(others) < best  # strict maximum
        dset = select_delete_set(matrix, avg_rank(model, block, probe), 1)
        assert dset.trace[0]["pair"] == [2, 6]
        assert len(dset.indices) == 1 and dset.indices[0] in (2, 6)
    print("\nPASS duplicate-filter-redundancy: pair is strict max, one member deleted")


def test_dead_channel_exactness():
    """Pruning every filter flagged at threshold 1e-30 moves probe logits by
    less than 1e-6 absolute."""
    rng = np.random.default_rng(13)
    model = chain_model(
        [
            make_conv(rng, 3, 16),
            make_bn(rng, 16),
            Layer("ReLU"),
            make_conv(rng, 16, 12),
            Layer("ReLU"),
            Layer("Flatten"),
            make_dense(rng, 12 * 64, 10),
        ],
        input_shape=(3, 8, 8),
    )
    # Near-zero filters in both convs; their BN rows carry no mean/shift so the
    # dead channels contribute nothing downstream.
    conv1, bn1, conv2 = model.layers[0], model.layers[1], model.layers[3]
    for j in (2, 9, 13):
        conv1.tensors["weight"][j] = 1e-33
        bn1.tensors["mean"][j] = 0.0
        bn1.tensors["shift"][j] = 0.0
    for j in (5,):
        conv2.tensors["weight"][j] = 1e-34

    flagged = detect_unimportant_filters(model, threshold=1e-30)
    assert flagged[0]["indices"] == [2, 9, 13]
    assert flagged[3]["indices"] == [5]

    images = random_images(8, seed=14)
    before = [forward(model, img).scores for img in images]
    pruned = model
    blocks = {b.conv_id: b for b in identify_prune_blocks(model)}
    for cid in sorted(flagged):
        idx = flagged[cid]["indices"]
        if idx:
            pruned = prune_block(pruned, blocks[cid], DeleteSet(cid, tuple(idx), len(idx)))
    after = [forward(pruned, img).scores for img in images]
    worst = max(float(np.max(np.abs(a - b))) for a, b in zip(after, before))
    assert worst < 1e-6
    assert validate(pruned) == []
    print(f"\nPASS dead-channel-exactness: worst logit shift {worst:.2e} < 1e-6")


def test_structural_accounting_against_published_totals():
    """ResNet-56 within 3% of 0.86M params and 5% of 126.55M FLOPs under the
    calibrated mac convention; MobileNet-V2 CIFAR pruned at 0.3 over all 17
    depthwise blocks lands within 2 points of 24.09% / 26.93%. Budget: 30 s."""
    t0 = time.perf_counter()
    resnet = zoo.build_resnet56(seed=0)
    factor = calibrate_mac_factor(resnet, 126.55e6, rel_tol=0.05)
    assert factor is not None
    costs = analyze_costs(resnet, mac_factor=factor)
    param_err = abs(costs.total_params - 0.86e6) / 0.86e6
    flops_err = abs(costs.total_flops - 126.55e6) / 126.55e6
    assert param_err < 0.03
    assert flops_err < 0.05

    mobilenet = zoo.build_mobilenet_v2(seed=0)
    dw_blocks = [
        b
        for b in identify_prune_blocks(mobilenet)
        if mobilenet.layers[b.conv_id].kind == "DepthwiseConv2D"
    ]
    assert len(dw_blocks) == 17
    before = analyze_costs(mobilenet, mac_factor=factor)
    current = mobilenet
    for b in dw_blocks:
        n = current.layers[b.conv_id].tensors["weight"].shape[0]
        k = int(0.3 * n + 1e-9)
        current = prune_block(current, b, DeleteSet(b.conv_id, tuple(range(k)), k))
    flops_pr, params_pr = pruning_rate(before, analyze_costs(current, mac_factor=factor))
    assert abs(params_pr - 24.09) < 2.0
    assert abs(flops_pr - 26.93) < 2.0
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    print(
        f"\nPASS structural-accounting: resnet mac={factor} params "
        f"{costs.total_params/1e6:.3f}M (err {param_err:.1%}), flops "
        f"{costs.total_flops/1e6:.2f}M (err {flops_err:.1%}); mobilenet PR "
        f"params {params_pr:.2f}% flops {flops_pr:.2f}%, {elapsed:.1f}s"
    )


def test_schedule_reproduction_structure_only():
    """ResNet-56 first nine prunable blocks at [0.5 x4, 0.75 x5] with 64 probe
    images: nine strictly decreasing FLOPs rows and a valid final model.
    Budget: 600 s."""
    t0 = time.perf_counter()
    model = zoo.build_resnet56(seed=5)
    prunable = [b for b in identify_prune_blocks(model) if b.prunable][:9]
    ratios = [0.5, 0.5, 0.5, 0.5, 0.75, 0.75, 0.75, 0.75, 0.75]
    schedule = PruneSchedule(
        steps=[(b.conv_id, r) for b, r in zip(prunable, ratios)],
        measure=SimilarityMeasure(kind="ssim"),
        auxiliary="rank",
        selector="qsfm",
        probe_m=64,
        seed=6,
    )
    probe = ProbeSet(images=zoo.synthetic_images(64, seed=6), seed=6, source="synthetic")
    pruned, report = run_schedule(model, schedule, probe=probe, mac_factor=1)
    assert len(report.rows) == 10  # baseline + 9 steps
    flops = [r["flops"] for r in report.rows]
    assert all(b < a for a, b in zip(flops, flops[1:]))
    assert validate(pruned) == []
    # Filter counts follow floor(ratio * 16).
    for (cid, ratio), row in zip(schedule.steps, report.rows[1:]):
        assert row["filters_after"] == 16 - int(ratio * 16 + 1e-9)
    elapsed = time.perf_counter() - t0
    assert elapsed < 600.0
    print(
        f"\nPASS schedule-reproduction: 9 steps, flops {flops[0]/1e6:.2f}M -> "
        f"{flops[-1]/1e6:.2f}M, final model valid, {elapsed:.1f}s"
    )


def test_determinism_byte_identical_runs(tmp_path):
    """Two CLI runs with the same seeds produce byte-identical pruned models,
    reports, and traces."""
    model = zoo.build_resnet56(seed=8)
    model_dir = tmp_path / "model"
    save_model(model, model_dir)
    prunable = [b for b in identify_prune_blocks(model) if b.prunable][:3]
    sched_path = tmp_path / "schedule.json"
    save_schedule(
        PruneSchedule(
            steps=[(b.conv_id, 0.5) for b in prunable], probe_m=16, seed=21
        ),
        sched_path,
    )
    images = zoo.synthetic_images(32, seed=22)
    data = tmp_path / "probe.bin"
    data.write_bytes(serialize_cifar_batch(images))

    outs = []
    for name in ("run_a", "run_b"):
        out = tmp_path / name
        rc = main(
            [
                "prune",
                "--model", str(model_dir),
                "--schedule", str(sched_path),
                "--data", str(data),
                "--out", str(out),
                "--mac-factor", "1",
            ]
        )
        assert rc == 0
        outs.append(out)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    assert any("pruned_model" in str(f) for f in files)
    assert any("report" in str(f) for f in files)
    for rel in files:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel
    print(f"\nPASS determinism: {len(files)} output files byte-identical across reruns")
