"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. The end-to-end training
criterion takes a few minutes on CPU.
"""

import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import make_manifest_text
from sceneiqa import cli
from sceneiqa.core import (
    ClassProbVector, SceneAffineTable, TopKPolicy, aggregate_image_from_patches,
    aggregate_quality, rescale_single_scene,
)
from sceneiqa.data import (
    SplitSpec, generate_synthetic_dataset, load_manifest, load_split,
)
from sceneiqa.metrics import (
    MetricRecord, build_benchmark_table, compute_scene_metrics,
    median_across_scenes,
)
from sceneiqa.model import ModelConfig, build_model, load_checkpoint
from sceneiqa.train import (
    TrainConfig, TrainState, early_stop_update, huber_loss, lr_at_epoch,
    predict_images, run_training,
)
from test_core import brute_force_aggregate, random_instance
from test_metrics import kendall_oracle, pearson_oracle, spearman_oracle


def ok(n, msg):
    print(f"\nACCEPTANCE {n}: PASS - {msg}")


def test_criterion_1_eq1_oracle_equivalence():
    rng = np.random.default_rng(1001)
    start = time.monotonic()
    for _ in range(10000):
        qp, weights, a, b, k = random_instance(rng)
        expected = brute_force_aggregate(qp, list(weights), list(a), list(b), k)
        got = aggregate_quality(
            qp, ClassProbVector(tuple(weights)),
            SceneAffineTable(tuple(a), tuple(b)), TopKPolicy(k),
        )
        assert got == pytest.approx(expected, rel=1e-10, abs=1e-10)
    elapsed = time.monotonic() - start
    assert elapsed < 5.0, f"took {elapsed:.2f}s"
    ok(1, f"aggregation matches brute-force oracle on 10000 instances in {elapsed:.2f}s")


def test_criterion_2_one_hot_and_scale_invariance():
    rng = np.random.default_rng(1002)
    for _ in range(1000):
        s = int(rng.integers(2, 12))
        a = rng.uniform(-3, 3, s)
        b = rng.uniform(-5, 5, s)
        qp = float(rng.uniform(-10, 10))
        hot = int(rng.integers(0, s))
        weights = np.zeros(s)
        weights[hot] = float(rng.uniform(0.1, 10))
        table = SceneAffineTable(tuple(a), tuple(b))
        k = int(rng.integers(1, s + 1))
        got = aggregate_quality(qp, ClassProbVector(tuple(weights)), table, TopKPolicy(k))
        assert got == rescale_single_scene(qp, hot, table)
    for _ in range(1000):
        qp, weights, a, b, k = random_instance(rng)
        c = float(rng.uniform(1e-3, 1e3))
        table = SceneAffineTable(tuple(a), tuple(b))
        base = aggregate_quality(qp, ClassProbVector(tuple(weights)), table, TopKPolicy(k))
        scaled = aggregate_quality(
            qp, ClassProbVector(tuple(c * weights)), table, TopKPolicy(k))
        assert scaled == pytest.approx(base, abs=1e-10)
    ok(2, "one-hot reduction exact and positive-scale invariance within 1e-10")


def test_criterion_3_affinity_commutation():
    rng = np.random.default_rng(1003)
    for _ in range(1000):
        qp, weights, a, b, k = random_instance(rng)
        patches = rng.uniform(-5, 5, int(rng.integers(1, 10)))
        probs = ClassProbVector(tuple(weights))
        table = SceneAffineTable(tuple(a), tuple(b))
        policy = TopKPolicy(k)
        mean_then = aggregate_image_from_patches(
            tuple(patches), probs, table, policy).final_score
        then_mean = float(np.mean([
            aggregate_quality(float(q), probs, table, policy) for q in patches]))
        assert mean_then == pytest.approx(then_mean, abs=1e-10)
    ok(3, "mean-then-rescale equals rescale-then-mean within 1e-10")


def test_criterion_4_metric_oracle_equivalence():
    srcc, _, _, _ = compute_scene_metrics([1, 3, 2, 5, 4], [1, 2, 3, 4, 5])
    assert srcc == pytest.approx(0.8, abs=1e-12)
    rng = np.random.default_rng(1004)
    checked = 0
    while checked < 200:
        n = int(rng.integers(2, 201))
        if checked % 2:
            preds = rng.integers(0, max(2, n // 2), n).astype(float)
            targets = rng.integers(0, max(2, n // 2), n).astype(float)
        else:
            preds = rng.normal(size=n)
            targets = rng.normal(size=n)
        if np.ptp(preds) == 0 or np.ptp(targets) == 0:
            continue
        srcc, plcc, krcc, mae = compute_scene_metrics(preds, targets)
        assert srcc == pytest.approx(spearman_oracle(preds, targets), abs=1e-10)
        assert plcc == pytest.approx(pearson_oracle(preds, targets), abs=1e-10)
        assert krcc == pytest.approx(kendall_oracle(preds, targets), abs=1e-10)
        assert mae == pytest.approx(float(np.mean(np.abs(preds - targets))), abs=1e-10)
        checked += 1
    ok(4, "SRCC/PLCC/KRCC/MAE match naive references on 200 vectors; worked example exact")


def test_criterion_5_gradient_check():
    s = 6
    config = TrainConfig()
    model = build_model(ModelConfig(num_scenes=s, top_k=3), seed=0).double()
    rng = np.random.default_rng(1005)
    eps = 1e-6

    def loss_fn(qp, logits, target, class_target):
        probs = F.softmax(logits, dim=0)
        final = model.aggregate(qp.unsqueeze(0), probs.unsqueeze(0))[0]
        h = huber_loss(final, target, config.huber_delta)
        ce = F.cross_entropy(logits.unsqueeze(0), torch.tensor([class_target]))
        return config.loss_weight_quality * h + config.loss_weight_class * ce

    for point in range(20):
        with torch.no_grad():
            model.scale_a.copy_(torch.tensor(rng.uniform(0.5, 2.0, s)))
            model.scale_b.copy_(torch.tensor(rng.uniform(-1.0, 1.0, s)))
        qp = torch.tensor(float(rng.uniform(-2, 2)), dtype=torch.float64)
        logits = torch.tensor(rng.normal(size=s), requires_grad=True)
        target = torch.tensor(float(rng.uniform(-2, 2)), dtype=torch.float64)
        class_target = int(rng.integers(0, s))

        model.zero_grad()
        loss_fn(qp, logits, target, class_target).backward()

        for param, grad in ((model.scale_a, model.scale_a.grad),
                            (model.scale_b, model.scale_b.grad),
                            (logits, logits.grad)):
            for i in range(s):
                with torch.no_grad():
                    orig = param[i].item()
                    param[i] = orig + eps
                    up = loss_fn(qp, logits, target, class_target).item()
                    param[i] = orig - eps
                    down = loss_fn(qp, logits, target, class_target).item()
                    param[i] = orig
                fd = (up - down) / (2 * eps)
                an = grad[i].item()
                denom = max(abs(fd), abs(an), 1e-8)
                assert abs(fd - an) / denom < 1e-4, (
                    f"point {point}: analytic {an} vs finite-difference {fd}")
    ok(5, "affine-table and logit gradients match central differences within 1e-4")


def test_criterion_6_split_protocol(tmp_path):
    # 50-scene manifest, 5116 images, 4 lighting classes, uneven scene sizes
    rng = np.random.default_rng(1006)
    sizes = rng.integers(60, 150, 50)
    sizes = np.round(sizes * 5116 / sizes.sum()).astype(int)
    sizes[-1] += 5116 - sizes.sum()
    lights = ["outdoor", "indoor", "lowlight", "night"]
    rows = []
    for s, size in enumerate(sizes):
        for i in range(size):
            rows.append(f"im{s}_{i}.png,scene{s},{lights[s % 4]},Overall,{i % 7}.0,,,,")
    manifest = tmp_path / "piqlike.csv"
    manifest.write_text(make_manifest_text(rows), encoding="utf-8")
    out = tmp_path / "split.txt"
    code = cli.main(["split", "--manifest", str(manifest), "--n-test", "15",
                     "--fraction", "0.29", "--tolerance", "0.03",
                     "--seed", "1", "--out", str(out)])
    assert code == 0
    spec = load_split(out)
    assert len(spec.test_scenes) == 15
    assert not (spec.train_scenes & spec.test_scenes)
    recs, _ = load_manifest(manifest)
    n_test = sum(1 for r in recs if r.scene_id in spec.test_scenes)
    frac = n_test / len(recs)
    assert abs(frac - 0.29) <= 0.03
    ok(6, f"15/50-scene disjoint split achieved test fraction {frac:.4f} "
          f"({n_test}/{len(recs)} images)")


@pytest.fixture(scope="module")
def synthetic_e2e(tmp_path_factory):
    """5 train + 2 held-out scenes, 40 images per scene, known affine truth."""
    out = tmp_path_factory.mktemp("e2e")
    rng = np.random.default_rng(7)
    truth = SceneAffineTable(
        tuple(rng.uniform(0.5, 3.0, 7)), tuple(rng.uniform(-1.0, 2.0, 7)))
    manifest = generate_synthetic_dataset(7, 40, truth, seed=7, out_dir=out)
    recs, registry = load_manifest(manifest)
    split = SplitSpec(frozenset(registry.scene_ids[:5]),
                      frozenset(registry.scene_ids[5:]), seed=0)
    model_config = ModelConfig(num_scenes=5, top_k=3, hyper_head="linear_probe")
    train_config = TrainConfig(
        max_epochs=40, patience=40, lr_backbone=1e-4, lr_heads=1e-3,
        lr_rescale=2e-2, batch_size=8, seed=1)
    start = time.monotonic()
    ckpt, state = run_training(recs, split, model_config, train_config,
                               out / "run", out)
    train_seconds = time.monotonic() - start
    return {"dir": out, "records": recs, "split": split, "truth": truth,
            "checkpoint": ckpt, "state": state, "train_seconds": train_seconds}


def test_criterion_7_synthetic_end_to_end(synthetic_e2e):
    assert synthetic_e2e["train_seconds"] < 600, (
        f"training took {synthetic_e2e['train_seconds']:.0f}s")
    state = synthetic_e2e["state"]
    assert state.best_val_srcc >= 0.9

    model, registry, _epoch, _extra = load_checkpoint(
        synthetic_e2e["dir"] / "run" / "last.pt")
    recs = synthetic_e2e["records"]
    split = synthetic_e2e["split"]
    held_out = [r for r in recs if r.scene_id in split.test_scenes]
    preds = predict_images(model, held_out, synthetic_e2e["dir"], "Overall",
                           patch_seed=1)
    by_scene = {}
    for rec, _pre, final, _probs in preds:
        by_scene.setdefault(rec.scene_id, []).append(
            (final, rec.attribute_scores["Overall"]))
    srccs = []
    for scene, pairs in sorted(by_scene.items()):
        srcc, _, _, _ = compute_scene_metrics(
            [p for p, _ in pairs], [t for _, t in pairs])
        srccs.append(srcc)
    held_out_median = median_across_scenes(srccs)
    assert held_out_median >= 0.7

    a_learned = np.array(model.affine_table().multipliers)
    a_true = np.array(synthetic_e2e["truth"].multipliers[:5])
    scale_corr = float(np.corrcoef(a_learned, a_true)[0, 1])
    assert scale_corr >= 0.95
    ok(7, f"trained in {synthetic_e2e['train_seconds']:.0f}s; val SRCC "
          f"{state.best_val_srcc:.3f}, held-out median SRCC {held_out_median:.3f}, "
          f"scale correlation {scale_corr:.3f}")


def test_criterion_8_schedule_and_stopping():
    config = TrainConfig()
    expected = {e: 1e-4 * 0.95 ** (e // 10) for e in range(31)}
    for epoch in range(31):
        assert lr_at_epoch(1e-4, epoch, config) == pytest.approx(
            expected[epoch], rel=1e-12)
    # hand-computed anchors
    assert lr_at_epoch(1e-4, 0, config) == 1e-4
    assert lr_at_epoch(1e-4, 15, config) == pytest.approx(9.5e-5)
    assert lr_at_epoch(1e-4, 25, config) == pytest.approx(9.025e-5)
    assert lr_at_epoch(1e-4, 30, config) == pytest.approx(8.57375e-5)

    # scripted SRCC sequence: one improvement, then a flat plateau
    patience = 4
    scripted = [0.5, 0.6] + [0.6] * 10
    state = TrainState()
    stop_epoch = None
    for epoch, val in enumerate(scripted):
        state.epoch = epoch
        state, stop = early_stop_update(state, val, patience)
        if stop:
            stop_epoch = epoch
            break
    assert stop_epoch == 1 + patience  # exactly patience epochs past the best
    ok(8, "lr table for epochs 0-30 matches hand-computed 0.95-step decay; "
          "early stopping halts exactly at patience")


def _pipeline_once(root: Path, tag: str):
    base = root / tag
    assert cli.main(["synth", "--n-scenes", "4", "--images-per-scene", "8",
                     "--seed", "9", "--out", str(base / "data")]) == 0
    assert cli.main(["split", "--manifest", str(base / "data" / "manifest.csv"),
                     "--n-test", "1", "--fraction", "0.25", "--tolerance", "0.01",
                     "--seed", "9", "--out", str(base / "split.txt")]) == 0
    assert cli.main([
        "train", "--manifest", str(base / "data" / "manifest.csv"),
        "--split", str(base / "split.txt"), "--out", str(base / "run"),
        "--set", "run_seed=9", "--set", "train.max_epochs=2",
        "--set", "train.patience=2", "--set", "train.batch_size=4",
        "--set", "train.val_fraction=0.3", "--set", "model.patches_per_image=2",
        "--set", "model.hyper_head=linear_probe",
    ]) == 0
    assert cli.main([
        "eval", "--checkpoint", str(base / "run" / "checkpoint.pt"),
        "--manifest", str(base / "data" / "manifest.csv"),
        "--split", str(base / "split.txt"), "--out", str(base / "eval"),
        "--seed", "9",
    ]) == 0
    return base


def test_criterion_9_reproducibility(tmp_path):
    a = _pipeline_once(tmp_path, "a")
    b = _pipeline_once(tmp_path, "b")
    for rel in ("eval/metrics.csv", "eval/benchmark.csv", "eval/histograms.csv",
                "run/metrics.csv", "split.txt"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    ok(9, "two seeded synth/split/train/eval runs produced byte-identical CSVs")


def test_criterion_10_benchmark_table_rendering():
    # feed per-scene records whose medians equal the reference row
    recs = [
        ("ours", MetricRecord("sceneA", "Overall", 0.70, 0.71, 0.50, 1.00, 20)),
        ("ours", MetricRecord("sceneB", "Overall", 0.78, 0.78, 0.59, 1.12, 20)),
        ("ours", MetricRecord("sceneC", "Overall", 0.90, 0.88, 0.70, 1.30, 20)),
    ]
    table = build_benchmark_table(recs, ["ours"])
    cell = table.cell("ours", "Overall")
    assert cell["srcc"] == pytest.approx(0.78)
    assert cell["plcc"] == pytest.approx(0.78)
    assert cell["krcc"] == pytest.approx(0.59)
    assert cell["mae"] == pytest.approx(1.12)
    text = table.to_text()
    row = [l for l in text.splitlines() if l.startswith("ours")][0]
    for val in ("0.78", "0.59", "1.12"):
        assert val in row
    ok(10, "benchmark table renders the reference Overall row "
           "SRCC 0.78 / PLCC 0.78 / KRCC 0.59 / MAE 1.12")
