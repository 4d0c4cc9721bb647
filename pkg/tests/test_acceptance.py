"""End-to-end acceptance checks on the default synthetic set.

The full two-stream run, the primary-only ablation and the dropout sweep
each train both streams from scratch, so this module takes roughly half
an hour on one core. Set ``WMR_ACCEPTANCE_DIR`` to keep the generated
dataset and run outputs between sessions.
"""
import dataclasses
import os
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import ACCEPTANCE_LINES
from oracles import (brute_force_filter, conv2d_naive, iou_pixels, max_pool_naive, random_props,
                     roi_pool_naive)
from wmr.core import LayerParams, conv2d, max_pool2d
from wmr.gradcheck import TOLERANCE, gradient_suite
from wmr.net import FusionConfig, roi_pool
from wmr.pipeline import (ExperimentConfig, build_dataset, load_models, prepare_manifest, run_experiment,
                          train_stream)
from wmr.regions import Box, ProposalFilterConfig, ProposalSet, filter_secondary, iou
from wmr.runtime import latency_model, measure_latency

pytestmark = pytest.mark.slow


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    with threadpool_limits(limits=1):
        yield


@pytest.fixture(scope="session")
def root(tmp_path_factory):
    env = os.environ.get("WMR_ACCEPTANCE_DIR")
    if env:
        path = Path(env)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def dataset(root):
    cfg = ExperimentConfig()
    t0 = time.perf_counter()
    manifest = build_dataset(root / "data", cfg.synth)
    data = prepare_manifest(manifest, cfg)
    return cfg, data, time.perf_counter() - t0


def _timed_run(cfg, data, out):
    t0 = time.perf_counter()
    result = run_experiment(cfg, out, data=data)
    return result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def full_run(dataset, root):
    cfg, data, _ = dataset
    return _timed_run(cfg, data, root / "full")


@pytest.fixture(scope="session")
def ablation_run(dataset, root):
    cfg, data, _ = dataset
    ablated = dataclasses.replace(cfg, stream=dataclasses.replace(cfg.stream, use_secondary=False))
    return _timed_run(ablated, data, root / "primary_only")


# ------------------------------------------------------------------ 1

def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    rows = gradient_suite()
    elapsed = time.perf_counter() - t0
    worst_name, worst = max(rows, key=lambda r: r[1])
    ok = worst < TOLERANCE and elapsed < 120
    verdict(1, ok, f"{len(rows)} checks, worst {worst:.2e} ({worst_name}), {elapsed:.1f} s")


# ------------------------------------------------------------------ 2

def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(2024)
    n = 1000
    mismatches = {}

    bad = 0
    for _ in range(n):
        a, b = random_props(rng, 2, limit=40)
        inter, union = iou_pixels(a.as_tuple(), b.as_tuple(), 41)
        bad += int(iou(a, b) != inter / union)
    mismatches["iou"] = bad

    bad = 0
    for _ in range(n):
        props, primary = random_props(rng, 40), random_props(rng, 1)[0]
        expected = brute_force_filter(props, primary, 0.1, 0.9, 10) or [Box(0, 0, 64, 64)]
        got = filter_secondary(ProposalSet(props, frame_size=(64, 64)), primary, ProposalFilterConfig()).secondary
        bad += got != expected
    mismatches["filter_secondary"] = bad

    bad = 0
    for _ in range(n):
        c, h, w = (int(v) for v in rng.integers(1, 10, 3))
        fmap = rng.normal(size=(c, h, w))
        x0, y0 = int(rng.integers(0, w)), int(rng.integers(0, h))
        x1, y1 = int(rng.integers(x0 + 1, w + 1)), int(rng.integers(y0 + 1, h + 1))
        oh, ow = (int(v) for v in rng.integers(1, 5, 2))
        got = roi_pool(fmap, Box(x0, y0, x1, y1), oh, ow)
        bad += not np.array_equal(got, roi_pool_naive(fmap, x0, y0, x1, y1, oh, ow))
    mismatches["roi_pool"] = bad

    bad = 0
    for _ in range(n):
        win = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        x = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(win, 9)), int(rng.integers(win, 9))))
        bad += not np.array_equal(max_pool2d(x, win, stride), max_pool_naive(x, win, stride))
    mismatches["max_pool"] = bad

    bad = 0
    for _ in range(n):
        c, f, k = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.normal(size=(c, int(rng.integers(k, 7)), int(rng.integers(k, 7))))
        params = LayerParams(rng.normal(size=(f, c, k, k)), rng.normal(size=f))
        got = conv2d(x, params, stride, pad)
        bad += not np.allclose(got, conv2d_naive(x, params.weights, params.biases, stride, pad), rtol=0, atol=1e-10)
    mismatches["conv"] = bad

    ok = not any(mismatches.values())
    verdict(2, ok, f"{n} instances each, mismatches {mismatches}")


# ------------------------------------------------------------------ 3

def test_criterion_3_context_hypothesis(dataset, full_run, ablation_run):
    _, _, prep_s = dataset
    (full, full_s), (ablated, ablated_s) = full_run, ablation_run
    total_min = (prep_s + full_s + ablated_s) / 60
    full_acc, ablated_acc = full.accuracy["fused"], ablated.accuracy["fused"]
    ok = full_acc >= 0.90 and ablated_acc <= 0.65 and total_min <= 30
    verdict(3, ok, f"full {full_acc:.2f} (>= 0.90), primary-only {ablated_acc:.2f} (<= 0.65), "
                   f"{total_min:.1f} min (<= 30)")


# ------------------------------------------------------------------ 4

def test_criterion_4_stream_fusion_gain(full_run):
    acc = full_run[0].accuracy
    best_single = max(acc["rgb"], acc["flow"])
    ok = acc["fused"] >= best_single - 0.01 and acc["fused"] > acc["rgb"] and acc["fused"] > acc["flow"]
    verdict(4, ok, f"fused {acc['fused']:.2f}, rgb {acc['rgb']:.2f}, flow {acc['flow']:.2f}")


# ------------------------------------------------------------------ 5

def test_criterion_5_latency(dataset, full_run, root):
    cfg, data, _ = dataset
    models = load_models(root / "full", cfg)
    report = measure_latency(models["rgb"], models["flow"], data["test"][0], cfg.fusion, cfg.stream)
    analytic = latency_model(30, 10)
    p95 = report.per_frame_spatial_ms.p95
    ok = (round(analytic, 4) == 0.3333 and round(report.baseline_clip_accumulation_s, 4) == 0.5333
          and report.analytic_accumulation_s < report.baseline_clip_accumulation_s and p95 < 50)
    verdict(5, ok, f"accumulation {analytic:.4f} s vs clip {report.baseline_clip_accumulation_s:.4f} s, "
                   f"spatial p95 {p95:.1f} ms (< 50)")


# ------------------------------------------------------------------ 6

def test_criterion_6_dropout_sweep(dataset, full_run, root):
    cfg, data, _ = dataset
    acc = {0.6: full_run[0].accuracy["fused"]}
    for ratio in (0.5, 0.9):
        point = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, dropout_ratio=ratio))
        acc[ratio] = run_experiment(point, root / f"dropout_{ratio}", data=data).accuracy["fused"]
    best = max(acc[0.5], acc[0.6])
    ok = acc[0.9] <= best - 0.10
    verdict(6, ok, f"fused accuracy 0.5: {acc[0.5]:.2f}, 0.6: {acc[0.6]:.2f}, 0.9: {acc[0.9]:.2f} "
                   f"(needs <= {best - 0.10:.2f})")


# ------------------------------------------------------------------ 7

def test_criterion_7_loss_ledger(dataset, full_run, root):
    import csv

    cfg, data, _ = dataset
    rows = list(csv.DictReader(open(root / "full" / "loss.csv", encoding="utf-8")))
    exact = all(float(r["total"]) == float(r["cls"]) + 0.3 * float(r["reg"]) and float(r["alpha"]) == 0.3
                for r in rows)

    small = dataclasses.replace(cfg, fusion=FusionConfig(alpha=0.0),
                                train=dataclasses.replace(cfg.train, max_iterations=15))
    identical = True
    for stream in ("rgb", "flow"):
        with_reg, _ = train_stream(data["train"][:8], stream, small)
        without, _ = train_stream(data["train"][:8], stream,
                                  dataclasses.replace(small, use_regression=False))
        for (name, a), (_, b) in zip(with_reg.named_layers(), without.named_layers()):
            if name != "bbox":
                identical &= a.params.weights.tobytes() == b.params.weights.tobytes()
                identical &= a.params.biases.tobytes() == b.params.biases.tobytes()
    ok = exact and identical and len(rows) > 0
    verdict(7, ok, f"{len(rows)} logged steps exact: {exact}; alpha=0 bitwise equal to cls-only: {identical}")


# ------------------------------------------------------------------ 8

def test_criterion_8_determinism(dataset, root):
    cfg, data, _ = dataset
    subset = {"train": data["train"][:16], "test": data["test"][:16]}
    small = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, max_iterations=40))
    files = ("metrics.json", "loss.csv", "accuracy.csv")
    outs = []
    for k in range(2):
        run_experiment(small, root / f"determinism_{k}", data=subset)
        outs.append({f: (root / f"determinism_{k}" / f).read_bytes() for f in files})
    ok = outs[0] == outs[1]
    verdict(8, ok, f"{', '.join(files)} identical across two runs: {ok}")
