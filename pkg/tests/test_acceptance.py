"""Acceptance criteria 1-10, one pass/fail line each.

Each test records its verdict through ``report`` (printed immediately and
repeated in the terminal summary) and then asserts, so a failed criterion
also fails the suite. Criterion 8 trains the full desk ablation and takes
tens of minutes on a single CPU core.
"""

import json
import math
import random
import time

import numpy as np
import pytest
import torch

from cilcodec.buffer import (
    ExemplarRecord,
    ExemplarStore,
    MemoryBudget,
    admit,
    exemplar_cost_bits,
    herding_select,
    rebalance,
)
from cilcodec.cam import BoundingBox, CompressionMode, cam_from_features, composite, mask_to_bbox
from cilcodec.codec.model import CodecModel
from cilcodec.codec.bitstream import HEADER_BYTES, Bitstream, decode, encode, estimated_rate, measure_bpp
from cilcodec.codec.train import finetune_encoder, freeze_decoder_side, train_initial
from cilcodec.datamodel import raw_image_bits
from cilcodec.desk import make_desk_dataset, make_tiles
from cilcodec.harness import build_config, emit_plots, read_metrics_csv, run
from cilcodec.trainer import ClassifierModel, TrainConfig, herding_features, make_record, summarize, train_phase

LINES: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)


@pytest.fixture(scope="module")
def desk_codec():
    """Criterion-4 training: 50 epochs on 2000 desk tiles, then frozen."""
    t0 = time.perf_counter()
    model = train_initial(make_tiles(2000, seed=1), 16384.0, epochs=50, lr=1e-3, batch_size=8, seed=0)
    return freeze_decoder_side(model), time.perf_counter() - t0


# -- 1 -------------------------------------------------------------------------


def _record(label, bits, idx):
    payload = (bits - 96) // 8 - HEADER_BYTES
    bs = Bitstream(0, 8, 8, 32, 32, b"", bytes(payload))
    return ExemplarRecord(label, CompressionMode.FULL_COMPRESSION, 8, 8, None, bs,
                          np.zeros((0, 0, 3), np.uint8), f"{label}/{idx}")


def test_c01_budget_safety():
    rnd = random.Random(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        store = ExemplarStore(MemoryBudget(rnd.randint(0, 40_000)))
        n_cls = 0
        for _ in range(rnd.randint(1, 5)):
            if rnd.random() < 0.5:
                new = range(n_cls, n_cls + rnd.randint(1, 3))
                n_cls = new.stop
                cands = {c: [_record(c, 96 + 8 * (HEADER_BYTES + rnd.randint(0, 500)), i)
                             for i in range(rnd.randint(0, 8))] for c in new}
                budget = MemoryBudget(rnd.randint(0, 40_000))
                store = admit(store, cands, budget)
            else:
                store = rebalance(store, MemoryBudget(rnd.randint(0, 40_000)))
            used = sum(exemplar_cost_bits(r) for r in store.all_records())
            worst = max(worst, used / max(store.budget.total_bits, 1))
            if used > store.budget.total_bits or used != store.used_bits:
                report(1, False, f"store used {used} bits over budget {store.budget.total_bits}")
                pytest.fail("budget exceeded")
    secs = time.perf_counter() - t0
    ok = secs < 10
    report(1, ok, f"1000 random admit/rebalance sequences within budget; max fill {worst:.3f}; {secs:.1f}s (< 10s)")
    assert ok


# -- 2 -------------------------------------------------------------------------


@pytest.mark.slow
def test_c02_backward_compatibility(desk_codec):
    codec, _ = desk_codec
    train, _ = make_desk_dataset(10, 80, 1, seed=21)
    idx = np.random.default_rng(2).permutation(len(train))
    originals = [train[i] for i in idx[:20]]
    rounds = [[train[i] for i in idx[20 + 200 * k : 20 + 200 * (k + 1)]] for k in range(3)]
    t0 = time.perf_counter()
    streams = [encode(codec, im).to_bytes() for im in originals]
    reference = [decode(codec, s) for s in streams]
    model, moved = codec, []
    for k, data in enumerate(rounds):
        before = [p.detach().clone() for p in model.encoder_parameters()]
        model = finetune_encoder(model, data, epochs=2, seed=100 + k)
        moved.append(max(float((a - b).abs().max().detach()) for a, b in zip(before, model.encoder_parameters())))
    later = [decode(model, s) for s in streams]
    same = sum(np.array_equal(a, b) for a, b in zip(reference, later))
    secs = time.perf_counter() - t0
    ok = same == 20 and all(m > 0 for m in moved) and secs < 300
    report(2, ok, f"{same}/20 decodes pixel-identical after 3 encoder fine-tunes "
                  f"(max encoder weight change per round {', '.join(f'{m:.1e}' for m in moved)}); {secs:.0f}s")
    assert ok


# -- 3 -------------------------------------------------------------------------


@pytest.mark.slow
def test_c03_rate_consistency(desk_codec):
    codec, _ = desk_codec
    images, _ = make_desk_dataset(10, 5, 1, seed=31)
    worst, bad = 0.0, 0
    for im in images[:50]:
        actual = encode(codec, im).payload_bits
        est = estimated_rate(codec, im.pixels)
        slack = abs(actual - est) - (0.05 * est + 64)
        worst = max(worst, abs(actual - est) / est)
        bad += slack > 0
    ok = bad == 0
    report(3, ok, f"50 images, {bad} outside 5% + 64 bits; worst relative gap {100 * worst:.2f}%")
    assert ok


# -- 4 -------------------------------------------------------------------------


@pytest.mark.slow
def test_c04_compression_gain(desk_codec):
    codec, secs = desk_codec
    held_out = make_tiles(100, seed=2)
    bpps, psnrs = [], []
    for im in held_out:
        bs = encode(codec, im)
        rec = decode(codec, bs).astype(np.float64)
        mse = np.mean((rec - im.pixels.astype(np.float64)) ** 2)
        bpps.append(measure_bpp(bs))
        psnrs.append(10 * math.log10(255.0**2 / mse))
    bpp, psnr = float(np.mean(bpps)), float(np.mean(psnrs))
    ok = bpp < 8.0 and psnr > 25.0
    report(4, ok, f"held-out tiles: {bpp:.3f} bpp (< 8), {psnr:.2f} dB PSNR (> 25); codec trained in {secs:.0f}s")
    assert ok


# -- 5 -------------------------------------------------------------------------


def _herding_oracle(features, m):
    n, d = len(features), len(features[0])
    mu = [sum(f[j] for f in features) / n for j in range(d)]
    chosen, acc = [], [0.0] * d
    for k in range(1, m + 1):
        best, best_d = None, None
        for i in range(n):
            if i in chosen:
                continue
            dist = math.sqrt(sum((mu[j] - (acc[j] + features[i][j]) / k) ** 2 for j in range(d)))
            if best_d is None or dist < best_d:
                best, best_d = i, dist
        chosen.append(best)
        acc = [acc[j] + features[best][j] for j in range(d)]
    return chosen


def test_c05_herding_oracle():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    agree = 0
    for _ in range(200):
        n, d = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        m = int(rng.integers(0, n + 1))
        f = rng.normal(size=(n, d))
        agree += herding_select(f, m) == _herding_oracle(f.tolist(), m)
    secs = time.perf_counter() - t0
    ok = agree == 200 and secs < 5
    report(5, ok, f"{agree}/200 index sequences match the brute-force oracle; {secs:.2f}s (< 5s)")
    assert ok


# -- 6 -------------------------------------------------------------------------


def test_c06_cam_suite():
    checks = {}
    checks["zero weights"] = not cam_from_features(np.ones((3, 4, 4)), np.zeros((2, 3)), 1).values.any()
    two = cam_from_features(np.stack([np.ones((4, 4)), 2 * np.ones((4, 4))]), np.array([[3.0, -1.0]]), 0)
    checks["two-channel"] = np.array_equal(two.values, np.ones((4, 4)))
    f = np.random.default_rng(0).normal(size=(3, 4, 4))
    w = np.random.default_rng(1).normal(size=(2, 3))
    checks["doubling"] = np.allclose(cam_from_features(f, 2 * w, 1).values, 2 * cam_from_features(f, w, 1).values)

    def box(points, h=8, w=8):
        m = np.zeros((h, w), np.uint8)
        for x, y in points:
            m[y, x] = 1
        return mask_to_bbox(m).as_tuple()

    checks["point box"] = box([(2, 3)]) == (2, 3, 2, 3)
    checks["full box"] = mask_to_bbox(np.ones((32, 32), np.uint8)).as_tuple() == (0, 0, 31, 31)
    checks["L-shape"] = box([(1, 1), (1, 4), (3, 1)]) == (1, 1, 3, 4)
    rng = np.random.default_rng(6)
    a = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    b = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    checks["composite identity"] = np.array_equal(composite(a, b, BoundingBox.full(8, 8)), a)
    per_pixel = True
    for seed in range(20):
        r = np.random.default_rng(100 + seed)
        a = r.integers(0, 256, (8, 8, 3), dtype=np.uint8)
        b = r.integers(0, 256, (8, 8, 3), dtype=np.uint8)
        x0, x1 = sorted(r.integers(0, 8, 2))
        y0, y1 = sorted(r.integers(0, 8, 2))
        out = composite(a, b, BoundingBox(int(x0), int(y0), int(x1), int(y1)))
        for y in range(8):
            for x in range(8):
                src = a if (x0 <= x <= x1 and y0 <= y <= y1) else b
                per_pixel &= bool(np.array_equal(out[y, x], src[y, x]))
    checks["per-pixel oracle"] = per_pixel
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    report(6, ok, f"{len(checks) - len(failed)}/{len(checks)} cam examples exact" + (f"; failed {failed}" if failed else ""))
    assert ok


# -- 7 -------------------------------------------------------------------------


@pytest.mark.slow
def test_c07_capacity(desk_codec):
    codec, _ = desk_codec
    train, _ = make_desk_dataset(10, 150, 1, seed=71)
    torch.manual_seed(0)
    clf = ClassifierModel(list(range(10)), width=16)
    cfg = TrainConfig(initial_epochs=8, lr_decay_epochs=(6,), width=16)
    train_phase(clf, train, [], cfg, epochs=8, seed=0)
    budget = MemoryBudget.fixed(10 * 20, raw_image_bits(32, 32))
    by_class = {}
    for s in train:
        by_class.setdefault(s.label, []).append(s)

    def candidates(mode):
        out = {}
        for c, samples in by_class.items():
            feats, maps = herding_features(clf, [s.pixels for s in samples])
            order = herding_select(feats, len(samples))
            w = clf.head.weight.detach()

            def gen(c=c, samples=samples, order=order, maps=maps, w=w):
                for i in order:
                    cam = cam_from_features(maps[i], w, clf.classes.index(c)).values
                    yield make_record(mode, samples[i].pixels, c, codec=codec, cam_values=cam, source_id=samples[i].id)

            out[c] = gen()
        return out

    raw = admit(ExemplarStore(budget), candidates(CompressionMode.RAW))
    ours = admit(ExemplarStore(budget), candidates(CompressionMode.CAM_COMPOSITE))
    ratio = len(ours) / len(raw)
    binding = len(ours) < len(train)
    ok = ratio >= 1.5
    report(7, ok, f"cam_composite admits {len(ours)} records vs raw {len(raw)} at 200 raw-image budget "
                  f"(ratio {ratio:.2f}, need >= 1.5; mean {ours.mean_bpp():.2f} bpp; "
                  f"budget {'binding' if binding else 'not binding'} with {len(train)} candidates)")
    assert ok


# -- 8 and 9 ---------------------------------------------------------------------

ABLATION_MODES = ("cam_composite", "raw", "blank_background", "background_removal")
SEEDS = (1993, 1994, 1995)


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    """Desk CIL runs: 10 classes, 5 phases of 2, fixed 200-image budget, 30/20 epochs."""
    root = tmp_path_factory.mktemp("ablation")
    reports, outs = {}, {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        cache: dict = {}
        for mode in ABLATION_MODES:
            cfg = build_config({"seed": str(seed), "mode": mode, "out": str(root / f"{mode}_{seed}")})
            reports[(mode, seed)] = run(cfg, codec_cache=cache)
            outs[(mode, seed)] = root / f"{mode}_{seed}"
    return reports, outs, time.perf_counter() - t0


@pytest.mark.slow
def test_c08_directional_accuracy(ablation):
    reports, _, secs = ablation
    mean = {m: float(np.mean([reports[(m, s)].avg for s in SEEDS])) for m in ABLATION_MODES}
    ours = mean["cam_composite"]
    ok = (ours >= mean["raw"] - 0.01 and ours >= mean["blank_background"]
          and ours >= mean["background_removal"] and secs <= 7200)
    per_mode = ", ".join(f"{m} {100 * v:.2f}" for m, v in mean.items())
    counts = {m: reports[(m, SEEDS[0])].rows[-1].exemplar_count for m in ABLATION_MODES}
    report(8, ok, f"mean Avg over {len(SEEDS)} seeds: {per_mode}; final exemplar counts (seed {SEEDS[0]}) "
                  f"{counts}; {secs / 60:.0f} min")
    assert ok


@pytest.mark.slow
def test_c09_metrics_arithmetic(ablation):
    avg, last = summarize([0.8, 0.7, 0.6])
    arithmetic = round(avg, 2) == 0.70 and last == 0.60 and abs(avg - 0.7) < 1e-12
    reports, outs, _ = ablation
    agree = 0
    for key, rep in reports.items():
        rows = read_metrics_csv(outs[key] / "metrics.csv")
        summary = json.loads((outs[key] / "summary.json").read_text())
        series = emit_plots(rep, outs[key] / "replot")["series"][rep.mode]
        accs = [r["top1"] for r in rows]
        agree += (accs == [r.top1 for r in rep.rows]
                  and summarize(accs) == (summary["avg"], summary["last"])
                  and np.allclose(series["top1"], accs, rtol=0, atol=1e-12)
                  and np.allclose(series["mean_record_bpp"], [r["mean_record_bpp"] for r in rows], rtol=0, atol=1e-12))
    ok = arithmetic and agree == len(reports)
    report(9, ok, f"summarize([0.8,0.7,0.6]) = ({avg:.2f}, {last:.2f}); report/CSV/plot agree on {agree}/{len(reports)} runs")
    assert ok


# -- 10 ------------------------------------------------------------------------


def test_c10_determinism(tmp_path):
    values = {"desk_classes": "4", "desk_train_per_class": "30", "desk_test_per_class": "10",
              "base_classes": "2", "step_classes": "1", "budget_images": "6",
              "initial_epochs": "2", "incremental_epochs": "2", "lr_decay_epochs": "1",
              "codec_epochs": "2", "codec_finetune_epochs": "1", "mode": "cam_composite"}
    outs = []
    for k in range(2):
        run(build_config({**values, "out": str(tmp_path / f"r{k}")}))
        outs.append(tmp_path / f"r{k}")
    store_files = sorted(p.name for p in (outs[0] / "store").iterdir())
    same_store = store_files == sorted(p.name for p in (outs[1] / "store").iterdir()) and all(
        (outs[0] / "store" / n).read_bytes() == (outs[1] / "store" / n).read_bytes() for n in store_files)
    m0, m1 = read_metrics_csv(outs[0] / "metrics.csv"), read_metrics_csv(outs[1] / "metrics.csv")
    drift = max(abs(a["top1"] - b["top1"]) for a, b in zip(m0, m1))
    c0, c1 = CodecModel.load(outs[0] / "codec.npz"), CodecModel.load(outs[1] / "codec.npz")
    px = make_tiles(3, seed=99)
    same_bits = all(encode(c0, t).to_bytes() == encode(c1, t).to_bytes() for t in px)
    ok = same_store and same_bits and 100 * drift <= 0.5
    report(10, ok, f"{len(store_files)} store files byte-identical: {same_store}; bitstreams identical: {same_bits}; "
                   f"max top-1 drift {100 * drift:.2f} points (<= 0.5)")
    assert ok
