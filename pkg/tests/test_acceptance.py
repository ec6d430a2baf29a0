"""Every acceptance criterion at its stated tolerance, one PASS/FAIL line each.

The desk-scale fixture trains both classifiers once (about 20 minutes on a
single core) and is shared by the detection, gating and sweep criteria.
"""

import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import ACCEPTANCE_LINES
from oracles import conv2d_mismatches, grid_label_mismatches, linear_mismatches, maxpool_mismatches, nms_mismatches
from scenes import merge_config, red_figure_frame, red_models
from seekfind.classifiers import build_pedestrian_classifier, build_zone_classifier
from seekfind.cli import main
from seekfind.data import SynthConfig, extract_pedestrian_samples, extract_zone_samples, grid_partition, label_zones, \
    synth_generate
from seekfind.detection import PipelineConfig, detect
from seekfind.evaluation import run_pipeline, stage_recall, stride_sweep, timing_breakdown
from seekfind.gradcheck import standard_checks
from seekfind.geometry import iou
from seekfind.inception import asymmetric_pair_macs, count_params
from seekfind.training import TrainConfig, activation_stats, compare_activations, mine_hard_negatives, train

N_FRAMES, N_TEST, SWEEP_FRAMES = 2000, 100, 20


def record(n, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] {n:>2} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------- 1-4: structure and numerics

def test_c01_parameter_counts():
    t0 = time.perf_counter()
    z, p = build_zone_classifier(1.0), build_pedestrian_classifier(1.0)
    rows_z = [b for lab, b, _ in z.layer_param_table() if not lab.startswith("inception")]
    rows_p = [b for lab, b, _ in p.layer_param_table() if not lab.startswith("inception")]
    total = count_params(p)
    ok = (rows_z == [896, 196736, 196736, 514] and rows_p == [896, 1638912, 131328, 819456, 514]
          and 3.20e6 <= total <= 3.35e6)
    dt = time.perf_counter() - t0
    assert record(1, "parameter counts", ok and dt < 1, f"C_z {rows_z}, C_p {rows_p}, C_p total {total}, {dt:.2f}s")


def test_c02_asymmetric_cost():
    pairs = [asymmetric_pair_macs(c, h, w) for c in (1, 16, 64) for h, w in ((1, 1), (16, 16))]
    ok = all(3 * pair == 2 * full for pair, full in pairs)
    assert record(2, "asymmetric filter cost", ok, f"pair/full = {pairs[-1][0]}/{pairs[-1][1]}")


def test_c03_gradient_checks():
    t0 = time.perf_counter()
    res = standard_checks(seed=0)
    worst = max(res.items(), key=lambda kv: kv[1].max_rel_error)
    ok = all(r.passed(1e-4) for r in res.values()) and "inception_block" in res
    dt = time.perf_counter() - t0
    assert record(3, "gradient checks", ok and dt < 120,
                  f"{len(res)} checks, worst {worst[0]} {worst[1].max_rel_error:.2e}, {dt:.1f}s")


def test_c04_oracle_equivalence():
    t0 = time.perf_counter()
    counts = {f.__name__.replace("_mismatches", ""): f(1000) for f in
              (conv2d_mismatches, maxpool_mismatches, linear_mismatches, nms_mismatches, grid_label_mismatches)}
    dt = time.perf_counter() - t0
    ok = all(v == 0 for v in counts.values()) and dt < 300
    assert record(4, "oracle equivalence (1000 instances each)", ok, f"mismatches {counts}, {dt:.1f}s")


# ---------------------------------------------------------------- 5-7: desk-scale detector

@pytest.fixture(scope="module")
def desk():
    t0 = time.perf_counter()
    frames = synth_generate(SynthConfig(frames=N_FRAMES), seed=42)
    train_f, test_f = frames[:-N_TEST], frames[-N_TEST:]
    zone_crops = extract_zone_samples(train_f, max_positive=4000, max_negative=7200)
    cz, _ = train(build_zone_classifier(0.5, seed=1), zone_crops,
                  TrainConfig(epochs=8, lr=0.01, seed=1, clip_norm=5.0))
    # every third training frame keeps the pedestrian set near 4k crops
    ped_crops = extract_pedestrian_samples(train_f[::3], negatives_per_frame=3, positive_mode="window",
                                           jitter_per_box=1, seed=1)
    cp, _ = train(build_pedestrian_classifier(0.25, seed=2), ped_crops,
                  TrainConfig(epochs=6, lr=0.003, seed=2, flip=True, clip_norm=5.0))
    mine_f = train_f[1::3][:60]
    dets, _ = run_pipeline(mine_f, cz, cp)
    mined = mine_hard_negatives(mine_f, dets)
    cp, _ = train(cp, ped_crops + mined, TrainConfig(epochs=2, lr=0.001, seed=3, flip=True, clip_norm=5.0))
    cfg = PipelineConfig(threads=1)
    results = run_pipeline(test_f, cz, cp, cfg)
    return {"cz": cz, "cp": cp, "test": test_f, "cfg": cfg, "results": results, "mined": len(mined),
            "seconds": time.perf_counter() - t0}


def test_c05_end_to_end_detection(desk):
    rep = stage_recall(desk["test"], desk["cz"], desk["cp"], desk["cfg"], results=desk["results"])
    s = rep.stage
    ok = rep.recall >= 75 and rep.miss_rate <= 25 and s["phase1_recall_relaxed"] >= s["final_recall"]
    assert record(5, "desk-scale detection", ok,
                  f"recall {rep.recall:.2f}% MR {rep.miss_rate:.2f}% FPPI {rep.fppi:.2f}, phase-I "
                  f"{s['phase1_recall_relaxed']:.2f}% (any cell) / {s['phase1_recall']:.2f}% (all cells), "
                  f"{len(desk['test'])} held-out frames, {desk['mined']} mined negatives, "
                  f"train+eval {desk['seconds'] / 60:.1f} min")


def test_c06_gating_efficiency(desk):
    _, traces = desk["results"]
    sparse = [(fr, tr) for fr, tr in zip(desk["test"], traces)
              if sum(label_zones(fr, grid_partition(fr.width, fr.height))) <= 4]
    calls = sum(tr.cp_calls for _, tr in sparse)
    dense = sum(tr.cp_calls_dense for _, tr in sparse)
    frac = calls / dense
    worst = max(tr.cp_calls / tr.cp_calls_dense for _, tr in sparse)
    t = timing_breakdown(traces)
    assert record(6, "gating efficiency", len(sparse) > 0 and frac <= 0.40,
                  f"{len(sparse)} frames, C_p calls {calls}/{dense} = {frac:.1%} (worst frame {worst:.1%}); "
                  f"seek {t['seek_ms']:.0f} ms, find {t['find_ms']:.0f} ms per frame")


def test_c07_stride_sweep(desk):
    frames = desk["test"][:SWEEP_FRAMES]
    strides = [3, 5, 8, 12, 16]
    pts = stride_sweep(frames, desk["cz"], desk["cp"], strides, desk["cfg"])
    wins = [p.windows_per_frame for p in pts]
    ms = [p.ms_per_frame for p in pts]
    mr = [p.miss_rate for p in pts]
    windows_ok = all(a > b for a, b in zip(wins, wins[1:]))
    time_ok = all(b <= 1.10 * a for a, b in zip(ms, ms[1:]))
    rho = 0.0 if len(set(mr)) == 1 else float(spearmanr(strides, mr).statistic)
    assert record(7, "stride sweep trade-off", windows_ok and time_ok and rho >= 0,
                  f"windows {[round(w) for w in wins]}, ms {[round(m) for m in ms]}, MR {[round(m, 1) for m in mr]}, "
                  f"spearman {rho:.2f}")


# ---------------------------------------------------------------- 8: activation experiment

@pytest.fixture(scope="module")
def activation_probe():
    return np.random.default_rng(0).standard_normal((16, 3, 64, 64)).astype(np.float32)


def test_c08_selu_relu_runs(tmp_path, activation_probe):
    frames = synth_generate(SynthConfig(frames=120), seed=42)
    crops = extract_pedestrian_samples(frames, negatives_per_frame=3, positive_mode="window", seed=1)
    curves = compare_activations(lambda act: build_pedestrian_classifier(0.25, act, seed=5), crops,
                                 TrainConfig(epochs=2, lr=0.003, seed=4, clip_norm=5.0), out_dir=tmp_path)
    relu = activation_stats(build_pedestrian_classifier(1.0, "relu", seed=0), activation_probe)
    a, b = curves["selu"], curves["relu"]
    ok = (a.steps == b.steps and all(np.isfinite(a.losses)) and all(np.isfinite(b.losses))
          and (tmp_path / "loss_paired.csv").exists() and all(m > 0 for _, _, m, _ in relu))
    assert record("8a", "SELU/ReLU runs, paired curves, ReLU means > 0", ok,
                  f"final loss SELU {a.final_loss:.4f} vs ReLU {b.final_loss:.4f} over {len(a.steps)} steps; "
                  f"ReLU min layer mean {min(m for _, _, m, _ in relu):.3f}")


@pytest.mark.xfail(strict=True, reason="max-pooling shifts the inputs of later layers away from zero mean; "
                                       "see the decisions ledger")
def test_c08_selu_means(activation_probe):
    stats = activation_stats(build_pedestrian_classifier(1.0, "selu", seed=0), activation_probe)
    means = np.array([m for _, _, m, _ in stats])
    bad = int(np.sum(np.abs(means) >= 0.3))
    assert record("8b", "SELU |layer mean| < 0.3 at every layer", bad == 0,
                  f"{bad}/{len(means)} layers outside, max |mean| {np.abs(means).max():.2f}, "
                  f"first layer {means[0]:.3f}")


# ---------------------------------------------------------------- 9: four-cell merge

def test_c09_merge_scenario():
    t0 = time.perf_counter()
    fr = red_figure_frame()
    gt = fr.boxes[0]
    cz, cp = red_models()
    plain, _ = detect(fr, cz, cp, merge_config(merge=False))
    merged, _ = detect(fr, cz, cp, merge_config())
    best_plain = max((iou(d.box, gt) for d in plain), default=0.0)
    best_merged = max((iou(d.box, gt) for d in merged), default=0.0)
    dt = time.perf_counter() - t0
    assert record(9, "cross-zone merge", best_merged >= 0.5 > best_plain and dt < 10,
                  f"best IOU without merge {best_plain:.2f}, with merge {best_merged:.2f}, {dt:.1f}s")


# ---------------------------------------------------------------- 10: determinism

def _cli_pipeline(root, threads):
    data, out = root / "data", root / "out"
    tiny = ["--width-z", "0.125", "--width-p", "0.125", "--threads", str(threads)]
    split = ["--data", str(data), "--test-fraction", "0.1"]
    assert main(["synth", "--frames", "60", "--out", str(data)]) == 0
    assert main(["train-zone", *split, "--split", "train", "--epochs", "2", *tiny, "--out", str(out / "z")]) == 0
    assert main(["train-ped", *split, "--split", "train", "--epochs", "2", *tiny, "--out", str(out / "p")]) == 0
    return data, out, tiny, split


def _detect_bytes(data, out, tiny, split, threads, name):
    weights = ["--weights-z", str(out / "z" / "weights_z.bin"), "--weights-p", str(out / "p" / "weights_p.bin")]
    args = [*split, "--split", "test", *weights, *tiny[:-1], str(threads), "--tau-z", "0.2", "--no-timing"]
    assert main(["detect", *args, "--out", str(out / name)]) == 0
    return (out / name / "detections.jsonl").read_bytes()


def test_c10_determinism(tmp_path):
    runs = []
    for k in range(2):
        data, out, tiny, split = _cli_pipeline(tmp_path / f"run{k}", threads=1)
        runs.append(_detect_bytes(data, out, tiny, split, 1, "d1"))
    threaded = _detect_bytes(data, out, tiny, split, 4, "d4")
    n = sum(line.count(b'"score"') for line in runs[0].splitlines())
    ok = runs[0] == runs[1] == threaded and n > 0
    assert record(10, "determinism", ok, f"{len(runs[0])} bytes, {n} detections; identical across two runs "
                                         f"and threads 1/4: {runs[0] == runs[1] == threaded}")
