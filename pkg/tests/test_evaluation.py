import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import StubModel
from scenes import red_figure_frame, red_models
from seekfind.data import SynthConfig, synth_generate
from seekfind.detection import Detection, PipelineConfig, PipelineTrace
from seekfind.evaluation import (SweepPoint, category_miss_rates, height_categories, match_and_score, run_pipeline,
                                 stage_recall, stride_sweep, timing_breakdown, write_sweep)
from seekfind.geometry import BoundingBox


def test_perfect_and_empty():
    gt = [[BoundingBox(0, 0, 10, 20), BoundingBox(40, 0, 10, 20)]]
    dets = [[b.with_score(0.9) for b in gt[0]]]
    rep = match_and_score(dets, gt)
    assert rep.miss_rate == 0 and rep.fppi == 0 and rep.tp == 2
    rep = match_and_score([[]], gt)
    assert rep.miss_rate == 100 and rep.recall == 0


def test_one_hit_one_false_positive():
    gt = [[BoundingBox(0, 0, 10, 20), BoundingBox(40, 0, 10, 20)]]
    dets = [[BoundingBox(1, 0, 10, 20, 0.9), BoundingBox(100, 100, 10, 20, 0.8)]]
    rep = match_and_score(dets, gt)
    assert rep.miss_rate == 50 and rep.fppi == 1 and rep.fp == 1


def test_each_truth_matched_once():
    gt = [[BoundingBox(0, 0, 10, 20)]]
    dets = [[BoundingBox(0, 0, 10, 20, 0.7), BoundingBox(0, 1, 10, 20, 0.9)]]
    rep = match_and_score(dets, gt)
    assert rep.tp == 1 and rep.fp == 1
    assert rep.matches == [(0, 1, 0, pytest.approx(19 / 21))]


def test_detections_accepted_as_wrapped_or_plain():
    gt = [[BoundingBox(0, 0, 10, 20)]]
    d = BoundingBox(0, 0, 10, 20, 0.9)
    assert match_and_score([[Detection(d)]], gt).tp == match_and_score([[d]], gt).tp == 1
    with pytest.raises(ValueError):
        match_and_score([[d]], gt * 2)


boxes = st.builds(lambda x, y, s: BoundingBox(x, y, 10, 20, s / 10), st.integers(0, 50), st.integers(0, 50),
                  st.integers(0, 10))


@given(st.lists(st.tuples(st.lists(boxes, max_size=5), st.lists(boxes, max_size=4)), min_size=1, max_size=4),
       st.randoms(use_true_random=False))
def test_rates_are_complementary_and_order_free(frames, rnd):
    dets = [d for d, _ in frames]
    gts = [g for _, g in frames]
    rep = match_and_score(dets, gts)
    if rep.tp + rep.fn:
        assert rep.miss_rate + rep.recall == pytest.approx(100)
    shuffled = [rnd.sample(d, len(d)) for d in dets]
    again = match_and_score(shuffled, gts)
    assert (again.tp, again.fn, again.fp) == (rep.tp, rep.fn, rep.fp)


def test_height_categories():
    gts = [[BoundingBox(0, 0, 5, h)] for h in (10, 20, 30, 40, 50, 60)]
    labels, (lo, hi) = height_categories(gts)
    assert [l[0] for l in labels] == ["far", "far", "medium", "medium", "near", "near"]
    rates = category_miss_rates([[b[0].with_score(1)] if b[0].h > 35 else [] for b in gts], gts)
    assert rates == {"near": 0.0, "medium": 50.0, "far": 100.0}


def test_stage_recall_with_gate_open():
    fr = red_figure_frame()
    cz = StubModel(lambda x: np.zeros(len(x)))
    _, cp = red_models()
    rep = stage_recall([fr], cz, cp, PipelineConfig(tau_z=0.0))
    assert rep.stage["phase1_recall"] == rep.stage["phase1_recall_relaxed"] == 100.0
    assert rep.stage["final_recall"] == rep.recall == 100.0


def test_stage_recall_gate_closed():
    fr = red_figure_frame()
    cz = StubModel(lambda x: np.zeros(len(x)))
    _, cp = red_models()
    rep = stage_recall([fr], cz, cp, PipelineConfig(tau_z=0.5))
    assert rep.stage["phase1_recall_relaxed"] == 0 and rep.recall == 0 and rep.fp == 0


def test_sweep_outputs(tmp_path):
    frames = synth_generate(SynthConfig(frames=2), seed=1)
    cz = StubModel(lambda x: np.ones(len(x)))
    cp = StubModel(lambda x: np.zeros(len(x)))
    pts = stride_sweep(frames, cz, cp, [8, 16], PipelineConfig())
    assert [p.stride for p in pts] == [8, 16]
    assert pts[0].windows_per_frame > pts[1].windows_per_frame
    assert all(p.miss_rate == 100 for p in pts)
    paths = write_sweep(pts, tmp_path)
    rows = list(csv.DictReader(open(paths["csv"])))
    assert [int(r["stride"]) for r in rows] == [8, 16]
    assert {float(r["mr_norm"]) for r in rows} == {0.0}
    assert paths["svg"].read_text().lstrip().startswith("<?xml")
    assert paths["dat"].read_text().startswith("# stride")


def test_sweep_point_fps():
    assert SweepPoint(5, 10.0, 100.0, 50.0).fps == 20.0


def test_timing_breakdown_sums():
    traces = [PipelineTrace(seek_ms=2, find_ms=6, nms_merge_ms=1, cp_calls=10, cp_calls_dense=40),
              PipelineTrace(seek_ms=4, find_ms=10, nms_merge_ms=1, cp_calls=0, cp_calls_dense=40)]
    t = timing_breakdown(traces)
    assert t["seek_ms"] == 3 and t["find_ms"] == 8 and t["total_ms"] == 12
    assert t["total_ms"] == pytest.approx(t["seek_ms"] + t["find_ms"] + t["nms_merge_ms"])
    assert t["gated_fraction"] == 10 / 80 and t["find_seek_ratio"] == 8 / 3
    with pytest.raises(ValueError):
        timing_breakdown([])


def test_run_pipeline_lengths():
    frames = [red_figure_frame(), red_figure_frame(BoundingBox(200, 150, 12, 24))]
    cz, cp = red_models()
    dets, traces = run_pipeline(frames, cz, cp)
    assert len(dets) == len(traces) == 2
    assert match_and_score(dets, [f.boxes for f in frames]).recall == 100
