"""Miss rate, per-stage recall, stride sweep and timing breakdown."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import grid_partition
from .detection import Detection, PipelineConfig, detect
from .geometry import BoundingBox, intersection_area, iou, iou_matrix

__all__ = [
    "iou", "EvalReport", "match_and_score", "height_categories", "category_miss_rates",
    "run_pipeline", "stage_recall", "SweepPoint", "stride_sweep", "write_sweep",
    "timing_breakdown", "REFERENCE",
]

# published figures, kept for reports only (hardware and data bound)
REFERENCE = {
    "phase1_recall": 93.04,
    "final_recall": 88.01,
    "seek_ms": 7.2,
    "find_ms": 40.7,
    "total_ms": 52.0,
    "mr": {"DNC": (25.39, 28.77, 31.43), "googleNet": (21.49, 25.93, 28.58), "SaYwF": (18.11, 23.78, 27.33)},
    "fps": {"DNC": (15, 7, 10), "googleNet": (21, 10, 13), "SaYwF": (20, 8, 11)},
    "datasets": ("CPD", "CityPersons", "ISIPD"),
}


@dataclass
class EvalReport:
    tp: int
    fn: int
    fp: int
    frames: int
    matches: list = field(default_factory=list)     # (frame, det index, gt index, iou)
    stage: dict = field(default_factory=dict)

    @property
    def recall(self) -> float:
        n = self.tp + self.fn
        return 100.0 * self.tp / n if n else 100.0

    @property
    def miss_rate(self) -> float:
        n = self.tp + self.fn
        return 100.0 * self.fn / n if n else 0.0

    @property
    def fppi(self) -> float:
        return self.fp / self.frames if self.frames else 0.0

    def summary(self) -> dict:
        out = {"miss_rate": round(self.miss_rate, 4), "recall": round(self.recall, 4),
               "fppi": round(self.fppi, 4), "tp": self.tp, "fn": self.fn, "fp": self.fp,
               "frames": self.frames}
        out.update({k: round(v, 4) for k, v in self.stage.items()})
        return out

    def write_csv(self, path):
        s = self.summary()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(s))
            w.writerow(list(s.values()))


def _as_box(d) -> BoundingBox:
    return d.box if isinstance(d, Detection) else d


def _match_frame(dets, gts, iou_min):
    """Greedy matching; returns [(det index, gt index, iou)]."""
    if not dets or not gts:
        return []
    boxes = [_as_box(d) for d in dets]
    order = sorted(range(len(boxes)), key=lambda i: (-(boxes[i].score or 0.0), boxes[i].x, boxes[i].y))
    m = iou_matrix(boxes, list(gts))
    free = np.ones(len(gts), dtype=bool)
    pairs = []
    for i in order:
        cand = np.where(free, m[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_min:
            free[j] = False
            pairs.append((i, j, float(m[i, j])))
    return pairs


def match_and_score(detections, ground_truth, iou_min: float = 0.5) -> EvalReport:
    """Per-frame lists of detections and ground-truth boxes -> counts.

    A detection hits when IOU >= ``iou_min`` against a still-unmatched GT box;
    detections are visited by descending score, ties by (x, y).
    """
    if len(detections) != len(ground_truth):
        raise ValueError("detections and ground truth must cover the same frames")
    tp = fn = fp = 0
    matches = []
    for f, (dets, gts) in enumerate(zip(detections, ground_truth)):
        pairs = _match_frame(list(dets), list(gts), iou_min)
        tp += len(pairs)
        fn += len(gts) - len(pairs)
        fp += len(dets) - len(pairs)
        matches += [(f, i, j, v) for i, j, v in pairs]
    return EvalReport(tp, fn, fp, len(detections), matches)


def height_categories(ground_truth, edges=None) -> tuple:
    """Near/Medium/Far labels by GT height; default edges are the height terciles.

    Taller boxes are nearer. Returns (labels per frame, (low edge, high edge)).
    """
    heights = np.array([b.h for gts in ground_truth for b in gts], dtype=float)
    if edges is None:
        edges = tuple(np.quantile(heights, [1 / 3, 2 / 3])) if heights.size else (0.0, 0.0)
    lo, hi = edges

    def cat(h):
        return "far" if h < lo else ("medium" if h < hi else "near")

    return [[cat(b.h) for b in gts] for gts in ground_truth], (float(lo), float(hi))


def category_miss_rates(detections, ground_truth, iou_min: float = 0.5, edges=None) -> dict:
    labels, _ = height_categories(ground_truth, edges)
    rep = match_and_score(detections, ground_truth, iou_min)
    hit = {(f, j) for f, _, j, _ in rep.matches}
    out = {}
    for name in ("near", "medium", "far"):
        idx = [(f, j) for f, lab in enumerate(labels) for j, c in enumerate(lab) if c == name]
        if idx:
            out[name] = 100.0 * sum((f, j) not in hit for f, j in idx) / len(idx)
    return out


def run_pipeline(frames, zone_model, ped_model, cfg: PipelineConfig | None = None):
    """detect() over frames; returns (detections per frame, traces)."""
    cfg = cfg or PipelineConfig()
    dets, traces = [], []
    for fr in frames:
        d, t = detect(fr, zone_model, ped_model, cfg)
        dets.append(d)
        traces.append(t)
    return dets, traces


def _reach(frames, traces, grid):
    """Per GT box: (touched cells all kept, at least one touched cell kept)."""
    strict = relaxed = total = 0
    for fr, tr in zip(frames, traces):
        cells = grid_partition(fr.width, fr.height, grid)
        kept = set(tr.kept_indices)
        for b in fr.boxes:
            touched = {divmod(k, grid) for k, c in enumerate(cells) if intersection_area(b, c) > 0}
            total += 1
            strict += touched <= kept
            relaxed += bool(touched & kept)
    return strict, relaxed, total


def stage_recall(frames, zone_model, ped_model, cfg: PipelineConfig | None = None, iou_min: float = 0.5,
                 results=None) -> EvalReport:
    """Evaluate with phase-I (strict and relaxed) and final recall filled in ``stage``.

    ``results`` may carry a prior ``run_pipeline`` output to avoid re-running.
    """
    cfg = cfg or PipelineConfig()
    dets, traces = results if results is not None else run_pipeline(frames, zone_model, ped_model, cfg)
    rep = match_and_score(dets, [fr.boxes for fr in frames], iou_min)
    strict, relaxed, total = _reach(frames, traces, cfg.grid)
    rep.stage = {
        "phase1_recall": 100.0 * strict / total if total else 100.0,
        "phase1_recall_relaxed": 100.0 * relaxed / total if total else 100.0,
        "final_recall": rep.recall,
    }
    return rep


@dataclass
class SweepPoint:
    stride: int
    miss_rate: float
    windows_per_frame: float
    ms_per_frame: float
    fppi: float = 0.0

    @property
    def fps(self) -> float:
        return 1000.0 / self.ms_per_frame if self.ms_per_frame > 0 else float("inf")


def stride_sweep(frames, zone_model, ped_model, strides, cfg: PipelineConfig | None = None) -> list:
    """Run detect at each stride; wall time covers the whole detect call."""
    base = cfg or PipelineConfig()
    gts = [fr.boxes for fr in frames]
    points = []
    for s in strides:
        c = PipelineConfig(**{**base.__dict__, "stride": int(s)})
        t0 = time.perf_counter()
        dets, traces = run_pipeline(frames, zone_model, ped_model, c)
        ms = 1000 * (time.perf_counter() - t0) / max(len(frames), 1)
        rep = match_and_score(dets, gts)
        points.append(SweepPoint(int(s), rep.miss_rate, float(np.mean([t.cp_calls for t in traces])), ms, rep.fppi))
    return points


def _normalize(v: np.ndarray) -> np.ndarray:
    span = v.max() - v.min()
    return (v - v.min()) / span if span > 0 else np.zeros_like(v)


def write_sweep(points, out_dir, stem: str = "stride_sweep") -> dict:
    """CSV, gnuplot columns and an SVG of the normalized MR/FPS curves."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mr = np.array([p.miss_rate for p in points], dtype=float)
    fps = np.array([p.fps for p in points], dtype=float)
    mr_n, fps_n = _normalize(mr), _normalize(fps)
    header = ["stride", "miss_rate", "fps", "ms_per_frame", "windows_per_frame", "fppi", "mr_norm", "fps_norm"]
    rows = [[p.stride, round(p.miss_rate, 4), round(p.fps, 4), round(p.ms_per_frame, 3),
             round(p.windows_per_frame, 3), round(p.fppi, 4), round(a, 4), round(b, 4)]
            for p, a, b in zip(points, mr_n, fps_n)]
    paths = {"csv": out / f"{stem}.csv", "dat": out / f"{stem}.dat", "svg": out / f"{stem}.svg"}
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    with open(paths["dat"], "w") as fh:
        fh.write("# " + " ".join(header) + "\n")
        for r in rows:
            fh.write(" ".join(str(v) for v in r) + "\n")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    strides = [p.stride for p in points]
    ax.plot(strides, mr_n, "o-", label="MR (normalized)")
    ax.plot(strides, fps_n, "s-", label="FPS (normalized)")
    ax.set_xlabel("stride")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(paths["svg"], format="svg", metadata={"Date": None})
    plt.close(fig)
    return paths


def timing_breakdown(traces) -> dict:
    """Mean per-phase milliseconds plus gating counters."""
    if not traces:
        raise ValueError("no traces")
    seek = float(np.mean([t.seek_ms for t in traces]))
    find = float(np.mean([t.find_ms for t in traces]))
    post = float(np.mean([t.nms_merge_ms for t in traces]))
    calls = sum(t.cp_calls for t in traces)
    dense = sum(t.cp_calls_dense for t in traces)
    return {
        "seek_ms": seek,
        "find_ms": find,
        "nms_merge_ms": post,
        "total_ms": float(np.mean([t.total_ms for t in traces])),
        "find_seek_ratio": find / seek if seek > 0 else float("inf"),
        "gated_fraction": calls / dense if dense else 0.0,
        "frames": len(traces),
        "reference_ratio": REFERENCE["find_ms"] / REFERENCE["seek_ms"],
    }
