"""Three-phase detector: zone gating, in-zone sliding window, suppression and merging."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import AnnotatedFrame, crop_resize, grid_partition, to_network_input
from .errors import ConfigError
from .geometry import BoundingBox, iou_matrix, union_box


@dataclass
class PipelineConfig:
    tau_z: float = 0.5
    tau_p: float = 0.5
    window: int = 16
    stride: int = 5
    nms_iou: float = 0.5
    merge_window: int = 32
    merge_iou: float = 0.2
    grid: int = 4
    window_sizes: tuple | None = None       # optional multi-size scan; defaults to (window,)
    batch_size: int = 128
    threads: int = 1
    merge: bool = True

    def validate(self):
        # tau values outside (0, 1) are accepted: 0 disables a gate, > 1 closes it
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.window < 1 or self.merge_window < 1:
            raise ConfigError("window sizes must be >= 1")
        if not 0 < self.nms_iou <= 1 or not 0 < self.merge_iou <= 1:
            raise ConfigError("IOU thresholds must lie in (0, 1]")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self

    @property
    def scan_sizes(self) -> tuple:
        return tuple(self.window_sizes) if self.window_sizes else (self.window,)


@dataclass(frozen=True)
class PotentialZone:
    rect: BoundingBox
    confidence: float
    index: tuple                            # (row, col)


@dataclass(eq=False)
class Detection:
    box: BoundingBox                        # carries the score
    zones: frozenset = frozenset()          # contributing (row, col) zone indices
    merged: bool = False

    @property
    def score(self) -> float:
        return self.box.score

    def to_json(self) -> dict:
        return self.box.to_json()


@dataclass
class PipelineTrace:
    seek_ms: float = 0.0
    find_ms: float = 0.0
    nms_merge_ms: float = 0.0
    zones_evaluated: int = 0
    zones_kept: int = 0
    cp_calls: int = 0                       # find-phase classifier invocations
    cp_calls_dense: int = 0                 # same scan over every cell, i.e. with gating off
    cp_calls_merge: int = 0                 # boundary windows scored while merging
    candidates: int = 0
    after_zone_nms: int = 0
    after_merge: int = 0
    detections: int = 0
    kept_indices: tuple = ()                # retained (row, col) cells

    @property
    def total_ms(self) -> float:
        return self.seek_ms + self.find_ms + self.nms_merge_ms

    def counters(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if not k.endswith("_ms")}

    def to_json(self) -> dict:
        return {"seek_ms": round(self.seek_ms, 3), "find_ms": round(self.find_ms, 3),
                "nms_merge_ms": round(self.nms_merge_ms, 3), "zones_kept": self.zones_kept,
                "cp_calls": self.cp_calls, "cp_calls_dense": self.cp_calls_dense}


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------

def score_rects(model, image: np.ndarray, rects, batch_size: int = 128, threads: int = 1) -> np.ndarray:
    """Positive-class probability of each rect, resized to the model input.

    Rects are split into fixed chunks, so results do not depend on ``threads``.
    """
    if not rects:
        return np.zeros(0)
    chunks = [rects[i: i + batch_size] for i in range(0, len(rects), batch_size)]

    def run(chunk):
        return model.predict_proba(to_network_input(crop_resize(image, chunk)), batch_size=batch_size)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts)


def window_positions(lo: int, extent: int, window: int, stride: int) -> list:
    """Stride-aligned starts along one axis, plus the start flush with the far edge."""
    if extent <= window:
        return [lo]
    pos = list(range(lo, lo + extent - window + 1, stride))
    if pos[-1] != lo + extent - window:
        pos.append(lo + extent - window)
    return pos


def window_count(extent: int, window: int, stride: int) -> int:
    """Closed form of ``len(window_positions(...))``."""
    if extent <= window:
        return 1
    return math.ceil((extent - window) / stride + 1)


def zone_windows(zone: BoundingBox, sizes, stride: int) -> list:
    rects = []
    for size in sizes:
        if zone.w < size or zone.h < size:
            rects.append(BoundingBox(int(zone.x), int(zone.y), int(zone.w), int(zone.h)))
            continue
        for y in window_positions(int(zone.y), int(zone.h), size, stride):
            for x in window_positions(int(zone.x), int(zone.w), size, stride):
                rects.append(BoundingBox(x, y, size, size))
    return rects


# --------------------------------------------------------------------------
# phases
# --------------------------------------------------------------------------

def score_zones(frame: AnnotatedFrame, zone_model, cfg: PipelineConfig) -> list:
    """Every grid cell with its zone-classifier confidence."""
    cells = grid_partition(frame.width, frame.height, cfg.grid)
    conf = score_rects(zone_model, frame.image, cells, cfg.batch_size, cfg.threads)
    return [PotentialZone(c, float(p), divmod(k, cfg.grid)) for k, (c, p) in enumerate(zip(cells, conf))]


def seek(frame: AnnotatedFrame, zone_model, cfg: PipelineConfig) -> list:
    """Cells whose confidence reaches ``tau_z``."""
    return [z for z in score_zones(frame, zone_model, cfg) if z.confidence >= cfg.tau_z]


def find(zone: PotentialZone, frame: AnnotatedFrame, ped_model, cfg: PipelineConfig) -> list:
    """Sliding-window candidates inside one zone (score >= ``tau_p``)."""
    rects = zone_windows(zone.rect, cfg.scan_sizes, cfg.stride)
    scores = score_rects(ped_model, frame.image, rects, cfg.batch_size, cfg.threads)
    return [Detection(r.with_score(float(s)), frozenset([zone.index]))
            for r, s in zip(rects, scores) if s >= cfg.tau_p]


def _box(d) -> BoundingBox:
    return d.box if isinstance(d, Detection) else d


def _order_key(d):
    b = _box(d)
    return (-b.score, b.x, b.y)


def nms(candidates, iou_threshold: float = 0.5) -> list:
    """Greedy suppression, highest score first (ties: smaller x, then smaller y).

    Accepts Detections or scored BoundingBoxes.
    """
    dets = sorted(candidates, key=_order_key)
    if len(dets) <= 1:
        return dets
    boxes = [_box(d) for d in dets]
    m = iou_matrix(boxes, boxes)
    alive = np.ones(len(dets), dtype=bool)
    keep = []
    for i in range(len(dets)):
        if not alive[i]:
            continue
        keep.append(dets[i])
        alive &= m[i] < iou_threshold
    return keep


def _adjacent_pairs(indices) -> list:
    s = set(indices)
    pairs = []
    for (r, c) in sorted(s):
        if (r, c + 1) in s:
            pairs.append(((r, c), (r, c + 1)))
        if (r + 1, c) in s:
            pairs.append(((r, c), (r + 1, c)))
    return pairs


def _centres(lo: int, extent: int, stride: int) -> list:
    c = list(range(lo, lo + extent + 1, stride))
    if c[-1] != lo + extent:
        c.append(lo + extent)
    return c


def boundary_windows(a: BoundingBox, b: BoundingBox, size: int, stride: int, frame_w: int, frame_h: int) -> list:
    """size x size windows whose centre slides along the edge shared by cells ``a`` and ``b``.

    Windows are shifted inside the frame where the centre is too close to
    the border; duplicates produced by that shift are dropped.
    """
    size = min(size, frame_w, frame_h)
    half = size // 2
    if a.x2 == b.x:                         # vertical edge
        x = int(np.clip(b.x - half, 0, frame_w - size))
        starts = [(x, int(np.clip(c - half, 0, frame_h - size))) for c in _centres(int(a.y), int(a.h), stride)]
    elif a.y2 == b.y:                       # horizontal edge
        y = int(np.clip(b.y - half, 0, frame_h - size))
        starts = [(int(np.clip(c - half, 0, frame_w - size)), y) for c in _centres(int(a.x), int(a.w), stride)]
    else:
        raise ValueError("cells do not share an edge")
    return [BoundingBox(x, y, size, size) for x, y in dict.fromkeys(starts)]


def merge_cross_zone(zones, per_zone: dict, frame: AnnotatedFrame, ped_model, cfg: PipelineConfig,
                     trace: PipelineTrace | None = None) -> list:
    """Union part-boxes of one figure that were found in edge-adjacent zones.

    For each adjacent pair, boundary windows overlapping a box on both sides
    (IOU >= ``merge_iou``) are scored; every positive window fuses its best
    box from each side into their rectangular union.
    """
    dets = [d for idx in sorted(per_zone) for d in per_zone[idx]]
    cells = {z.index: z.rect for z in zones}
    for ia, ib in _adjacent_pairs(cells):
        side_a = [d for d in dets if ia in d.zones and ib not in d.zones]
        side_b = [d for d in dets if ib in d.zones and ia not in d.zones]
        if not side_a or not side_b:
            continue
        windows = boundary_windows(cells[ia], cells[ib], cfg.merge_window, cfg.stride, frame.width, frame.height)
        ova = iou_matrix(windows, [d.box for d in side_a])
        ovb = iou_matrix(windows, [d.box for d in side_b])
        useful = [k for k in range(len(windows)) if ova[k].max() >= cfg.merge_iou and ovb[k].max() >= cfg.merge_iou]
        if not useful:
            continue
        scores = score_rects(ped_model, frame.image, [windows[k] for k in useful], cfg.batch_size, cfg.threads)
        if trace is not None:
            trace.cp_calls_merge += len(useful)
        for k, s in zip(useful, scores):
            if s < cfg.tau_p:
                continue
            if not side_a or not side_b:
                break
            wa = iou_matrix([windows[k]], [d.box for d in side_a])[0]
            wb = iou_matrix([windows[k]], [d.box for d in side_b])[0]
            ja, jb = int(np.argmax(wa)), int(np.argmax(wb))
            if wa[ja] < cfg.merge_iou or wb[jb] < cfg.merge_iou:
                continue
            da, db = side_a[ja], side_b[jb]
            fused = Detection(union_box(da.box, db.box, max(da.score, db.score)), da.zones | db.zones, True)
            dets = [d for d in dets if d is not da and d is not db] + [fused]
            side_a = [d for d in side_a if d is not da]
            side_b = [d for d in side_b if d is not db]
    return dets


def dense_window_count(frame_w: int, frame_h: int, cfg: PipelineConfig) -> int:
    """Find-phase classifier calls if every cell were scanned."""
    return sum(len(zone_windows(c, cfg.scan_sizes, cfg.stride)) for c in grid_partition(frame_w, frame_h, cfg.grid))


def detect(frame: AnnotatedFrame, zone_model, ped_model, cfg: PipelineConfig | None = None):
    """Seek, find in each retained zone, per-zone NMS, cross-zone merge, global NMS."""
    cfg = (cfg or PipelineConfig()).validate()
    trace = PipelineTrace()
    t0 = time.perf_counter()
    zones = seek(frame, zone_model, cfg)
    t1 = time.perf_counter()
    trace.zones_evaluated = cfg.grid * cfg.grid
    trace.zones_kept = len(zones)
    trace.kept_indices = tuple(z.index for z in zones)
    trace.cp_calls_dense = dense_window_count(frame.width, frame.height, cfg)

    # batch all zones' windows together; chunking is fixed by window order
    rects, owner = [], []
    for z in zones:
        zr = zone_windows(z.rect, cfg.scan_sizes, cfg.stride)
        rects += zr
        owner += [z.index] * len(zr)
    scores = score_rects(ped_model, frame.image, rects, cfg.batch_size, cfg.threads)
    trace.cp_calls = len(rects)
    per_zone = {z.index: [] for z in zones}
    for r, s, idx in zip(rects, scores, owner):
        if s >= cfg.tau_p:
            per_zone[idx].append(Detection(r.with_score(float(s)), frozenset([idx])))
    trace.candidates = sum(len(v) for v in per_zone.values())
    t2 = time.perf_counter()

    per_zone = {idx: nms(c, cfg.nms_iou) for idx, c in per_zone.items()}
    trace.after_zone_nms = sum(len(v) for v in per_zone.values())
    if cfg.merge:
        merged = merge_cross_zone(zones, per_zone, frame, ped_model, cfg, trace)
    else:
        merged = [d for idx in sorted(per_zone) for d in per_zone[idx]]
    trace.after_merge = len(merged)
    final = nms(merged, cfg.nms_iou)
    trace.detections = len(final)
    t3 = time.perf_counter()
    trace.seek_ms = 1000 * (t1 - t0)
    trace.find_ms = 1000 * (t2 - t1)
    trace.nms_merge_ms = 1000 * (t3 - t2)
    return final, trace


def detection_record(image: str, detections, trace: PipelineTrace | None = None) -> dict:
    rec = {"image": image, "detections": [d.to_json() for d in detections]}
    if trace is not None:
        rec["trace"] = trace.to_json()
    return rec


def write_detections(path, records, include_timing: bool = True):
    """JSON Lines, one frame per line; timing fields dropped if ``include_timing`` is False."""
    with open(path, "w") as fh:
        for rec in records:
            if not include_timing and "trace" in rec:
                rec = dict(rec, trace={k: v for k, v in rec["trace"].items() if not k.endswith("_ms")})
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
