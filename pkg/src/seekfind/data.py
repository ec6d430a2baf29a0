"""Annotations, grid sampling, crop extraction, synthetic frames and dataset statistics."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .geometry import BoundingBox, intersection_area, iou_matrix

log = logging.getLogger(__name__)

CROP_SIZE = 64
POSITIVE, NEGATIVE = 1, 0


@dataclass
class AnnotatedFrame:
    image: np.ndarray                       # (H, W, 3) uint8
    boxes: list                             # ground-truth BoundingBox list
    source_id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3 or min(self.image.shape[:2]) < 1:
            raise DataError(f"frame {self.source_id!r}: expected (H, W, 3) raster, got {self.image.shape}")

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]


@dataclass
class LabeledCrop:
    pixels: np.ndarray                      # (64, 64, 3) uint8
    label: int                              # POSITIVE or NEGATIVE
    frame_id: str
    rect: BoundingBox


@dataclass
class CropSet:
    crops: list
    skipped: int = 0                        # frames that could not yield the requested negatives

    def __len__(self):
        return len(self.crops)

    def counts(self) -> tuple:
        pos = sum(c.label == POSITIVE for c in self.crops)
        return pos, len(self.crops) - pos

    def arrays(self) -> tuple:
        """(network input batch, integer labels)."""
        if not self.crops:
            return np.zeros((0, 3, CROP_SIZE, CROP_SIZE), np.float32), np.zeros(0, np.int64)
        px = np.stack([c.pixels for c in self.crops])
        return to_network_input(px), np.array([c.label for c in self.crops], dtype=np.int64)

    def __add__(self, other: "CropSet") -> "CropSet":
        return CropSet(self.crops + other.crops, self.skipped + other.skipped)


# --------------------------------------------------------------------------
# resizing
# --------------------------------------------------------------------------

@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bilinear weights with half-pixel centres."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    m.setflags(write=False)
    return m


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (H, W, C) or (N, H, W, C); returns float64."""
    batched = img.ndim == 4
    x = img if batched else img[None]
    my = _interp_matrix(x.shape[1], out_h)
    mx = _interp_matrix(x.shape[2], out_w)
    out = np.einsum("oh,nhwc->nowc", my, x.astype(np.float64, copy=False))
    out = np.einsum("pw,nowc->nopc", mx, out)
    return out if batched else out[0]


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def crop_resize(image: np.ndarray, rects, size: int = CROP_SIZE) -> np.ndarray:
    """Crop integer rects from ``image`` and resize each to size x size (uint8 batch)."""
    out = np.empty((len(rects), size, size, 3), dtype=np.uint8)
    groups = {}
    for k, r in enumerate(rects):
        groups.setdefault((int(r.w), int(r.h)), []).append(k)
    for (w, h), idx in groups.items():
        stack = np.stack([image[int(rects[k].y): int(rects[k].y) + h, int(rects[k].x): int(rects[k].x) + w]
                          for k in idx])
        out[idx] = _to_uint8(resize_bilinear(stack, size, size))
    return out


def to_network_input(pixels: np.ndarray) -> np.ndarray:
    """uint8 (N, 64, 64, 3) -> standardized float32 (N, 3, 64, 64)."""
    x = pixels.astype(np.float32).transpose(0, 3, 1, 2)
    return (x * np.float32(1 / 255) - np.float32(0.5)) * np.float32(4.0)


# --------------------------------------------------------------------------
# grid sampling
# --------------------------------------------------------------------------

def grid_partition(frame_w: int, frame_h: int, n: int = 4) -> list:
    """n*n rects tiling the frame in row-major order; leftovers go to the last row/column."""
    if n < 1 or frame_w < n or frame_h < n:
        raise DataError(f"cannot split a {frame_w}x{frame_h} frame into a {n}x{n} grid")
    cw, ch = frame_w // n, frame_h // n
    cells = []
    for r in range(n):
        for c in range(n):
            w = cw if c < n - 1 else frame_w - cw * (n - 1)
            h = ch if r < n - 1 else frame_h - ch * (n - 1)
            cells.append(BoundingBox(c * cw, r * ch, w, h))
    return cells


def label_zones(frame: AnnotatedFrame, cells) -> list:
    """True for cells sharing positive area with any ground-truth box."""
    return [any(intersection_area(cell, b) > 0 for b in frame.boxes) for cell in cells]


def _spread(n_avail: int, k: int) -> list:
    """k indices evenly spread over range(n_avail), in order."""
    if k >= n_avail:
        return list(range(n_avail))
    return [(i * n_avail) // k for i in range(k)]


def extract_zone_samples(frames, max_positive: int | None = None, max_negative: int | None = None,
                         ratio: tuple = (100, 180), grid: int = 4) -> CropSet:
    """Every grid cell of every frame, resized to 64x64 and labelled by :func:`label_zones`.

    Positives are capped at ``max_positive``; negatives are limited to
    ``ratio[1]/ratio[0]`` times the positive count (and ``max_negative``).
    Capped classes keep an evenly spread subset in frame order.
    """
    if not frames:
        raise DataError("extract_zone_samples: empty dataset")
    pos, neg = [], []
    for frame in frames:
        cells = grid_partition(frame.width, frame.height, grid)
        for cell, positive in zip(cells, label_zones(frame, cells)):
            (pos if positive else neg).append((frame, cell))
    n_pos = len(pos) if max_positive is None else min(len(pos), max_positive)
    n_neg = len(neg)
    if ratio is not None:
        n_neg = min(n_neg, int(round(n_pos * ratio[1] / ratio[0])))
    if max_negative is not None:
        n_neg = min(n_neg, max_negative)
    chosen = [(pos[i], POSITIVE) for i in _spread(len(pos), n_pos)]
    chosen += [(neg[i], NEGATIVE) for i in _spread(len(neg), n_neg)]
    crops = []
    for (frame, cell), label in chosen:
        px = crop_resize(frame.image, [cell])[0]
        crops.append(LabeledCrop(px, label, frame.source_id, cell))
    return CropSet(crops)


def _window_around(box: BoundingBox, size: int, frame_w: int, frame_h: int) -> BoundingBox:
    """size x size square centred on ``box`` and shifted to lie inside the frame."""
    size = min(size, frame_w, frame_h)
    cx, cy = box.center
    x = int(np.clip(round(cx - size / 2), 0, frame_w - size))
    y = int(np.clip(round(cy - size / 2), 0, frame_h - size))
    return BoundingBox(x, y, size, size)


def random_negative_rect(rng: np.random.Generator, frame_w: int, frame_h: int, size: int, gt,
                         max_iou: float = 0.2, attempts: int = 100) -> BoundingBox | None:
    """Square rect with IOU < ``max_iou`` against every ground-truth box, or None."""
    size = min(size, frame_w, frame_h)
    for _ in range(attempts):
        x = int(rng.integers(0, frame_w - size + 1))
        y = int(rng.integers(0, frame_h - size + 1))
        r = BoundingBox(x, y, size, size)
        if not gt or iou_matrix([r], gt).max() < max_iou:
            return r
    return None


def extract_pedestrian_samples(frames, negatives_per_frame: int = 4, seed: int = 0,
                               positive_mode: str = "box", window: int = 16,
                               jitter_per_box: int = 0, negative_sizes: tuple = (16,),
                               max_negative_iou: float = 0.2) -> CropSet:
    """Positive crops at ground truth, negative crops at random low-overlap rects.

    ``positive_mode="box"`` crops the ground-truth box itself;
    ``"window"`` crops the ``window``-sized square the detector would see
    around it, plus ``jitter_per_box`` shifted copies that keep IOU >= 0.5.
    A frame that cannot place a negative in 100 attempts contributes no
    negatives and is counted in ``skipped``.
    """
    if positive_mode not in ("box", "window"):
        raise ConfigError(f"unknown positive_mode {positive_mode!r}")
    out = CropSet([])
    for fi, frame in enumerate(frames):
        rng = np.random.default_rng([seed, fi])
        gt = frame.boxes
        pos_rects = []
        for b in gt:
            b = b.clamp(frame.width, frame.height)
            if b is None:
                continue
            if positive_mode == "box":
                pos_rects.append(BoundingBox(int(b.x), int(b.y), max(1, int(round(b.w))), max(1, int(round(b.h)))))
                continue
            centre = _window_around(b, window, frame.width, frame.height)
            pos_rects.append(centre)
            tries = 0
            added = 0
            while added < jitter_per_box and tries < 20 * max(1, jitter_per_box):
                tries += 1
                dx, dy = rng.integers(-window // 4, window // 4 + 1, size=2)
                r = BoundingBox(int(np.clip(centre.x + dx, 0, frame.width - centre.w)),
                                int(np.clip(centre.y + dy, 0, frame.height - centre.h)), centre.w, centre.h)
                if iou_matrix([r], [b])[0, 0] >= 0.5:
                    pos_rects.append(r)
                    added += 1
        neg_rects = []
        for k in range(negatives_per_frame):
            size = negative_sizes[k % len(negative_sizes)]
            r = random_negative_rect(rng, frame.width, frame.height, size, gt, max_negative_iou)
            if r is None:
                out.skipped += 1
                neg_rects = []
                break
            neg_rects.append(r)
        rects = pos_rects + neg_rects
        if not rects:
            continue
        px = crop_resize(frame.image, rects)
        for k, r in enumerate(rects):
            label = POSITIVE if k < len(pos_rects) else NEGATIVE
            out.crops.append(LabeledCrop(px[k], label, frame.source_id, r))
    if out.skipped:
        log.warning("extract_pedestrian_samples: %d frame(s) yielded no negatives", out.skipped)
    return out


# --------------------------------------------------------------------------
# synthetic frames
# --------------------------------------------------------------------------

@dataclass
class SynthConfig:
    frames: int = 100
    width: int = 384
    height: int = 288
    min_pedestrians: int = 1
    max_pedestrians: int = 3
    min_height: int = 20
    max_height: int = 24
    aspect: tuple = (0.5, 0.65)             # width / height of a figure
    occlusion_rate: float = 0.1
    texture_seed: int = 0
    distractors: int = 4

    def validate(self):
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        if self.width < 4 or self.height < 4:
            raise ConfigError("frame must be at least 4x4")
        if not 0 <= self.min_pedestrians <= self.max_pedestrians:
            raise ConfigError("need 0 <= min_pedestrians <= max_pedestrians")
        if not 4 <= self.min_height <= self.max_height:
            raise ConfigError("need 4 <= min_height <= max_height")
        if self.max_height > self.height or int(np.ceil(self.max_height * self.aspect[1])) > self.width:
            raise ConfigError(f"figure size up to {self.max_height}px exceeds the {self.width}x{self.height} frame")
        if not 0 < self.aspect[0] <= self.aspect[1]:
            raise ConfigError("aspect range must be positive and ordered")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ConfigError("occlusion_rate must lie in [0, 1]")
        return self


def _smooth_noise(rng, h, w, cells=(6, 8)) -> np.ndarray:
    coarse = rng.standard_normal((cells[0], cells[1], 1))
    return resize_bilinear(coarse, h, w)[..., 0]


def _background(rng, tex_rng, h, w) -> np.ndarray:
    top = rng.uniform(90, 180, size=3)
    bottom = rng.uniform(40, 120, size=3)
    t = np.linspace(0, 1, h)[:, None, None]
    img = (1 - t) * top + t * bottom
    img = img + 18 * _smooth_noise(tex_rng, h, w)[..., None]
    img = img + tex_rng.normal(0, 5, size=(h, w, 1))
    return np.broadcast_to(img, (h, w, 3)).copy()


def _fill_rect(img, x0, y0, x1, y1, color):
    h, w = img.shape[:2]
    x0, y0, x1, y1 = max(0, int(x0)), max(0, int(y0)), min(w, int(x1)), min(h, int(y1))
    if x1 > x0 and y1 > y0:
        img[y0:y1, x0:x1] = color


def _fill_disc(img, cx, cy, r, color):
    h, w = img.shape[:2]
    y0, y1 = max(0, int(cy - r - 1)), min(h, int(cy + r + 2))
    x0, x1 = max(0, int(cx - r - 1)), min(w, int(cx + r + 2))
    yy, xx = np.mgrid[y0:y1, x0:x1]
    mask = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r
    img[y0:y1, x0:x1][mask] = color


def _draw_distractor(rng, img):
    h, w = img.shape[:2]
    color = rng.uniform(20, 235, size=3)
    if rng.random() < 0.5:
        # pole: thin and tall
        pw, ph = rng.integers(2, 5), rng.integers(15, 60)
    else:
        # vehicle / building block
        pw, ph = rng.integers(15, 60), rng.integers(8, 35)
    x, y = rng.integers(0, max(1, w - pw)), rng.integers(0, max(1, h - ph))
    _fill_rect(img, x, y, x + pw, y + ph, color)


def _draw_pedestrian(rng, img, box: BoundingBox, occluded: bool):
    x, y, w, h = box.as_tuple()
    shirt = rng.uniform(0, 255, size=3)
    pants = rng.uniform(0, 255, size=3)
    # two tones must differ visibly
    if np.abs(shirt - pants).sum() < 120:
        pants = 255 - shirt
    skin = rng.uniform([150, 100, 70], [240, 190, 160])
    r = w * 0.28
    head_cy = y + r
    torso_top = y + 2 * r - 0.5
    hip = y + 0.55 * h
    _fill_rect(img, x, torso_top, x + w, hip, shirt)
    leg_w = max(1.0, 0.4 * w)
    _fill_rect(img, x, hip, x + leg_w, y + h, pants)
    _fill_rect(img, x + w - leg_w, hip, x + w, y + h, pants)
    _fill_disc(img, x + w / 2, head_cy, r, skin)
    if occluded:
        top = y + h * rng.uniform(0.5, 0.7)
        _fill_rect(img, x - rng.integers(2, 10), top, x + w + rng.integers(2, 10), y + h + 2,
                   rng.uniform(20, 235, size=3))


def synth_frame(cfg: SynthConfig, seed: int, index: int) -> AnnotatedFrame:
    """One frame; depends only on (seed, index, texture_seed) so frames can be built in any order."""
    rng = np.random.default_rng([seed, index])
    tex_rng = np.random.default_rng([cfg.texture_seed, seed, index])
    img = _background(rng, tex_rng, cfg.height, cfg.width)
    for _ in range(cfg.distractors):
        _draw_distractor(rng, img)
    n = int(rng.integers(cfg.min_pedestrians, cfg.max_pedestrians + 1))
    boxes = []
    while len(boxes) < n:
        for _ in range(50):
            h = int(rng.integers(cfg.min_height, cfg.max_height + 1))
            w = max(3, int(round(h * rng.uniform(*cfg.aspect))))
            bx = BoundingBox(int(rng.integers(0, cfg.width - w + 1)), int(rng.integers(0, cfg.height - h + 1)), w, h)
            # keep figures apart so every box stays individually visible
            grown = BoundingBox(bx.x - 2, bx.y - 2, bx.w + 4, bx.h + 4)
            if all(intersection_area(grown, b) == 0 for b in boxes):
                break
        else:
            if boxes:
                break
        boxes.append(bx)
    for bx in boxes:
        _draw_pedestrian(rng, img, bx, rng.random() < cfg.occlusion_rate)
    return AnnotatedFrame(_to_uint8(img), boxes, f"frame_{index:05d}")


def synth_generate(cfg: SynthConfig, seed: int = 42) -> list:
    """Deterministic list of :class:`AnnotatedFrame`, one per index in ``range(cfg.frames)``."""
    cfg.validate()
    return [synth_frame(cfg, seed, i) for i in range(cfg.frames)]


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------

def save_dataset(frames, root, image_format: str = "png") -> Path:
    """Write images plus ``annotations.jsonl`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    ext = {"png": "png", "ppm": "ppm"}[image_format]
    with open(root / "annotations.jsonl", "w") as fh:
        for frame in frames:
            rel = f"images/{frame.source_id}.{ext}"
            Image.fromarray(frame.image, "RGB").save(root / rel)
            fh.write(json.dumps({"image": rel, "boxes": [b.to_json() for b in frame.boxes]}) + "\n")
    return root / "annotations.jsonl"


def load_dataset(root) -> list:
    root = Path(root)
    ann = root / "annotations.jsonl" if root.is_dir() else root
    base = ann.parent
    if not ann.exists():
        raise DataError(f"no annotations at {ann}")
    frames = []
    with open(ann) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                img = np.asarray(Image.open(base / rec["image"]).convert("RGB"))
                boxes = [BoundingBox.from_json(b) for b in rec["boxes"]]
            except (OSError, KeyError, ValueError) as exc:
                raise DataError(f"{ann}:{lineno}: {exc}") from exc
            frames.append(AnnotatedFrame(img, boxes, Path(rec["image"]).stem))
    return frames


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------

@dataclass
class DatasetStats:
    width_edges: np.ndarray
    width_counts: np.ndarray
    height_edges: np.ndarray
    height_counts: np.ndarray
    density: np.ndarray                     # (n, n) counts of box centres per grid cell
    total_frames: int = 0
    total_boxes: int = 0

    def log_density(self) -> np.ndarray:
        """Centre density mapped to 0..255 by log(1+v)/log(1+v_max)."""
        vmax = self.density.max()
        if vmax == 0:
            return np.zeros_like(self.density, dtype=np.uint8)
        return np.rint(255 * np.log1p(self.density) / np.log1p(vmax)).astype(np.uint8)

    def write(self, out_dir, prefix: str = "") -> list:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, edges, counts in (("width", self.width_edges, self.width_counts),
                                    ("height", self.height_edges, self.height_counts)):
            p = out_dir / f"{prefix}{name}_hist.csv"
            with open(p, "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["bin_low", "bin_high", "count"])
                for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                    wr.writerow([int(lo), int(hi), int(c)])
            paths.append(p)
        p = out_dir / f"{prefix}center_density.pgm"
        Image.fromarray(self.log_density(), "L").save(p, format="PPM")
        paths.append(p)
        return paths


def _hist(values, bin_width: int):
    values = np.asarray(values, dtype=np.float64)
    lo = np.floor(values.min() / bin_width) * bin_width
    hi = (np.floor(values.max() / bin_width) + 1) * bin_width
    edges = np.arange(lo, hi + bin_width / 2, bin_width)
    counts, _ = np.histogram(values, bins=edges)
    return edges, counts


def stats(frames, bin_width: int = 4, grid: int = 4) -> DatasetStats:
    """Width/height histograms and the per-cell density of box centres."""
    boxes = [(f, b) for f in frames for b in f.boxes]
    if not boxes:
        raise DataError("stats: dataset has no boxes")
    we, wc = _hist([b.w for _, b in boxes], bin_width)
    he, hc = _hist([b.h for _, b in boxes], bin_width)
    density = np.zeros((grid, grid), dtype=np.int64)
    for f, b in boxes:
        cx, cy = b.center
        c = min(grid - 1, int(cx * grid / f.width))
        r = min(grid - 1, int(cy * grid / f.height))
        density[r, c] += 1
    return DatasetStats(we, wc, he, hc, density, len(frames), len(boxes))
