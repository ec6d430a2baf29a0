import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from seekfind.data import (NEGATIVE, POSITIVE, AnnotatedFrame, SynthConfig, crop_resize, extract_pedestrian_samples,
                           extract_zone_samples, grid_partition, label_zones, load_dataset, random_negative_rect,
                           resize_bilinear, save_dataset, stats, synth_frame, synth_generate, to_network_input)
from seekfind.errors import ConfigError, DataError
from seekfind.geometry import BoundingBox, iou, iou_matrix, union_box

boxes = st.builds(BoundingBox, st.integers(-20, 100), st.integers(-20, 100), st.integers(1, 60), st.integers(1, 60))


# ---------------------------------------------------------------- geometry

def test_iou_examples():
    a = BoundingBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(20, 20, 5, 5)) == 0.0
    assert iou(a, BoundingBox(5, 0, 10, 10)) == pytest.approx(1 / 3)
    assert iou(a, BoundingBox(10, 0, 10, 10)) == 0.0          # touching edges


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert iou(a, a) == 1.0


@given(st.lists(boxes, min_size=1, max_size=6), st.lists(boxes, min_size=1, max_size=6))
def test_iou_matrix_matches_scalar(a, b):
    m = iou_matrix(a, b)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            assert m[i, j] == pytest.approx(iou(x, y), abs=1e-12)


@given(boxes, boxes)
def test_union_contains_both(a, b):
    u = union_box(a, b)
    for box in (a, b):
        assert u.x <= box.x and u.y <= box.y and u.x2 >= box.x2 and u.y2 >= box.y2


def test_box_validation_and_json():
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 0, 5)
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 5, 5, score=1.5)
    b = BoundingBox(1, 2, 3, 4, 0.25)
    assert BoundingBox.from_json(json.loads(json.dumps(b.to_json()))) == b
    assert BoundingBox(-5, -5, 10, 10).clamp(8, 8) == BoundingBox(0, 0, 5, 5)
    assert BoundingBox(10, 10, 3, 3).clamp(8, 8) is None


# ---------------------------------------------------------------- grid

@given(st.integers(4, 500), st.integers(4, 500))
def test_grid_tiles_frame_exactly(w, h):
    cells = grid_partition(w, h, 4)
    assert len(cells) == 16
    cover = np.zeros((h, w), dtype=int)
    for c in cells:
        cover[c.y:c.y2, c.x:c.x2] += 1
    assert np.all(cover == 1)


def test_grid_remainder_goes_to_last_cell():
    cells = grid_partition(642, 481, 4)
    assert cells[0].as_tuple() == (0, 0, 160, 120)
    assert cells[15].as_tuple() == (480, 360, 162, 121)


def test_grid_rejects_tiny_frame():
    with pytest.raises(DataError):
        grid_partition(3, 10, 4)


def test_zone_labels_for_straddling_box():
    frame = AnnotatedFrame(np.zeros((240, 320, 3), np.uint8), [BoundingBox(70, 50, 20, 20)])
    labels = label_zones(frame, grid_partition(320, 240))
    assert [k for k, v in enumerate(labels) if v] == [0, 1, 4, 5]


# ---------------------------------------------------------------- resizing

def test_resize_identity_at_same_size():
    img = np.random.default_rng(0).integers(0, 256, (64, 64, 3)).astype(np.uint8)
    np.testing.assert_array_equal(crop_resize(img, [BoundingBox(0, 0, 64, 64)])[0], img)


def test_resize_constant_image_stays_constant():
    out = resize_bilinear(np.full((7, 5, 3), 9.0), 64, 64)
    np.testing.assert_allclose(out, 9.0)


def test_network_input_layout_and_range():
    px = np.zeros((2, 64, 64, 3), np.uint8)
    px[..., 0] = 255
    x = to_network_input(px)
    assert x.shape == (2, 3, 64, 64) and x.dtype == np.float32
    assert x[:, 0].min() == 2.0 and x[:, 1].max() == -2.0


# ---------------------------------------------------------------- sampling

@pytest.fixture(scope="module")
def frames():
    return synth_generate(SynthConfig(frames=12), seed=3)


def test_zone_samples_labels_and_ratio(frames):
    cs = extract_zone_samples(frames, max_positive=10)
    pos, neg = cs.counts()
    assert pos == 10 and neg == 18
    x, y = cs.arrays()
    assert x.shape == (28, 3, 64, 64) and set(y) == {0, 1}


def test_zone_samples_deterministic(frames):
    a, b = extract_zone_samples(frames), extract_zone_samples(frames)
    assert all(np.array_equal(p.pixels, q.pixels) and p.label == q.label for p, q in zip(a.crops, b.crops))


def test_pedestrian_positive_windows_overlap_truth(frames):
    cs = extract_pedestrian_samples(frames, positive_mode="window", jitter_per_box=2, seed=0)
    by_frame = {f.source_id: f for f in frames}
    for c in cs.crops:
        best = iou_matrix([c.rect], by_frame[c.frame_id].boxes).max()
        if c.label == POSITIVE:
            assert best >= 0.5
        else:
            assert best < 0.2


def test_pedestrian_box_mode_crops_truth(frames):
    cs = extract_pedestrian_samples(frames[:2], negatives_per_frame=0)
    assert [c.rect for c in cs.crops] == [b for f in frames[:2] for b in f.boxes]
    assert all(c.label == POSITIVE for c in cs.crops)


def test_negative_sampling_gives_up_on_crowded_frame():
    frame = AnnotatedFrame(np.zeros((20, 20, 3), np.uint8), [BoundingBox(0, 0, 20, 20)], "full")
    rng = np.random.default_rng(0)
    assert random_negative_rect(rng, 20, 20, 16, frame.boxes) is None
    cs = extract_pedestrian_samples([frame], negatives_per_frame=2)
    assert cs.skipped == 1 and cs.counts() == (1, 0)


def test_unknown_positive_mode():
    with pytest.raises(ConfigError):
        extract_pedestrian_samples([], positive_mode="nope")


# ---------------------------------------------------------------- synthetic frames and I/O

def test_synth_is_deterministic_and_order_free():
    cfg = SynthConfig(frames=4)
    a = synth_generate(cfg, seed=11)
    assert np.array_equal(a[2].image, synth_frame(cfg, 11, 2).image)
    assert a[2].boxes == synth_frame(cfg, 11, 2).boxes
    b = synth_generate(cfg, seed=12)
    assert not np.array_equal(a[0].image, b[0].image)


def test_synth_boxes_inside_frame_and_separated(frames):
    for f in frames:
        assert 1 <= len(f.boxes) <= 3
        for i, b in enumerate(f.boxes):
            assert 0 <= b.x and b.x2 <= f.width and 0 <= b.y and b.y2 <= f.height
            assert 20 <= b.h <= 24
            for other in f.boxes[i + 1:]:
                assert iou(b, other) == 0


def test_synth_empty_frames_allowed():
    fr = synth_generate(SynthConfig(frames=2, min_pedestrians=0, max_pedestrians=0), seed=1)
    assert all(not f.boxes for f in fr)


@pytest.mark.parametrize("kw", [{"frames": 0}, {"min_height": 30, "max_height": 20},
                                {"height": 10}, {"aspect": (0.8, 0.5)}, {"occlusion_rate": 2.0}])
def test_synth_config_validation(kw):
    with pytest.raises(ConfigError):
        SynthConfig(**kw).validate()


@pytest.mark.parametrize("fmt", ["png", "ppm"])
def test_dataset_roundtrip(tmp_path, frames, fmt):
    save_dataset(frames[:3], tmp_path, fmt)
    back = load_dataset(tmp_path)
    for a, b in zip(frames[:3], back):
        assert np.array_equal(a.image, b.image) and a.boxes == b.boxes and a.source_id == b.source_id


def test_dataset_missing_or_corrupt(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    (tmp_path / "annotations.jsonl").write_text('{"image": "images/none.png", "boxes": []}\n')
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def test_stats_outputs(tmp_path, frames):
    s = stats(frames, bin_width=4)
    n = sum(len(f.boxes) for f in frames)
    assert s.total_boxes == n and s.height_counts.sum() == n and s.density.sum() == n
    paths = s.write(tmp_path)
    rows = (tmp_path / "height_hist.csv").read_text().splitlines()
    assert rows[0] == "bin_low,bin_high,count"
    assert sum(int(r.split(",")[2]) for r in rows[1:]) == n
    assert (tmp_path / "center_density.pgm").read_bytes().startswith(b"P5")
    assert len(paths) == 3
    assert s.log_density().max() == 255
