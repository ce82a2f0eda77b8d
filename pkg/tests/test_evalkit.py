import numpy as np
import pytest
from hypothesis import given, strategies as st

from deeplk.evalkit import (THRESHOLDS, DataError, Sequence, SynthConfig, blurred_noise,
                            cost_curve, count_local_minima, iou, load_results, load_sequence,
                            periodic_texture, read_groundtruth, success_curve, synth_sequence,
                            write_results, write_sequence, write_success_csv)
from deeplk.features import FeatureParams, Kind, feature_init
from deeplk.imaging import crop_resize
from deeplk.warp import Box

boxes = st.builds(Box, st.floats(-50, 50), st.floats(-50, 50), st.floats(0.5, 40),
                  st.floats(0.5, 40))


def test_iou_examples():
    a = Box(0.5, 0.5, 1, 1)
    assert iou(a, a) == 1.0
    assert iou(a, Box(5, 5, 1, 1)) == 0.0
    assert iou(a, Box(1.0, 0.5, 1, 1)) == pytest.approx(1 / 3)


@given(boxes, boxes)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a))


def test_success_curve_examples():
    gt = [Box(10, 10, 4, 4), Box(20, 20, 6, 3)]
    perfect = success_curve(gt, gt)
    assert np.all(perfect.success[:-1] == 1.0) and perfect.success[-1] == 0.0
    assert perfect.auc == pytest.approx(100 / 101)
    assert perfect.success_50 == 1.0
    far = success_curve([Box(100, 100, 4, 4)] * 2, gt)
    assert far.auc == 0.0 and not far.success.any()
    assert THRESHOLDS.size == 101 and THRESHOLDS[50] == 0.5
    with pytest.raises(DataError):
        success_curve(gt, gt[:1])


@given(st.lists(st.tuples(boxes, boxes), min_size=1, max_size=10))
def test_success_curve_monotone(pairs):
    curve = success_curve([p for p, _ in pairs], [g for _, g in pairs])
    assert np.all(np.diff(curve.success) <= 0)
    assert 0.0 <= curve.auc <= 1.0
    assert curve.auc == pytest.approx(curve.success.mean())


def test_success_strict_threshold():
    gt = [Box(0.5, 0.5, 1, 1)]
    curve = success_curve([Box(1.0, 0.5, 1, 1)], gt)  # IoU exactly 1/3
    assert curve.success[33] == 1.0 and curve.success[34] == 0.0


def test_synth_static_and_deterministic():
    static = synth_sequence(SynthConfig(seed=2, frames=5, b_x=0.0, b_s=0.0))
    assert all(b == static.gt_boxes[0] for b in static.gt_boxes)
    a = synth_sequence(SynthConfig(seed=2, frames=5, brightness_drift=0.1))
    b = synth_sequence(SynthConfig(seed=2, frames=5, brightness_drift=0.1))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.frames, b.frames))
    assert success_curve(a.gt_boxes, a.gt_boxes).auc == pytest.approx(100 / 101)
    # drift raises the mean brightness
    assert a.frames[-1].mean() > a.frames[0].mean()
    with pytest.raises(ValueError):
        synth_sequence(SynthConfig(frames=1))


@given(st.integers(0, 10_000))
def test_synth_boxes_inside_frame(seed):
    cfg = SynthConfig(seed=seed, frames=30, b_x=0.3, b_s=0.2, width=96, height=96)
    seq = synth_sequence(cfg)
    for b in seq.gt_boxes:
        x, y, w, h = b.to_xywh()
        assert x >= 0 and y >= 0 and x + w <= 96 and y + h <= 96


def test_synth_object_texture_is_rendered():
    seq = synth_sequence(SynthConfig(seed=4, frames=3, b_x=0.0, b_s=0.0))
    inside = crop_resize(seq.frame(0), seq.gt_boxes[0], 1.0, 32).data
    assert inside.std() > 0.1  # foreground contrast dominates the box


def test_blurred_noise_normalized(rng):
    n = blurred_noise(rng, (40, 50), 2.0)
    assert n.shape == (40, 50)
    assert abs(n.mean()) < 1e-12 and n.std() == pytest.approx(1.0)


def test_count_local_minima():
    assert count_local_minima([3, 1, 2, 0, 5]) == 2
    assert count_local_minima([1, 1, 1]) == 0
    assert count_local_minima([0, 1, 2]) == 0


@pytest.fixture(scope="module")
def periodic():
    return periodic_texture((96, 160), 6.0, np.random.default_rng(0))


def test_cost_curve_minimum_at_zero(periodic):
    box = Box(80, 48, 24, 24)
    shifts = np.arange(-8, 8.5, 0.5)
    for theta in (FeatureParams(), feature_init(Kind.CONV, None, 1)):
        template = crop_resize(periodic, box, 2.0, 48)
        table = cost_curve(theta, template, periodic, box, shifts)
        assert table.shape == (shifts.size, 2)
        assert table[np.argmin(table[:, 1]), 0] == 0.0
        assert table[16, 1] == 0.0


def test_cost_curve_raw_periodic_has_several_minima(periodic):
    box = Box(80, 48, 24, 24)
    template = crop_resize(periodic, box, 2.0, 48)
    table = cost_curve(FeatureParams(), template, periodic, box, np.arange(-8, 8.5, 0.5))
    assert count_local_minima(table[:, 1]) >= 2


def test_groundtruth_parsing(tmp_path):
    p = tmp_path / "gt.txt"
    p.write_text("10, 20, 30, 40\n\n1 2 3 4\n")
    gt = read_groundtruth(p)
    assert gt == [Box(25, 40, 30, 40), Box(2.5, 4, 3, 4)]
    p.write_text("1,2,3,4\n1,2,x,4\n")
    with pytest.raises(DataError, match=":2"):
        read_groundtruth(p)
    p.write_text("1,2,3\n")
    with pytest.raises(DataError, match="expected 4"):
        read_groundtruth(p)
    p.write_text("1,2,0,4\n")
    with pytest.raises(DataError):
        read_groundtruth(p)


def test_sequence_round_trip(tmp_path):
    seq = synth_sequence(SynthConfig(seed=5, frames=3, width=64, height=64, box_w=16, box_h=16))
    seq.fps = 240.0
    write_sequence(tmp_path / "s", seq)
    loaded = load_sequence(tmp_path / "s")
    assert len(loaded) == 3 and loaded.fps == 240.0 and loaded.name == "s"
    for a, b in zip(loaded.gt_boxes, seq.gt_boxes):
        np.testing.assert_allclose(a.as_array(), b.as_array(), atol=1e-6)
    # 8-bit PNG quantization
    np.testing.assert_allclose(loaded.frame(1), seq.frame(1), atol=0.5 / 255 + 1e-9)
    assert loaded.load().frames is not None


def test_sequence_errors(tmp_path):
    with pytest.raises(DataError):
        load_sequence(tmp_path)
    seq = synth_sequence(SynthConfig(seed=5, frames=3, width=64, height=64, box_w=16, box_h=16))
    write_sequence(tmp_path / "s", seq)
    (tmp_path / "s" / "groundtruth.txt").write_text("1,2,3,4\n")
    with pytest.raises(DataError, match="3 frames but 1"):
        load_sequence(tmp_path / "s")
    with pytest.raises(DataError):
        Sequence([], [Box(1, 1, 1, 1)], frames=[])


def test_results_round_trip(tmp_path):
    boxes = [Box(10.123456, 20, 5, 6), Box(1, 2, 3, 4.5)]
    path = tmp_path / "results.txt"
    write_results(path, boxes, [0, 1])
    got, flags = load_results(path)
    assert flags == [0, 1]
    for a, b in zip(got, boxes):
        np.testing.assert_allclose(a.as_array(), b.as_array(), atol=1e-6)
    with pytest.raises(DataError):
        write_results(path, boxes, [0])


def test_success_csv(tmp_path):
    gt = [Box(10, 10, 4, 4)]
    write_success_csv(tmp_path / "s.csv", success_curve(gt, gt))
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "threshold,success" and len(lines) == 102
