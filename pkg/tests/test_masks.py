import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillscore import masks as mk
from skillscore.masks import Box, BoxSet, box_iou, merge_boxes

B = Box(10, 10, 30, 30, 0.9)


def test_box_validation():
    with pytest.raises(ValueError):
        Box(5, 0, 5, 10)
    with pytest.raises(ValueError):
        Box(0, 0, 1, 1, confidence=1.5)
    assert Box(-5, -5, 10, 10).clip(8, 8) == Box(0, 0, 8, 8)
    assert Box(20, 20, 30, 30).clip(8, 8) is None


def test_box_iou_examples():
    assert box_iou(B, B) == 1.0
    assert box_iou(Box(0, 0, 10, 10), Box(20, 20, 30, 30)) == 0.0
    # areas 100 and 100, intersection 50
    assert box_iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)


def test_merge_examples():
    assert merge_boxes(mk.EMPTY, BoxSet((B,), 0)).boxes == (B,)
    assert merge_boxes(BoxSet((B,), 0), BoxSet((), 1)).boxes == (B,)
    # b2 lies inside b1: 360 / 400
    b1, b2 = Box(0, 0, 20, 20), Box(0, 0, 20, 18)
    assert box_iou(b1, b2) == 0.9
    out = merge_boxes(BoxSet((b1,), 0), BoxSet((b2,), 1), 0.5)
    assert out.boxes == (b2,) and out.frame_index == 1


def test_merge_keeps_distinct_previous_boxes():
    far = Box(100, 100, 120, 120)
    out = merge_boxes(BoxSet((far,), 0), BoxSet((B,), 1), 0.5)
    assert set(out.boxes) == {B, far}


coords = st.integers(0, 60)


@st.composite
def boxes(draw):
    x0, y0 = draw(coords), draw(coords)
    return Box(x0, y0, x0 + draw(st.integers(1, 30)), y0 + draw(st.integers(1, 30)))


box_sets = st.lists(boxes(), max_size=5, unique=True).map(lambda bs: BoxSet(tuple(bs), 0))


@settings(max_examples=200, deadline=None)
@given(box_sets, box_sets, st.floats(0, 1))
def test_merge_properties(prev, curr, thr):
    out = merge_boxes(prev, curr, thr)
    assert merge_boxes(mk.EMPTY, curr, thr).boxes == curr.boxes
    assert merge_boxes(prev, BoxSet((), 0), thr).boxes == prev.boxes
    assert len(out) <= len(prev) + len(curr)
    assert all(b in prev.boxes or b in curr.boxes for b in out)
    assert len(set(out.boxes)) == len(out.boxes)
    assert all(b in out.boxes for b in curr.boxes)


def _frames(n, h=48, w=64):
    return np.zeros((n, h, w, 3), np.uint8)


def test_fixed_backend_masks_equal_filled_box():
    frames = _frames(5)
    box = Box(8, 4, 24, 20)
    masks, prompts = mk.generate_video_masks(frames, "metallic tool", mk.FixedBoxBackend([box]))
    expected = np.zeros((48, 64), np.uint8)
    expected[4:20, 8:24] = 1
    assert len(masks) == 5
    for t, m in enumerate(masks):
        assert m.frame_index == t and m.grid.shape == (48, 64)
        assert np.array_equal(m.grid, expected)
        assert prompts[t].boxes == (box,)


def test_even_frame_detections_are_carried():
    box = Box(8, 4, 24, 20)
    backend = mk.ScriptedBackend(lambda t: [box] if t % 2 == 0 else [])
    masks, prompts = mk.generate_video_masks(_frames(7), "tool", backend)
    for t in range(1, 7, 2):
        assert np.array_equal(masks[t].grid, masks[t - 1].grid)
        assert masks[t].grid.sum() == 16 * 16
        assert prompts[t].boxes == (box,)


def test_no_detection_gives_empty_masks():
    masks, _ = mk.generate_video_masks(_frames(4), "tool", mk.ScriptedBackend({}))
    assert all(m.grid.sum() == 0 for m in masks)


def test_threshold_filters_low_confidence():
    backend = mk.FixedBoxBackend([Box(0, 0, 10, 10, 0.2), Box(20, 20, 30, 30, 0.8)])
    masks, prompts = mk.generate_video_masks(_frames(1), "tool", backend, box_threshold=0.3)
    assert [b.confidence for b in prompts[0]] == [0.8]


def test_backend_failure_carries_frame_index():
    backend = mk.ScriptedBackend({0: [B]}, fail_on=[2])
    with pytest.raises(mk.MaskGenerationError) as err:
        mk.generate_video_masks(_frames(4), "tool", backend)
    assert err.value.frame_index == 2


def test_backend_failure_fallback():
    backend = mk.ScriptedBackend({0: [B]}, fail_on=[2])
    masks, prompts = mk.generate_video_masks(_frames(4), "tool", backend, fallback_on_error=True)
    assert masks[2].grid.sum() == 0
    # carried boxes survive the failed frame
    assert masks[3].grid.sum() == masks[1].grid.sum() > 0


def test_bright_backend_finds_disc(synth_small):
    samples, _ = synth_small
    masks, prompts = mk.generate_video_masks(samples[0], "metallic tool", mk.BrightObjectBackend())
    assert all(len(p) >= 1 for p in prompts)
    assert all(0 < m.foreground_ratio < 0.5 for m in masks)


def test_deterministic(synth_small):
    samples, _ = synth_small
    a, _ = mk.generate_video_masks(samples[1], "tool", mk.BrightObjectBackend())
    b, _ = mk.generate_video_masks(samples[1], "tool", mk.BrightObjectBackend())
    assert all(np.array_equal(x.grid, y.grid) for x, y in zip(a, b))


def test_protocol_conformance():
    assert isinstance(mk.BrightObjectBackend(), mk.SegmenterBackend)
    assert isinstance(mk.FixedBoxBackend([]), mk.SegmenterBackend)


def test_external_backend_unavailable_is_actionable():
    with pytest.raises(mk.BackendError, match="stub"):
        mk.make_backend("external")
    with pytest.raises(mk.BackendError):
        mk.make_backend("nope")


def test_mask_cache_round_trip(tmp_path):
    box = Box(8, 4, 24, 20)
    masks, prompts = mk.generate_video_masks(_frames(3), "tool", mk.FixedBoxBackend([box]))
    sig = mk.cache_signature(mk.MaskConfig(), "stub-fixed")
    d = mk.write_mask_cache(tmp_path, "vid", masks, sig, prompts)
    assert sorted(p.name for p in d.iterdir()) == ["00000.png", "00001.png", "00002.png", "masks.json"]
    from PIL import Image
    assert set(np.unique(np.asarray(Image.open(d / "00000.png")))) == {0, 255}
    meta = json.loads((d / "masks.json").read_text())
    assert meta["signature"]["text_prompt"] == "metallic tool"
    assert mk.cached_masks_valid(tmp_path, "vid", sig, 3)
    assert not mk.cached_masks_valid(tmp_path, "vid", {**sig, "text_prompt": "tool"}, 3)
    back = mk.read_mask_cache(tmp_path, "vid")
    assert all(np.array_equal(a.grid, b) for a, b in zip(masks, back))


def test_default_prompt():
    assert mk.MaskConfig().text_prompt == "metallic tool"
