import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphtrack.detect_io import (FULL_FRAME, BBox, Detection, FrameDetections, LabeledFrame, Roi,
                                  StreamParseError, apply_roi, confidence_gate, iou, nms, parse_jsonl_line,
                                  parse_labeled, parse_stream, refine_box, serialize)


def det(cx, cy, w, h, conf=0.9, cls=0, emb=None):
    return Detection(BBox(cx, cy, w, h), conf, cls, "", emb)


def box_iou_by_corners(a, b):
    """Independent oracle: corner arithmetic on plain floats."""
    ax0, ax1 = a.cx - a.w / 2, a.cx + a.w / 2
    ay0, ay1 = a.cy - a.h / 2, a.cy + a.h / 2
    bx0, bx1 = b.cx - b.w / 2, b.cx + b.w / 2
    by0, by1 = b.cy - b.h / 2, b.cy + b.h / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


boxes = st.builds(BBox, st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 0.5), st.floats(0.01, 0.5))
detections = st.builds(Detection, boxes, st.floats(0, 1), st.integers(0, 2))


# ---- BBox / Detection

def test_bbox_validation():
    with pytest.raises(ValueError):
        BBox(0.5, 0.5, 0.0, 0.1)
    with pytest.raises(ValueError):
        BBox(1.2, 0.5, 0.1, 0.1)
    with pytest.raises(ValueError):
        Detection(BBox(0.5, 0.5, 0.1, 0.1), 1.5, 0)


# ---- parsing

def test_parse_single_jsonl_line():
    frames = parse_stream('{"frame": 0, "detections": [{"box": [0.5,0.5,0.1,0.2], "conf": 0.9, "class": 2}]}\n')
    assert len(frames) == 1
    (d,) = frames[0].detections
    assert d.box == BBox(0.5, 0.5, 0.1, 0.2) and d.confidence == 0.9 and d.class_id == 2


def test_parse_empty():
    assert parse_stream(b"", "jsonl") == []
    assert parse_stream("#1000,1000\n", "mot") == []


def test_mot_pixel_conversion():
    (fr,) = parse_stream("#1000,1000\n0,-1,100,120,50,80,0.9,1,-1,-1\n", "mot")
    b = fr.detections[0].box
    assert b.cx == pytest.approx(0.125) and b.cy == pytest.approx(0.16)
    assert b.w == pytest.approx(0.05) and b.h == pytest.approx(0.08)


def test_missing_frames_become_empty():
    text = '{"frame": 2, "detections": []}\n{"frame": 5, "detections": [{"box": [0.5,0.5,0.1,0.1], "conf": 1, "class": 0}]}\n'
    frames = parse_stream(text)
    assert [f.frame_index for f in frames] == [2, 3, 4, 5]
    assert [len(f.detections) for f in frames] == [0, 0, 0, 1]


def test_parse_error_names_line_and_field():
    good = '{"frame": %d, "detections": []}\n'
    text = "".join(good % t for t in range(16)) + '{"frame": 16, "detections": [{"box": [0.5,0.5,0.1], "conf": 1, "class": 0}]}\n'
    with pytest.raises(StreamParseError) as err:
        parse_stream(text)
    assert err.value.line == 17 and err.value.field == "box"
    assert "line 17" in str(err.value)


def test_mixed_embedding_dims_rejected():
    text = ('{"frame": 0, "detections": [{"box": [0.5,0.5,0.1,0.1], "conf": 1, "class": 0, "emb": [1, 0]}]}\n'
            '{"frame": 1, "detections": [{"box": [0.5,0.5,0.1,0.1], "conf": 1, "class": 0, "emb": [1, 0, 0]}]}\n')
    with pytest.raises(StreamParseError, match="embedding dimension"):
        parse_stream(text)


def test_non_increasing_frames_rejected():
    with pytest.raises(StreamParseError) as err:
        parse_stream('{"frame": 3}\n{"frame": 3}\n')
    assert err.value.line == 2


def test_bad_mot_row():
    with pytest.raises(StreamParseError) as err:
        parse_stream("#100,100\n0,-1,1,1,5,5,0.5,0,-1,-1\n0,-1,x,1,5,5,0.5,0,-1,-1\n", "mot")
    assert err.value.line == 3


def test_parse_labeled_keeps_ids():
    text = "#100,100\n0,7,10,10,20,20,1,0,-1,-1\n0,3,50,50,20,20,1,1,-1,-1\n"
    (fr,) = parse_labeled(text, "mot")
    assert fr.ids == (7, 3)


def test_parse_jsonl_line():
    assert parse_jsonl_line("   ") is None
    fr = parse_jsonl_line('{"frame": 4, "detections": []}')
    assert fr == FrameDetections(4, ())


# ---- geometry

def test_iou_examples():
    a = BBox(0.25, 0.5, 0.5, 1.0)
    b = BBox(0.5, 0.5, 0.5, 1.0)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(0.9, 0.5, 0.1, 0.1)) == 0.0
    assert iou(a, b) == pytest.approx(1 / 3, abs=1e-12)


@given(boxes, boxes)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert v == pytest.approx(box_iou_by_corners(a, b), abs=1e-12)
    assert iou(a, a) == pytest.approx(1.0)


def test_nms_examples():
    a, b = det(0.5, 0.5, 0.2, 0.2, 0.9), det(0.5, 0.5, 0.2, 0.2, 0.8)
    assert nms([a, b], 0.5) == [a]
    b2 = det(0.5, 0.5, 0.2, 0.2, 0.8, cls=1)
    assert nms([a, b2], 0.5) == [a, b2]
    # A-B and B-C overlap at IoU 0.6 (shift of a quarter width); A-C stays below the
    # threshold, so C survives only because B was suppressed first.
    w = 0.2
    sh = w * 0.25
    A = det(0.3, 0.5, w, 0.2, 0.9)
    B = det(0.3 + sh, 0.5, w, 0.2, 0.8)
    C = det(B.box.cx + sh, 0.5, w, 0.2, 0.7)
    assert iou(A.box, B.box) == pytest.approx(0.6)
    assert iou(B.box, C.box) == pytest.approx(0.6)
    assert iou(A.box, C.box) < 0.5
    assert nms([A, B, C], 0.5) == [A, C]


def brute_nms(dets, thr):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept = []
    for i in order:
        if all(not (dets[k].class_id == dets[i].class_id and iou(dets[k].box, dets[i].box) >= thr) for k in kept):
            kept.append(i)
    return [dets[i] for i in kept]


@settings(max_examples=150)
@given(st.lists(detections, max_size=12), st.floats(0.05, 1.0))
def test_nms_properties(dets, thr):
    out = nms(dets, thr)
    assert out == brute_nms(dets, thr)
    assert nms(out, thr) == out
    assert all(d in dets for d in out)
    confs = [d.confidence for d in out]
    assert confs == sorted(confs, reverse=True)


def test_roi_examples():
    fr = FrameDetections(0, (det(0.1, 0.1, 0.1, 0.1), det(0.5, 0.5, 0.1, 0.1), det(0.9, 0.2, 0.1, 0.1)))
    assert apply_roi(fr, FULL_FRAME) == fr
    roi = Roi(0.0, 0.0, 0.6, 0.6)
    assert apply_roi(fr, roi).detections == (fr.detections[0], fr.detections[1])
    edge = FrameDetections(0, (det(0.6, 0.3, 0.1, 0.1),))
    assert apply_roi(edge, roi) == edge
    with pytest.raises(ValueError):
        Roi(0.5, 0.0, 0.5, 1.0)


@given(st.lists(detections, max_size=8))
def test_full_roi_is_identity(dets):
    fr = FrameDetections(0, tuple(dets))
    assert apply_roi(fr, FULL_FRAME) == fr


def test_confidence_gate_and_refine():
    fr = FrameDetections(0, (det(0.5, 0.5, 0.1, 0.1, 0.2), det(0.5, 0.5, 0.1, 0.1, 0.25)))
    assert confidence_gate(fr, 0.25).detections == (fr.detections[1],)
    big = det(0.5, 0.5, 0.6, 0.3)
    assert refine_box(big, 0.4, 0.4).box == BBox(0.5, 0.5, 0.4, 0.3)
    assert refine_box(big) == big


# ---- round trips

def grid_value(k):
    return k / 64.0  # exactly representable in both formats


frame_lists = st.lists(
    st.lists(st.builds(lambda a, b, c, d, conf, cls: Detection(BBox(grid_value(a), grid_value(b), grid_value(c), grid_value(d)),
                                                                  grid_value(conf), cls),
                       st.integers(8, 56), st.integers(8, 56), st.integers(1, 16), st.integers(1, 16),
                       st.integers(1, 64), st.integers(0, 3)), max_size=4),
    min_size=1, max_size=5)


@given(frame_lists)
def test_jsonl_round_trip(raw):
    frames = [FrameDetections(t, tuple(d)) for t, d in enumerate(raw)]
    assert parse_stream(serialize(frames, "jsonl"), "jsonl") == frames


@given(frame_lists)
def test_mot_round_trip(raw):
    frames = [FrameDetections(t, tuple(d)) for t, d in enumerate(raw)]
    # MOT has no row for an empty frame at either end of the stream
    while frames and not frames[-1].detections:
        frames.pop()
    while frames and not frames[0].detections:
        frames.pop(0)
    back = parse_stream(serialize(frames, "mot", (1024, 1024)), "mot")
    assert back == frames


def test_jsonl_round_trip_with_embeddings_and_ids():
    lf = [LabeledFrame(0, ((4, Detection(BBox(0.5, 0.25, 0.125, 0.5), 1.0, 1, "car", (0.6, 0.8))),))]
    assert parse_labeled(serialize(lf, "jsonl")) == lf
    assert math.isclose(parse_labeled(serialize(lf, "mot", (800, 600)), "mot")[0].items[0][1].box.cy, 0.25)
    assert np.isclose(parse_labeled(serialize(lf, "mot", (800, 600)), "mot")[0].items[0][0], 4)
