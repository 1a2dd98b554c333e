"""Detection records, stream parsing/serialization, IoU, NMS and ROI gating.

All coordinates are normalized to the unit square; the MOT-CSV converters are
the only place pixel units appear.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import kernels

FORMATS = ("jsonl", "mot")


class StreamParseError(ValueError):
    """Malformed detection stream; carries the 1-based line number."""

    def __init__(self, line: int, field_name: str, message: str):
        self.line = line
        self.field = field_name
        super().__init__(f"line {line}: field {field_name!r}: {message}")


@dataclass(frozen=True, slots=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center must lie in [0,1]^2, got ({self.cx}, {self.cy})")

    @property
    def center(self) -> tuple[float, float]:
        return (self.cx, self.cy)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    def to_pixels_ltwh(self, img_w: int, img_h: int) -> tuple[float, float, float, float]:
        w = self.w * img_w
        h = self.h * img_h
        return (self.cx * img_w - w / 2.0, self.cy * img_h - h / 2.0, w, h)

    @classmethod
    def from_pixels_ltwh(cls, left: float, top: float, width: float, height: float,
                         img_w: int, img_h: int) -> "BBox":
        return cls((left + width / 2.0) / img_w, (top + height / 2.0) / img_h,
                   width / img_w, height / img_h)


@dataclass(frozen=True, slots=True)
class Detection:
    box: BBox
    confidence: float
    class_id: int
    class_name: str = ""
    embedding: tuple[float, ...] | None = None

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must be in [0,1], got {self.confidence}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")


@dataclass(frozen=True, slots=True)
class FrameDetections:
    frame_index: int
    detections: tuple[Detection, ...] = ()


@dataclass(frozen=True, slots=True)
class LabeledFrame:
    """A frame whose detections carry identities (tracker output or ground truth)."""

    frame_index: int
    items: tuple[tuple[int, Detection], ...] = ()

    @property
    def detections(self) -> tuple[Detection, ...]:
        return tuple(d for _, d in self.items)

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.items)


@dataclass(frozen=True, slots=True)
class Roi:
    x0: float = 0.0
    y0: float = 0.0
    x1: float = 1.0
    y1: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise ValueError(f"ROI must have positive area inside the unit square: {self}")

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


FULL_FRAME = Roi()


# ---------------------------------------------------------------- geometry

def boxes_array(dets: Sequence[Detection]) -> np.ndarray:
    if not dets:
        return np.zeros((0, 4))
    return np.array([d.box.as_tuple() for d in dets], dtype=np.float64)


def iou(a: BBox, b: BBox) -> float:
    return float(kernels.iou_matrix(np.array([a.as_tuple()]), np.array([b.as_tuple()]))[0, 0])


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Class-wise greedy NMS; output sorted by confidence, ties by input order."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in (0, 1]")
    keep = nms_indices(dets, iou_threshold)
    return [dets[i] for i in keep]


def nms_indices(dets: Sequence[Detection], iou_threshold: float = 0.5) -> np.ndarray:
    if not dets:
        return np.zeros(0, dtype=np.int64)
    scores = np.array([d.confidence for d in dets])
    classes = np.array([d.class_id for d in dets], dtype=np.int64)
    return kernels.nms_keep(boxes_array(dets), scores, classes, iou_threshold)


def apply_roi(frame: FrameDetections, roi: Roi) -> FrameDetections:
    kept = tuple(d for d in frame.detections if roi.contains(d.box.cx, d.box.cy))
    return FrameDetections(frame.frame_index, kept)


def confidence_gate(frame: FrameDetections, tau: float) -> FrameDetections:
    return FrameDetections(frame.frame_index, tuple(d for d in frame.detections if d.confidence >= tau))


def refine_box(det: Detection, max_w: float = 1.0, max_h: float = 1.0) -> Detection:
    """Clamp box dimensions to a configured maximum (no-op at the defaults)."""
    b = det.box
    if b.w <= max_w and b.h <= max_h:
        return det
    return replace(det, box=BBox(b.cx, b.cy, min(b.w, max_w), min(b.h, max_h)))


# ---------------------------------------------------------------- parsing

def _check_embedding_dims(frames: Iterable[FrameDetections | LabeledFrame], line_of: dict[int, int]) -> None:
    dim = None
    for fr in frames:
        for det in fr.detections:
            if det.embedding is None:
                continue
            if dim is None:
                dim = len(det.embedding)
            elif len(det.embedding) != dim:
                raise StreamParseError(line_of.get(fr.frame_index, 0), "emb",
                                       f"embedding dimension {len(det.embedding)} differs from stream dimension {dim}")


def _fill_gaps(by_frame: dict[int, list], cls):
    if not by_frame:
        return []
    lo, hi = min(by_frame), max(by_frame)
    out = []
    for t in range(lo, hi + 1):
        out.append(cls(t, tuple(by_frame.get(t, ()))))
    return out


def _decode(data: bytes | str) -> str:
    if isinstance(data, bytes):
        return data.decode("utf-8")
    return data


def _num(value, line: int, name: str, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise StreamParseError(line, name, f"expected a number, got {value!r}")
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            raise StreamParseError(line, name, f"expected an integer, got {value!r}")
        return int(value)
    if not math.isfinite(value):
        raise StreamParseError(line, name, "non-finite value")
    return float(value)


def _jsonl_detection(raw, line: int) -> tuple[int | None, Detection]:
    if not isinstance(raw, dict):
        raise StreamParseError(line, "detections", "each detection must be an object")
    for key in ("box", "conf", "class"):
        if key not in raw:
            raise StreamParseError(line, key, "missing")
    box = raw["box"]
    if not isinstance(box, list) or len(box) != 4:
        raise StreamParseError(line, "box", "expected [cx, cy, w, h]")
    coords = [_num(v, line, "box") for v in box]
    try:
        bbox = BBox(*coords)
    except ValueError as exc:
        raise StreamParseError(line, "box", str(exc)) from None
    conf = _num(raw["conf"], line, "conf")
    cls = _num(raw["class"], line, "class", int)
    label = raw.get("label", "")
    if not isinstance(label, str):
        raise StreamParseError(line, "label", "expected a string")
    emb = raw.get("emb")
    if emb is not None:
        if not isinstance(emb, list) or not emb:
            raise StreamParseError(line, "emb", "expected a non-empty list of numbers")
        emb = tuple(_num(v, line, "emb") for v in emb)
    ident = raw.get("id")
    if ident is not None:
        ident = _num(ident, line, "id", int)
    try:
        det = Detection(bbox, conf, cls, label, emb)
    except ValueError as exc:
        raise StreamParseError(line, "conf" if "confidence" in str(exc) else "class", str(exc)) from None
    return ident, det


def _jsonl_frame(line: str, lineno: int, labeled: bool):
    """One JSONL line -> ``(frame_index, items)``; ``None`` for blank lines."""
    if not line.strip():
        return None
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise StreamParseError(lineno, "<json>", exc.msg) from None
    if not isinstance(obj, dict):
        raise StreamParseError(lineno, "<json>", "expected an object per line")
    if "frame" not in obj:
        raise StreamParseError(lineno, "frame", "missing")
    t = _num(obj["frame"], lineno, "frame", int)
    if t < 0:
        raise StreamParseError(lineno, "frame", "must be non-negative")
    dets = obj.get("detections", [])
    if not isinstance(dets, list):
        raise StreamParseError(lineno, "detections", "expected a list")
    items = []
    for k, raw in enumerate(dets):
        ident, det = _jsonl_detection(raw, lineno)
        if labeled:
            items.append((ident if ident is not None else k, det))
        else:
            items.append(det)
    return t, items


def parse_jsonl_line(line: str, lineno: int = 1) -> FrameDetections | None:
    """Parse a single JSONL frame line (streaming use); blank lines give ``None``."""
    got = _jsonl_frame(line, lineno, labeled=False)
    if got is None:
        return None
    return FrameDetections(got[0], tuple(got[1]))


def _parse_jsonl(text: str, labeled: bool):
    by_frame: dict[int, list] = {}
    line_of: dict[int, int] = {}
    last = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        got = _jsonl_frame(line, lineno, labeled)
        if got is None:
            continue
        t, items = got
        if last is not None and t <= last:
            raise StreamParseError(lineno, "frame", f"frame {t} does not increase (previous {last})")
        last = t
        by_frame[t] = items
        line_of[t] = lineno
    return by_frame, line_of


def _parse_mot(text: str, labeled: bool):
    by_frame: dict[int, list] = {}
    line_of: dict[int, int] = {}
    lines = text.splitlines()
    header_seen = False
    img_w = img_h = 0
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if not header_seen:
            if not line.startswith("#"):
                raise StreamParseError(lineno, "header", "expected '#img_w,img_h' header line")
            parts = line[1:].split(",")
            if len(parts) != 2:
                raise StreamParseError(lineno, "header", "expected '#img_w,img_h'")
            try:
                img_w, img_h = int(parts[0]), int(parts[1])
            except ValueError:
                raise StreamParseError(lineno, "header", "image size must be integers") from None
            if img_w <= 0 or img_h <= 0:
                raise StreamParseError(lineno, "header", "image size must be positive")
            header_seen = True
            continue
        cols = line.split(",")
        if len(cols) != 10:
            raise StreamParseError(lineno, "row", f"expected 10 columns, got {len(cols)}")
        names = ("frame", "id", "left", "top", "width", "height", "conf", "class")
        vals = {}
        for name, raw in zip(names, cols):
            try:
                vals[name] = float(raw)
            except ValueError:
                raise StreamParseError(lineno, name, f"not a number: {raw!r}") from None
            if not math.isfinite(vals[name]):
                raise StreamParseError(lineno, name, "non-finite value")
        for name in ("frame", "id", "class"):
            if not vals[name].is_integer():
                raise StreamParseError(lineno, name, "expected an integer")
        t = int(vals["frame"])
        if t < 0:
            raise StreamParseError(lineno, "frame", "must be non-negative")
        if by_frame and t < max(by_frame):
            raise StreamParseError(lineno, "frame", f"frame {t} goes backwards")
        try:
            box = BBox.from_pixels_ltwh(vals["left"], vals["top"], vals["width"], vals["height"], img_w, img_h)
        except ValueError as exc:
            raise StreamParseError(lineno, "left", str(exc)) from None
        try:
            det = Detection(box, vals["conf"], int(vals["class"]))
        except ValueError as exc:
            raise StreamParseError(lineno, "conf", str(exc)) from None
        by_frame.setdefault(t, []).append((int(vals["id"]), det) if labeled else det)
        line_of.setdefault(t, lineno)
    return by_frame, line_of, (img_w, img_h)


def parse_stream(data: bytes | str, format_tag: str = "jsonl") -> list[FrameDetections]:
    """Parse a detection stream into frames in ascending order.

    Frames absent between the first and last frame present come back empty.
    MOT rows are top-left anchored pixels normalized by the header image size.
    """
    frames, _ = _parse(data, format_tag, labeled=False)
    return frames


def parse_labeled(data: bytes | str, format_tag: str = "jsonl") -> list[LabeledFrame]:
    """Like :func:`parse_stream` but keeps identities (JSONL ``id`` / MOT id column).

    JSONL detections without an ``id`` get their in-frame index.
    """
    frames, _ = _parse(data, format_tag, labeled=True)
    return frames


def mot_image_size(data: bytes | str) -> tuple[int, int]:
    _, size = _parse(data, "mot", labeled=False)
    return size


def _parse(data, format_tag: str, labeled: bool):
    if format_tag not in FORMATS:
        raise ValueError(f"unknown format {format_tag!r}; expected one of {FORMATS}")
    text = _decode(data)
    size = None
    if format_tag == "jsonl":
        by_frame, line_of = _parse_jsonl(text, labeled)
    else:
        by_frame, line_of, size = _parse_mot(text, labeled)
    frames = _fill_gaps(by_frame, LabeledFrame if labeled else FrameDetections)
    _check_embedding_dims(frames, line_of)
    return frames, size


# ---------------------------------------------------------------- serialization

def _det_json(det: Detection, ident: int | None = None) -> dict:
    out = {"box": list(det.box.as_tuple()), "conf": det.confidence, "class": det.class_id, "label": det.class_name}
    if det.embedding is not None:
        out["emb"] = list(det.embedding)
    if ident is not None:
        out["id"] = ident
    return out


def frame_to_jsonl(frame: FrameDetections | LabeledFrame) -> str:
    if isinstance(frame, LabeledFrame):
        dets = [_det_json(d, i) for i, d in frame.items]
    else:
        dets = [_det_json(d) for d in frame.detections]
    return json.dumps({"frame": frame.frame_index, "detections": dets}, separators=(",", ":"))


def _mot_rows(frame_index: int, pairs, img_w: int, img_h: int) -> list[str]:
    rows = []
    for ident, det in pairs:
        left, top, w, h = det.box.to_pixels_ltwh(img_w, img_h)
        rows.append(f"{frame_index},{ident},{left!r},{top!r},{w!r},{h!r},{det.confidence!r},{det.class_id},-1,-1")
    return rows


def serialize(frames: Sequence[FrameDetections | LabeledFrame], format_tag: str = "jsonl",
              image_size: tuple[int, int] = (1000, 1000)) -> str:
    """Inverse of :func:`parse_stream` / :func:`parse_labeled`.

    MOT output cannot carry labels, embeddings, or leading/trailing empty frames.
    """
    if format_tag == "jsonl":
        return "".join(frame_to_jsonl(f) + "\n" for f in frames)
    if format_tag != "mot":
        raise ValueError(f"unknown format {format_tag!r}")
    img_w, img_h = image_size
    lines = [f"#{img_w},{img_h}"]
    for fr in frames:
        if isinstance(fr, LabeledFrame):
            pairs = fr.items
        else:
            pairs = [(-1, d) for d in fr.detections]
        lines.extend(_mot_rows(fr.frame_index, pairs, img_w, img_h))
    return "\n".join(lines) + "\n"
