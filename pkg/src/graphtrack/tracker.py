"""Per-frame tracking loop: gate, NMS, ROI, graph, GNN refinement, association."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import kernels
from .detect_io import (FULL_FRAME, BBox, Detection, FrameDetections, LabeledFrame, Roi,
                        apply_roi, refine_box)
from .gnn import GnnParams, gcn_forward, init_params
from .graph import DEFAULT_EDGE_PARAMS, DynamicGraph, EdgeParams, adjacency, build_graph


@dataclass(frozen=True)
class TrackerConfig:
    conf_threshold: float = 0.25
    nms_iou: float = 0.5
    roi: Roi = FULL_FRAME
    max_box_w: float = 1.0
    max_box_h: float = 1.0
    edge: EdgeParams = DEFAULT_EDGE_PARAMS
    adjacency: str = "normalized"
    hidden_dim: int = 32
    layers: int = 2
    seed: int = 0
    beta: float = 0.5
    tau_gate: float = 0.2
    t_max: int = 10
    smoothing: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.conf_threshold <= 1.0:
            raise ValueError("conf_threshold must be in [0, 1]")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValueError("nms_iou must be in (0, 1]")
        if self.adjacency not in ("raw", "normalized"):
            raise ValueError("adjacency must be 'raw' or 'normalized'")
        if self.layers < 1 or self.hidden_dim < 1:
            raise ValueError("layers and hidden_dim must be positive")
        if self.beta < 0 or self.tau_gate <= 0:
            raise ValueError("beta must be >= 0 and tau_gate > 0")
        if self.t_max < 0:
            raise ValueError("t_max must be >= 0")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing must be in [0, 1)")
        if self.max_box_w <= 0 or self.max_box_h <= 0:
            raise ValueError("box size limits must be positive")


@dataclass
class Track:
    track_id: int
    last_box: BBox
    velocity: tuple[float, float]
    last_embedding: np.ndarray
    class_id: int
    last_seen_frame: int
    created_frame: int
    misses: int = 0
    last_detection: Detection | None = None

    def age(self, frame_index: int) -> int:
        return frame_index - self.created_frame

    def predicted_center(self, frame_index: int, use_velocity: bool = True) -> tuple[float, float]:
        if not use_velocity:
            return (self.last_box.cx, self.last_box.cy)
        gap = frame_index - self.last_seen_frame
        return (self.last_box.cx + self.velocity[0] * gap, self.last_box.cy + self.velocity[1] * gap)


@dataclass
class FrameResult:
    frame_index: int
    assignments: list[tuple[int, Detection]]
    seconds: float = 0.0

    def to_labeled(self) -> LabeledFrame:
        return LabeledFrame(self.frame_index, tuple(self.assignments))


@dataclass
class TrackerState:
    config: TrackerConfig = field(default_factory=TrackerConfig)
    params: GnnParams | None = None
    active: list[Track] = field(default_factory=list)
    retired: list[Track] = field(default_factory=list)
    next_id: int = 0
    prev_graph: DynamicGraph | None = None
    last_frame: int = -1
    last_embeddings: np.ndarray | None = None


# ---------------------------------------------------------------- association

def _cos_rows(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cosine matrix between rows and a mask of pairs where both rows are non-zero."""
    na = np.sqrt(np.einsum("ij,ij->i", a, a))
    nb = np.sqrt(np.einsum("ij,ij->i", b, b))
    den = na[:, None] * nb[None, :]
    valid = den > 0
    cos = np.zeros(den.shape)
    np.divide(a @ b.T, den, out=cos, where=valid)
    return cos, valid


def cost_matrix(pred_boxes: np.ndarray, node_boxes: np.ndarray,
                track_emb: np.ndarray | None, node_emb: np.ndarray | None,
                beta: float = 0.5, tau_gate: float = 0.2) -> np.ndarray:
    """``1 - IoU(predicted, node) + beta * (1 - cos)`` with the IoU/distance gate.

    The appearance term is dropped (beta = 0) for pairs where either embedding
    is missing or all-zero.
    """
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    node_boxes = np.asarray(node_boxes, dtype=np.float64).reshape(-1, 4)
    ov = kernels.iou_matrix(pred_boxes, node_boxes)
    cost = 1.0 - ov
    if track_emb is not None and node_emb is not None and beta > 0:
        cos, valid = _cos_rows(np.asarray(track_emb, dtype=np.float64), np.asarray(node_emb, dtype=np.float64))
        cost = cost + np.where(valid, beta * (1.0 - cos), 0.0)
    dx = pred_boxes[:, None, 0] - node_boxes[None, :, 0]
    dy = pred_boxes[:, None, 1] - node_boxes[None, :, 1]
    far = np.sqrt(dx * dx + dy * dy) > tau_gate
    cost[(ov == 0.0) & far] = np.inf
    return cost


def association_cost(track: Track, node_box: BBox, node_embedding, predicted_box: BBox,
                     beta: float = 0.5, tau_gate: float = 0.2) -> float:
    node_emb = None if node_embedding is None else np.asarray(node_embedding, dtype=np.float64)[None, :]
    track_emb = None if track.last_embedding is None else np.asarray(track.last_embedding)[None, :]
    return float(cost_matrix([predicted_box.as_tuple()], [node_box.as_tuple()],
                             track_emb, node_emb, beta, tau_gate)[0, 0])


@dataclass
class Assignment:
    matches: list[tuple[int, int]]
    unmatched_tracks: list[int]
    unmatched_nodes: list[int]

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[r, c] for r, c in self.matches))


def associate(cost: np.ndarray) -> Assignment:
    """Optimal one-to-one matching over the finite entries of ``cost``.

    Rows are tracks (ordered by id), columns are nodes.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        cost = cost.reshape(0, 0)
    rows, cols = kernels.linear_assignment(cost)
    matches = list(zip(rows.tolist(), cols.tolist()))
    mr, mc = set(rows.tolist()), set(cols.tolist())
    return Assignment(matches,
                      [r for r in range(cost.shape[0]) if r not in mr],
                      [c for c in range(cost.shape[1]) if c not in mc])


# ---------------------------------------------------------------- pipeline

def preprocess(frame: FrameDetections, config: TrackerConfig) -> FrameDetections:
    """Confidence gate, class-wise NMS and ROI; surviving detections keep input order."""
    dets = [d for d in frame.detections if d.confidence >= config.conf_threshold]
    if dets:
        scores = np.array([d.confidence for d in dets])
        classes = np.array([d.class_id for d in dets], dtype=np.int64)
        boxes = np.array([d.box.as_tuple() for d in dets])
        keep = np.sort(kernels.nms_keep(boxes, scores, classes, config.nms_iou))
        dets = [dets[i] for i in keep]
    out = apply_roi(FrameDetections(frame.frame_index, tuple(dets)), config.roi)
    if config.max_box_w < 1.0 or config.max_box_h < 1.0:
        out = FrameDetections(out.frame_index,
                              tuple(refine_box(d, config.max_box_w, config.max_box_h) for d in out.detections))
    return out


def _predicted_boxes(tracks: list[Track], t: int, use_velocity: bool = True) -> np.ndarray:
    out = np.empty((len(tracks), 4))
    for k, tr in enumerate(tracks):
        cx, cy = tr.predicted_center(t, use_velocity)
        out[k] = (cx, cy, tr.last_box.w, tr.last_box.h)
    return out


def _provisional_carryover(tracks: list[Track], pred: np.ndarray, boxes: np.ndarray,
                           t: int, tau_gate: float) -> dict[int, tuple[BBox, int]]:
    """Geometry-only matching used to give nodes their motion before the GNN runs."""
    if not tracks or len(boxes) == 0:
        return {}
    ov = kernels.iou_matrix(pred, boxes)
    dx = pred[:, None, 0] - boxes[None, :, 0]
    dy = pred[:, None, 1] - boxes[None, :, 1]
    dist = np.sqrt(dx * dx + dy * dy)
    cost = np.where((ov == 0.0) & (dist > tau_gate), np.inf, dist)
    rows, cols = kernels.linear_assignment(cost)
    return {int(c): (tracks[r].last_box, t - tracks[r].last_seen_frame) for r, c in zip(rows, cols)}


def node_inputs(g: DynamicGraph, in_dim: int) -> np.ndarray:
    x = g.features
    if x.shape[1] == in_dim:
        return x
    out = np.zeros((x.shape[0], in_dim))
    k = min(in_dim, x.shape[1])
    out[:, :k] = x[:, :k]
    return out


def node_embeddings(state: TrackerState, g: DynamicGraph) -> np.ndarray:
    cfg = state.config
    if state.params is None:
        dims = [g.feature_dim] + [cfg.hidden_dim] * cfg.layers
        state.params = init_params(dims, cfg.seed)
    if g.n == 0:
        return np.zeros((0, state.params.dims[-1]))
    a = adjacency(g, cfg.adjacency)
    return gcn_forward(node_inputs(g, state.params.dims[0]), a, state.params).output


def step(state: TrackerState, frame: FrameDetections) -> tuple[TrackerState, FrameResult]:
    """Advance ``state`` by one frame (mutated in place and returned)."""
    t0 = time.perf_counter()
    cfg = state.config
    t = frame.frame_index
    if t <= state.last_frame:
        raise ValueError(f"frame {t} is not after the last processed frame {state.last_frame}")
    clean = preprocess(frame, cfg)
    dets = clean.detections
    tracks = state.active
    temporal = cfg.edge.use_temporal

    # Velocity enters association through motion prediction; the velocity
    # ablation falls back to matching against the last seen box.
    pred = _predicted_boxes(tracks, t, temporal and cfg.edge.use_velocity)
    boxes = np.array([d.box.as_tuple() for d in dets]) if dets else np.zeros((0, 4))
    carry = _provisional_carryover(tracks, pred, boxes, t, cfg.tau_gate) if temporal else {}
    motions = np.zeros((len(dets), 2))
    for k, (prev_box, gap) in carry.items():
        motions[k] = ((dets[k].box.cx - prev_box.cx) / gap, (dets[k].box.cy - prev_box.cy) / gap)
    g = build_graph(t, dets, motions, cfg.edge)
    emb = node_embeddings(state, g)

    if tracks and dets:
        track_emb = np.stack([tr.last_embedding for tr in tracks])
        cost = cost_matrix(pred, boxes, track_emb, emb, cfg.beta, cfg.tau_gate)
        result = associate(cost)
    else:
        result = Assignment([], list(range(len(tracks))), list(range(len(dets))))

    assigned: dict[int, int] = {}
    a = cfg.smoothing
    for r, c in result.matches:
        tr = tracks[r]
        det = dets[c]
        gap = t - tr.last_seen_frame
        if temporal:
            tr.velocity = ((det.box.cx - tr.last_box.cx) / gap, (det.box.cy - tr.last_box.cy) / gap)
        tr.last_box = det.box
        tr.last_embedding = a * tr.last_embedding + (1.0 - a) * emb[c]
        tr.class_id = det.class_id
        tr.last_seen_frame = t
        tr.misses = 0
        tr.last_detection = det
        assigned[c] = tr.track_id

    survivors = []
    matched_rows = {r for r, _ in result.matches}
    for r, tr in enumerate(tracks):
        if r not in matched_rows:
            tr.misses = t - tr.last_seen_frame
            if tr.misses > cfg.t_max:
                state.retired.append(tr)
                continue
        survivors.append(tr)
    for c in result.unmatched_nodes:
        det = dets[c]
        tr = Track(state.next_id, det.box, (0.0, 0.0), emb[c].copy(), det.class_id, t, t, 0, det)
        state.next_id += 1
        survivors.append(tr)
        assigned[c] = tr.track_id
    survivors.sort(key=lambda tr: tr.track_id)
    state.active = survivors
    state.prev_graph = g
    state.last_frame = t
    state.last_embeddings = emb
    items = [(assigned[c], dets[c]) for c in range(len(dets))]
    return state, FrameResult(t, items, time.perf_counter() - t0)


class Tracker:
    """Convenience wrapper owning a :class:`TrackerState`."""

    def __init__(self, config: TrackerConfig | None = None, params: GnnParams | None = None):
        self.state = TrackerState(config or TrackerConfig(), params)

    def step(self, frame: FrameDetections) -> FrameResult:
        _, res = step(self.state, frame)
        return res

    def run(self, frames: Iterable[FrameDetections]) -> Iterator[FrameResult]:
        for fr in frames:
            yield self.step(fr)


def track_stream(frames: Iterable[FrameDetections], config: TrackerConfig | None = None,
                 params: GnnParams | None = None) -> list[FrameResult]:
    return list(Tracker(config, params).run(frames))


def mean_fps(results: list[FrameResult], wall_seconds: float) -> float:
    if wall_seconds <= 0:
        return math.inf
    return len(results) / wall_seconds
