"""Per-frame dynamic graph: node features, edge factors, gating and adjacency."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import kernels
from .detect_io import BBox, Detection, FrameDetections


@dataclass(frozen=True)
class EdgeParams:
    sigma_d: float = 0.1
    sigma_v: float = 0.05
    tau_dist: float = 0.2
    tau_vel: float = 0.05
    gate: str = "or"
    use_velocity: bool = True
    use_appearance: bool = True
    use_temporal: bool = True
    constant_weights: bool = False

    def __post_init__(self):
        if self.sigma_d <= 0 or self.sigma_v <= 0:
            raise ValueError("sigma_d and sigma_v must be positive")
        if self.tau_dist <= 0 or self.tau_vel <= 0:
            raise ValueError("edge thresholds must be positive")
        if self.gate not in ("or", "and"):
            raise ValueError("gate must be 'or' or 'and'")


DEFAULT_EDGE_PARAMS = EdgeParams()


@dataclass(frozen=True)
class NodeFeature:
    spatial: tuple[float, float, float, float]
    motion: tuple[float, float] = (0.0, 0.0)
    appearance: tuple[float, ...] | None = None

    @property
    def center(self) -> tuple[float, float]:
        return (self.spatial[0], self.spatial[1])

    @property
    def composite(self) -> np.ndarray:
        parts = list(self.spatial) + list(self.motion)
        if self.appearance is not None:
            parts += list(self.appearance)
        return np.asarray(parts, dtype=np.float64)


class GraphEdge(NamedTuple):
    i: int
    j: int
    weight: float
    factors: tuple[float, float, float]


def node_feature(det: Detection, prev: tuple[BBox, int] | None = None) -> NodeFeature:
    """Build a node; motion is the center displacement per frame since ``prev``."""
    b = det.box
    motion = (0.0, 0.0)
    if prev is not None:
        prev_box, gap = prev
        if gap < 1:
            raise ValueError("frame gap must be >= 1")
        motion = ((b.cx - prev_box.cx) / gap, (b.cy - prev_box.cy) / gap)
    return NodeFeature(b.as_tuple(), motion, det.embedding)


def _cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = math.sqrt(float(a @ a)) * math.sqrt(float(b @ b))
    if den == 0:
        return 0.0
    return float(a @ b) / den


def edge_factors(a: NodeFeature, b: NodeFeature) -> tuple[float, float, float]:
    d = math.hypot(a.spatial[0] - b.spatial[0], a.spatial[1] - b.spatial[1])
    dv = math.hypot(a.motion[0] - b.motion[0], a.motion[1] - b.motion[1])
    if a.appearance is not None and b.appearance is not None:
        s = _cosine(a.appearance, b.appearance)
    else:
        s = 1.0
    return (d, dv, s)


def edge_weight(factors: tuple[float, float, float], params: EdgeParams = DEFAULT_EDGE_PARAMS) -> float:
    d, dv, s = factors
    if params.constant_weights:
        return 1.0
    w = math.exp(-d / params.sigma_d)
    if params.use_velocity:
        w *= math.exp(-dv / params.sigma_v)
    if params.use_appearance:
        w *= max(0.0, s)
    return w


def edge_gate(d: float, dv: float, params: EdgeParams = DEFAULT_EDGE_PARAMS) -> bool:
    if params.gate == "or":
        return d < params.tau_dist or dv < params.tau_vel
    return d < params.tau_dist and dv < params.tau_vel


@dataclass(frozen=True, eq=False)
class DynamicGraph:
    """Nodes as stacked arrays plus an edge list stored as parallel arrays.

    ``features`` rows are node composites (spatial, motion, appearance).
    """

    frame_index: int
    centers: np.ndarray
    sizes: np.ndarray
    motions: np.ndarray
    appearance: np.ndarray | None
    edge_i: np.ndarray
    edge_j: np.ndarray
    edge_w: np.ndarray
    edge_factors: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.centers)

    @property
    def features(self) -> np.ndarray:
        parts = [self.centers, self.sizes, self.motions]
        if self.appearance is not None:
            parts.append(self.appearance)
        return np.hstack(parts) if self.n else np.zeros((0, self.feature_dim))

    @property
    def feature_dim(self) -> int:
        return 6 + (self.appearance.shape[1] if self.appearance is not None else 0)

    @property
    def nodes(self) -> list[NodeFeature]:
        out = []
        for k in range(self.n):
            app = tuple(self.appearance[k]) if self.appearance is not None else None
            out.append(NodeFeature(tuple(np.r_[self.centers[k], self.sizes[k]]),
                                   tuple(self.motions[k]), app))
        return out

    @property
    def edges(self) -> list[GraphEdge]:
        return [GraphEdge(int(i), int(j), float(w), tuple(map(float, f)))
                for i, j, w, f in zip(self.edge_i, self.edge_j, self.edge_w, self.edge_factors)]

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.edge_i.tolist(), self.edge_j.tolist()))

    def to_json(self) -> str:
        return json.dumps({
            "frame": self.frame_index,
            "nodes": self.features.tolist(),
            "edges": [[int(i), int(j), float(w)] for i, j, w in zip(self.edge_i, self.edge_j, self.edge_w)],
        }, separators=(",", ":"))


def empty_graph(frame_index: int = -1) -> DynamicGraph:
    z = np.zeros((0, 2))
    e = np.zeros(0, dtype=np.int64)
    return DynamicGraph(frame_index, z, z.copy(), z.copy(), None, e, e.copy(), np.zeros(0), np.zeros((0, 3)))


def build_graph(frame_index: int, dets: Sequence[Detection], motions: np.ndarray | None,
                params: EdgeParams = DEFAULT_EDGE_PARAMS) -> DynamicGraph:
    """Assemble nodes and gated, weighted edges from detections and per-node motion."""
    n = len(dets)
    if n == 0:
        return empty_graph(frame_index)
    boxes = np.array([d.box.as_tuple() for d in dets], dtype=np.float64)
    centers = boxes[:, :2].copy()
    sizes = boxes[:, 2:].copy()
    if motions is None or not params.use_temporal:
        motions = np.zeros((n, 2))
    else:
        motions = np.asarray(motions, dtype=np.float64).reshape(n, 2)
    appearance = None
    if params.use_appearance and all(d.embedding is not None for d in dets):
        appearance = np.array([d.embedding for d in dets], dtype=np.float64)
    ii, jj, w, d, dv, s = kernels.pair_edges(
        centers, motions, appearance, params.sigma_d, params.sigma_v,
        params.use_velocity, params.use_appearance, params.constant_weights,
        params.tau_dist, params.tau_vel, params.gate == "or",
    )
    factors = np.column_stack([d, dv, s]) if len(d) else np.zeros((0, 3))
    return DynamicGraph(frame_index, centers, sizes, motions, appearance, ii, jj, w, factors)


def update_graph(prev: DynamicGraph | None, frame: FrameDetections,
                 carryover: Mapping[int, tuple[BBox, int]] | None = None,
                 params: EdgeParams = DEFAULT_EDGE_PARAMS) -> DynamicGraph:
    """Replace ``prev`` with the graph for ``frame``.

    Departed objects' nodes are dropped (every node is a current detection).
    ``carryover`` maps a node index to its object's previous box and the frame
    gap, giving that node's motion; other nodes start at zero motion.
    """
    carryover = carryover or {}
    dets = frame.detections
    motions = np.zeros((len(dets), 2))
    for k, det in enumerate(dets):
        if k in carryover:
            motions[k] = node_feature(det, carryover[k]).motion
    return build_graph(frame.frame_index, dets, motions, params)


def adjacency(g: DynamicGraph, mode: str = "normalized") -> np.ndarray:
    """Dense adjacency: ``raw`` symmetric weights, or row-normalized ``A + I``."""
    n = g.n
    a = np.zeros((n, n))
    a[g.edge_i, g.edge_j] = g.edge_w
    a[g.edge_j, g.edge_i] = g.edge_w
    if mode == "raw":
        return a
    if mode != "normalized":
        raise ValueError(f"unknown adjacency mode {mode!r}")
    a += np.eye(n)
    return a / a.sum(axis=1, keepdims=True)
