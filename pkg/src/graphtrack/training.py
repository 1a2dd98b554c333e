"""Supervision plumbing: label detection streams with ground-truth ids and
turn consecutive labeled frames into GNN training pairs."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import kernels
from .detect_io import FrameDetections, LabeledFrame, boxes_array
from .gnn import GraphPair
from .graph import EdgeParams, adjacency, build_graph
from .tracker import node_inputs


def label_stream(stream: Sequence[FrameDetections], gt: Sequence[LabeledFrame],
                 iou_threshold: float = 0.5) -> list[LabeledFrame]:
    """Give each detection the id of its IoU-matched ground-truth object.

    Unmatched detections (false positives) are dropped.
    """
    gmap = {g.frame_index: g for g in gt}
    out = []
    for fr in stream:
        g = gmap.get(fr.frame_index)
        if g is None or not g.items or not fr.detections:
            out.append(LabeledFrame(fr.frame_index, ()))
            continue
        ov = kernels.iou_matrix(boxes_array(fr.detections), boxes_array(g.detections))
        rows, cols = kernels.linear_assignment(np.where(ov >= iou_threshold, 1.0 - ov, np.inf))
        items = sorted(((g.items[c][0], fr.detections[r]) for r, c in zip(rows, cols)),
                       key=lambda it: it[0])
        out.append(LabeledFrame(fr.frame_index, tuple(items)))
    return out


def _motions(frame: LabeledFrame, last_seen: dict) -> np.ndarray:
    m = np.zeros((len(frame.items), 2))
    for k, (oid, det) in enumerate(frame.items):
        if oid in last_seen:
            box, t = last_seen[oid]
            gap = frame.frame_index - t
            m[k] = ((det.box.cx - box.cx) / gap, (det.box.cy - box.cy) / gap)
    return m


def graph_pairs(frames: Sequence[LabeledFrame], edge: EdgeParams, adjacency_mode: str = "normalized",
                in_dim: int | None = None) -> list[GraphPair]:
    """One pair per consecutive frame couple sharing at least one object id.

    Node features are padded or truncated to ``in_dim`` (default: the widest
    feature dimension seen), so every pair feeds the same first layer.
    """
    graphs = []
    last_seen: dict[int, tuple] = {}
    for fr in frames:
        g = build_graph(fr.frame_index, fr.detections, _motions(fr, last_seen), edge)
        graphs.append((fr, g))
        for oid, det in fr.items:
            last_seen[oid] = (det.box, fr.frame_index)
    if in_dim is None:
        in_dim = max((g.feature_dim for _, g in graphs if g.n), default=0)
    pairs = []
    for (f0, g0), (f1, g1) in zip(graphs, graphs[1:]):
        if g0.n == 0 or g1.n == 0:
            continue
        index1 = {oid: k for k, oid in enumerate(f1.ids)}
        src = [k for k, oid in enumerate(f0.ids) if oid in index1]
        if not src:
            continue
        dst = [index1[f0.ids[k]] for k in src]
        pairs.append(GraphPair(
            node_inputs(g0, in_dim), adjacency(g0, adjacency_mode), (g0.edge_i, g0.edge_j),
            node_inputs(g1, in_dim), adjacency(g1, adjacency_mode),
            (np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)),
        ))
    return pairs


def input_dim(pairs: Sequence[GraphPair]) -> int:
    if not pairs:
        raise ValueError("no training pairs: supervision has no object visible in consecutive frames")
    return pairs[0].h0_t.shape[1]
