"""Graph convolution stack, detection/tracking losses and manual backprop.

Layer update: ``H[l+1] = relu(A @ H[l] @ W[l])``. Gradients are derived by
hand (no autodiff framework) and checked against central differences in the
test suite.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "graphtrack-gnn"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: int, where: str = "activation"):
        self.layer = layer
        super().__init__(f"non-finite {where} at layer {layer}")


@dataclass
class GnnParams:
    layers: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        self.layers = [np.asarray(w, dtype=np.float64) for w in self.layers]
        for k in range(1, len(self.layers)):
            if self.layers[k - 1].shape[1] != self.layers[k].shape[0]:
                raise ValueError(f"layer {k} input dim {self.layers[k].shape[0]} does not chain "
                                 f"with layer {k - 1} output dim {self.layers[k - 1].shape[1]}")
        if self.activation != "relu":
            raise ValueError("only relu activation is supported")

    @property
    def dims(self) -> list[int]:
        if not self.layers:
            return []
        return [self.layers[0].shape[0]] + [w.shape[1] for w in self.layers]

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    def copy(self) -> "GnnParams":
        return GnnParams([w.copy() for w in self.layers], self.activation)


def init_params(dims: Sequence[int], seed: int = 0) -> GnnParams:
    """Fan-scaled uniform init, one seeded generator for the whole stack."""
    rng = np.random.default_rng(seed)
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / (d_in + d_out))
        layers.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
    return GnnParams(layers)


@dataclass
class Activations:
    hidden: list[np.ndarray]   # H[0..L]
    pre: list[np.ndarray]      # Z[1..L] (pre-ReLU), pre[l] feeds hidden[l + 1]
    propagated: list[np.ndarray]  # A @ H[l], cached for the weight gradient

    @property
    def output(self) -> np.ndarray:
        return self.hidden[-1]


def gcn_forward(h0: np.ndarray, a: np.ndarray, params: GnnParams) -> Activations:
    h = np.asarray(h0, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if h.ndim != 2 or a.shape != (h.shape[0], h.shape[0]):
        raise ValueError(f"layer 0: adjacency shape {a.shape} incompatible with features {h.shape}")
    hidden, pre, prop = [h], [], []
    for l, w in enumerate(params.layers):
        if h.shape[1] != w.shape[0]:
            raise ValueError(f"layer {l}: feature dim {h.shape[1]} != weight rows {w.shape[0]}")
        with np.errstate(over="ignore", invalid="ignore"):
            ah = a @ h
            z = ah @ w
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(l)
        h = np.maximum(z, 0.0)
        prop.append(ah)
        pre.append(z)
        hidden.append(h)
    return Activations(hidden, pre, prop)


def gcn_backward(acts: Activations, a: np.ndarray, params: GnnParams,
                 grad_out: np.ndarray, wrt_layer: int | None = None):
    """Backprop ``dLoss/dH[L]`` through the stack.

    Returns the weight gradients, and additionally ``dLoss/dH[wrt_layer]`` when
    ``wrt_layer`` is given.
    """
    grads = [None] * params.layer_count
    g = grad_out
    g_at = grad_out if wrt_layer == params.layer_count else None
    for l in range(params.layer_count - 1, -1, -1):
        dz = g * (acts.pre[l] > 0.0)
        grads[l] = acts.propagated[l].T @ dz
        if not np.all(np.isfinite(grads[l])):
            raise NonFiniteError(l, "gradient")
        if l > 0 or wrt_layer == 0:
            g = a.T @ (dz @ params.layers[l].T)
            if wrt_layer == l:
                g_at = g
    if wrt_layer is not None:
        return grads, g_at
    return grads


# ---------------------------------------------------------------- losses

@dataclass
class LossWeights:
    det: float = 1.0
    track: float = 1.0
    reg: float = 0.1

    def __post_init__(self):
        if self.det < 0 or self.track < 0 or self.reg < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    l_bbox: float = 0.0
    l_cls: float = 0.0
    l_det: float = 0.0
    l_track_edge: float = 0.0
    l_track_temporal: float = 0.0
    l_track: float = 0.0
    l_total: float = 0.0
    lam_det: float = 1.0
    lam_track: float = 1.0
    lam_reg: float = 0.1

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def detection_loss(pred_boxes, pred_class_logits, gt_boxes, gt_classes) -> tuple[float, float]:
    """Mean L1 box error (over pairs and coordinates) and mean softmax cross-entropy."""
    pb = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gb = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(pb) == 0:
        log.info("detection_loss: empty match set, both terms are 0")
        return 0.0, 0.0
    logits = np.asarray(pred_class_logits, dtype=np.float64)
    cls = np.asarray(gt_classes, dtype=np.int64)
    l_bbox = float(np.mean(np.abs(pb - gb)))
    shift = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - shift).sum(axis=1)) + shift[:, 0]
    l_cls = float(np.mean(lse - logits[np.arange(len(cls)), cls]))
    return l_bbox, l_cls


def tracking_loss(emb_t, edges_t, emb_t1, correspondence, lam_reg: float = 0.1):
    """Edge-consistency and temporal-drift terms over final-layer embeddings.

    ``edges_t`` is ``(i, j)`` index arrays into ``emb_t``; ``correspondence`` is
    ``(src, dst)`` mapping rows of ``emb_t`` to rows of ``emb_t1``.
    Returns ``(edge, temporal, edge + lam_reg * temporal)``.
    """
    edge, temporal, _, _ = _tracking_terms(emb_t, edges_t, emb_t1, correspondence, need_grad=False)
    return edge, temporal, edge + lam_reg * temporal


def _tracking_terms(emb_t, edges_t, emb_t1, correspondence, need_grad: bool):
    e0 = np.asarray(emb_t, dtype=np.float64)
    e1 = np.asarray(emb_t1, dtype=np.float64)
    ii, jj = (np.asarray(x, dtype=np.int64) for x in edges_t)
    src, dst = (np.asarray(x, dtype=np.int64) for x in correspondence)
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite losses are checked by callers
        diff_e = e0[ii] - e0[jj]
        diff_t = e1[dst] - e0[src]
        edge = float(np.sum(diff_e * diff_e))
        temporal = float(np.sum(diff_t * diff_t))
    if not need_grad:
        return edge, temporal, None, None
    g_edge0 = np.zeros_like(e0)
    np.add.at(g_edge0, ii, 2.0 * diff_e)
    np.add.at(g_edge0, jj, -2.0 * diff_e)
    g_temp0 = np.zeros_like(e0)
    g_temp1 = np.zeros_like(e1)
    np.add.at(g_temp1, dst, 2.0 * diff_t)
    np.add.at(g_temp0, src, -2.0 * diff_t)
    return edge, temporal, (g_edge0, g_temp0), g_temp1


def total_loss(l_det: float, l_track: float, lam_det: float = 1.0, lam_track: float = 1.0) -> float:
    if lam_det < 0 or lam_track < 0:
        raise ValueError("loss weights must be non-negative")
    return lam_det * l_det + lam_track * l_track


# ---------------------------------------------------------------- training

@dataclass
class GraphPair:
    """One supervised example: consecutive-frame graphs plus supervision.

    ``det`` optionally holds ``(pred_boxes, pred_logits, gt_boxes, gt_classes)``
    for the detection term; it does not depend on the GNN weights.
    """

    h0_t: np.ndarray
    a_t: np.ndarray
    edges_t: tuple[np.ndarray, np.ndarray]
    h0_t1: np.ndarray
    a_t1: np.ndarray
    correspondence: tuple[np.ndarray, np.ndarray]
    det: tuple | None = None


def loss_and_gradients(params: GnnParams, pair: GraphPair, weights: LossWeights = LossWeights()):
    """Forward both graphs with shared weights; return (LossBreakdown, dL/dW list)."""
    acts0 = gcn_forward(pair.h0_t, pair.a_t, params)
    acts1 = gcn_forward(pair.h0_t1, pair.a_t1, params)
    edge, temporal, g0, g1 = _tracking_terms(acts0.output, pair.edges_t, acts1.output,
                                             pair.correspondence, need_grad=True)
    l_bbox, l_cls = detection_loss(*pair.det) if pair.det is not None else (0.0, 0.0)
    l_det = l_bbox + l_cls
    l_track = edge + weights.reg * temporal
    l_total = total_loss(l_det, l_track, weights.det, weights.track)
    if not math.isfinite(l_total):
        raise NonFiniteError(params.layer_count, "loss")
    g_out0 = weights.track * (g0[0] + weights.reg * g0[1])
    g_out1 = weights.track * weights.reg * g1
    grads0 = gcn_backward(acts0, pair.a_t, params, g_out0)
    grads1 = gcn_backward(acts1, pair.a_t1, params, g_out1)
    grads = [x + y for x, y in zip(grads0, grads1)]
    bd = LossBreakdown(l_bbox, l_cls, l_det, edge, temporal, l_track, l_total,
                       weights.det, weights.track, weights.reg)
    return bd, grads


def batch_loss_and_gradients(params: GnnParams, batch: Sequence[GraphPair], weights: LossWeights = LossWeights()):
    """Mean loss and gradient over a batch, reduced in batch order."""
    if not batch:
        raise ValueError("empty batch")
    total = None
    grads = [np.zeros_like(w) for w in params.layers]
    fields = ("l_bbox", "l_cls", "l_det", "l_track_edge", "l_track_temporal", "l_track", "l_total")
    sums = dict.fromkeys(fields, 0.0)
    for pair in batch:
        bd, g = loss_and_gradients(params, pair, weights)
        for k in fields:
            sums[k] += getattr(bd, k)
        for acc, gl in zip(grads, g):
            acc += gl
    n = len(batch)
    total = LossBreakdown(**{k: v / n for k, v in sums.items()},
                          lam_det=weights.det, lam_track=weights.track, lam_reg=weights.reg)
    return total, [g / n for g in grads]


def evaluate_loss(params: GnnParams, batch: Sequence[GraphPair], weights: LossWeights = LossWeights()) -> LossBreakdown:
    return batch_loss_and_gradients(params, batch, weights)[0]


def train_step(params: GnnParams, batch: Sequence[GraphPair], lr: float,
               weights: LossWeights = LossWeights(),
               velocity: list[np.ndarray] | None = None, momentum: float = 0.0):
    """One gradient-descent step. Returns ``(new_params, post_step_breakdown)``.

    With ``momentum > 0`` a ``velocity`` buffer list is updated in place.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    _, grads = batch_loss_and_gradients(params, batch, weights)
    new_layers = []
    for k, (w, g) in enumerate(zip(params.layers, grads)):
        step = g
        if momentum > 0.0 and velocity is not None:
            velocity[k] = momentum * velocity[k] + g
            step = velocity[k]
        new_layers.append(w - lr * step)
    new = GnnParams(new_layers, params.activation)
    bd = evaluate_loss(new, batch, weights)
    if not math.isfinite(bd.l_total):
        raise NonFiniteError(new.layer_count, "loss")
    return new, bd


@dataclass
class FitResult:
    params: GnnParams
    history: list[LossBreakdown] = field(default_factory=list)
    initial: LossBreakdown | None = None


def fit(params: GnnParams, batch: Sequence[GraphPair], steps: int, lr: float = 1e-3,
        weights: LossWeights = LossWeights(), momentum: float = 0.0,
        halve_on_plateau: bool = False, patience: int = 5, callback=None) -> FitResult:
    """Full-batch gradient descent for ``steps`` steps."""
    result = FitResult(params, initial=evaluate_loss(params, batch, weights))
    velocity = [np.zeros_like(w) for w in params.layers] if momentum > 0 else None
    best = result.initial.l_total
    stale = 0
    for step in range(steps):
        params, bd = train_step(params, batch, lr, weights, velocity, momentum)
        result.history.append(bd)
        if callback is not None:
            callback(step, bd)
        if halve_on_plateau:
            if bd.l_total < best - 1e-12:
                best, stale = bd.l_total, 0
            else:
                stale += 1
                if stale >= patience:
                    lr, stale = lr / 2.0, 0
    result.params = params
    return result


# ---------------------------------------------------------------- checkpoints

def params_to_json(params: GnnParams) -> str:
    return json.dumps({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "activation": params.activation,
        "dims": params.dims,
        "layers": [w.ravel().tolist() for w in params.layers],
    })


def params_from_json(text: str) -> GnnParams:
    obj = json.loads(text)
    if obj.get("format") != CHECKPOINT_FORMAT or obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a graphtrack GNN checkpoint (format/version mismatch)")
    dims = obj["dims"]
    layers = []
    for k, flat in enumerate(obj["layers"]):
        w = np.asarray(flat, dtype=np.float64)
        if w.size != dims[k] * dims[k + 1]:
            raise ValueError(f"layer {k}: expected {dims[k]}x{dims[k + 1]} weights, got {w.size}")
        layers.append(w.reshape(dims[k], dims[k + 1]))
    return GnnParams(layers, obj.get("activation", "relu"))


def save_params(params: GnnParams, path: str | Path) -> None:
    Path(path).write_text(params_to_json(params) + "\n", encoding="utf-8")


def load_params(path: str | Path) -> GnnParams:
    return params_from_json(Path(path).read_text(encoding="utf-8"))
