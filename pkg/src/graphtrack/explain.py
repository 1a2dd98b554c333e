"""Class-activation attributions over channel maps, and attribution metrics.

An activation stack is a ``(K, Z)`` array: K channels over Z units (pixels of
an external map, or graph nodes when the stack is a GNN layer transposed).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .gnn import GnnParams, gcn_backward, gcn_forward

EPS = 1e-12


class NoDominantDirection(ValueError):
    def __init__(self):
        super().__init__("no dominant direction: activation matrix is zero")


class UndefinedCorrelation(ValueError):
    pass


@dataclass
class ActivationStack:
    maps: np.ndarray  # (K, Z)
    shape: tuple[int, ...] = ()  # spatial shape of one map, product == Z
    source: str = "external"

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim == 1:
            self.maps = self.maps[None, :]
        if self.maps.ndim > 2:
            self.shape = self.maps.shape[1:]
            self.maps = self.maps.reshape(self.maps.shape[0], -1)
        if self.maps.shape[0] < 1:
            raise ValueError("activation stack needs at least one channel")
        if not self.shape:
            self.shape = (self.maps.shape[1],)

    @property
    def channels(self) -> int:
        return self.maps.shape[0]

    @property
    def units(self) -> int:
        return self.maps.shape[1]


@dataclass
class AttributionMap:
    values: np.ndarray
    method: str
    target: int | str | None = None
    shape: tuple[int, ...] = ()
    channel_weights: np.ndarray | None = None
    residual: float | None = None
    info: dict = field(default_factory=dict)

    def to_json(self) -> str:
        out = {
            "method": self.method,
            "target": self.target,
            "shape": list(self.shape or (len(self.values),)),
            "values": np.asarray(self.values).tolist(),
        }
        if self.channel_weights is not None:
            out["channel_weights"] = np.asarray(self.channel_weights).tolist()
        if self.residual is not None:
            out["eigen_residual"] = self.residual
        out.update(self.info)
        return json.dumps(out)


class ScoreFn(Protocol):
    """Scalar target score of an activation stack with its exact gradient."""

    def __call__(self, acts: np.ndarray) -> float: ...

    def grad(self, acts: np.ndarray) -> np.ndarray: ...


# ---------------------------------------------------------------- CAMs

def _as_grads(acts: ActivationStack, raw) -> np.ndarray:
    g = np.asarray(raw, dtype=np.float64)
    if g.shape not in (acts.maps.shape, (acts.channels, *acts.shape)):
        raise ValueError(f"gradient shape {g.shape} does not match activations {acts.maps.shape}")
    return g.reshape(acts.maps.shape)


def grad_cam(acts: ActivationStack, grads, target=None) -> AttributionMap:
    g = _as_grads(acts, grads)
    alpha = g.mean(axis=1)
    cam = np.maximum(alpha @ acts.maps, 0.0)
    return AttributionMap(cam, "grad-cam", target, acts.shape, alpha)


def grad_cam_pp_weights(acts: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Per-channel weights from first-derivative powers of an exponentiated score.

    Per unit: ``g^2 / (2 g^2 + sum_units(A * g^3))``, summed over the channel's units.
    """
    g2 = g * g
    g3 = g2 * g
    denom = 2.0 * g2 + (acts * g3).sum(axis=1, keepdims=True)
    denom = np.where(np.abs(denom) < EPS, EPS, denom)
    return (g2 / denom).sum(axis=1)


def grad_cam_pp(acts: ActivationStack, score: ScoreFn | None = None, target=None,
                grads=None) -> AttributionMap:
    """Grad-CAM++ from a score's exact gradient, or from supplied ``grads``."""
    if (score is None) == (grads is None):
        raise ValueError("pass exactly one of score or grads")
    raw = score.grad(acts.maps) if score is not None else grads
    g = _as_grads(acts, raw)
    alpha = grad_cam_pp_weights(acts.maps, g)
    cam = np.maximum(alpha @ acts.maps, 0.0)
    return AttributionMap(cam, "grad-cam++", target, acts.shape, alpha)


@dataclass
class EigenResult:
    vector: np.ndarray  # dominant eigenvector of M^T M (channel space)
    value: float
    residual: float
    iterations: int


def dominant_eigenvector(m: np.ndarray, tol: float = 1e-10, max_iter: int = 1000) -> EigenResult:
    """Dominant eigenpair of ``M^T M`` by power iteration on the smaller Gram matrix.

    Starts from the normalized all-ones vector. If the gated residual is not
    met after ``max_iter`` steps the iterate is polished with Rayleigh-quotient
    iteration, which converges to the same eigenvector from a close start.
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.any(m):
        raise NoDominantDirection()
    units, chans = m.shape
    use_channels = chans <= units
    gram = m.T @ m if use_channels else m @ m.T
    x = np.ones(gram.shape[0]) / math.sqrt(gram.shape[0])
    it = 0
    for it in range(1, max_iter + 1):
        y = gram @ x
        ny = np.linalg.norm(y)
        if ny == 0:
            # start vector orthogonal to the range; fall back to a basis vector
            x = np.zeros_like(x)
            x[int(np.argmax(np.diag(gram)))] = 1.0
            continue
        y /= ny
        delta = np.linalg.norm(y - x)
        x = y
        if delta < tol:
            break
    v = x if use_channels else m.T @ x
    v = v / np.linalg.norm(v)
    g = m.T @ m
    gnorm = np.linalg.norm(g)
    lam = float(v @ g @ v)
    res = float(np.linalg.norm(g @ v - lam * v))
    polish = 0
    while res > 1e-9 * gnorm and polish < 20:
        polish += 1
        try:
            w = np.linalg.solve(g - lam * np.eye(len(v)), v)
        except np.linalg.LinAlgError:
            break
        nw = np.linalg.norm(w)
        if not np.isfinite(nw) or nw == 0:
            break
        v = w / nw
        lam = float(v @ g @ v)
        res = float(np.linalg.norm(g @ v - lam * v))
    return EigenResult(v, lam, res, it + polish)


def sign_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    nz = np.flatnonzero(np.abs(x) > 0)
    if len(nz) and x[nz[0]] < 0:
        return -x
    return x


def eigen_cam(acts: ActivationStack, target=None) -> AttributionMap:
    """Project units onto the principal channel direction; unit-L2, sign-fixed."""
    m = acts.maps.T  # units x channels
    eig = dominant_eigenvector(m)
    gnorm = float(np.linalg.norm(m.T @ m))
    if eig.residual > 1e-8 * gnorm:
        raise FloatingPointError(f"eigen residual {eig.residual:.3e} exceeds 1e-8 * ||M^T M||_F")
    proj = m @ eig.vector
    n = np.linalg.norm(proj)
    if n == 0:
        raise NoDominantDirection()
    values = sign_normalize(proj / n)
    return AttributionMap(values, "eigen-cam", target, acts.shape, eig.vector, eig.residual,
                          {"eigenvalue": eig.value})


# ---------------------------------------------------------------- scores

@dataclass
class LinearScore:
    """``y = sum(W * A)``: the exact-gradient reference score."""

    weights: np.ndarray

    def __call__(self, acts: np.ndarray) -> float:
        return float(np.sum(self.weights * acts))

    def grad(self, acts: np.ndarray) -> np.ndarray:
        return np.array(self.weights, dtype=np.float64, copy=True)


@dataclass
class PlantedCase:
    """Linear two-class model whose target score lives on a few planted units.

    Background units carry weak activations and no weight. Class 1 scores
    ``sum(W * A)``; class 0 is a constant bias at half the unmasked class-1
    score, so removing the planted evidence flips the decision.
    """

    acts: np.ndarray  # (K, n)
    weights: np.ndarray  # (K, n), zero off the planted units
    planted: np.ndarray
    bias: float

    @property
    def score(self) -> LinearScore:
        return LinearScore(self.weights)

    def scores(self, acts: np.ndarray) -> np.ndarray:
        return np.array([self.bias, float(np.sum(self.weights * acts))])

    def true_attribution(self) -> np.ndarray:
        return (self.weights * self.acts).sum(axis=0)

    def stack(self) -> ActivationStack:
        return ActivationStack(self.acts, source="planted")


def planted_case(rng: np.random.Generator, units: int = 32, channels: int = 4,
                 planted: int = 3) -> PlantedCase:
    acts = rng.uniform(0.0, 0.2, size=(channels, units))
    where = np.sort(rng.choice(units, size=planted, replace=False))
    acts[:, where] += rng.uniform(0.5, 1.0, size=(channels, planted))
    weights = np.zeros((channels, units))
    weights[:, where] = rng.uniform(0.5, 1.5, size=(channels, planted))
    bias = 0.5 * float(np.sum(weights * acts))
    return PlantedCase(acts, weights, where, bias)


def planted_suite(seed: int, cases: int = 20, **kw) -> list[PlantedCase]:
    rng = np.random.default_rng(seed)
    return [planted_case(rng, **kw) for _ in range(cases)]


class GnnAssociationScore:
    """Association logit of a track against one node, as a function of one GNN layer.

    ``y = -beta * (1 - cos(track_embedding, H_L[node]))`` where ``H_L`` is
    recomputed from the supplied layer activations (the IoU part of the cost
    does not depend on activations and is dropped). Activations are passed as
    ``(K, n)``, i.e. the layer matrix transposed.
    """

    def __init__(self, params: GnnParams, adjacency: np.ndarray, track_embedding, node: int,
                 layer: int, beta: float = 0.5):
        self.params = params
        self.a = np.asarray(adjacency, dtype=np.float64)
        self.e = np.asarray(track_embedding, dtype=np.float64)
        self.node = node
        self.layer = layer
        self.beta = beta
        self._tail = GnnParams(params.layers[layer:]) if layer < params.layer_count else None

    def _out(self, acts: np.ndarray):
        h = np.asarray(acts, dtype=np.float64).T
        if self._tail is None:
            return h, None
        fw = gcn_forward(h, self.a, self._tail)
        return fw.output, fw

    def logits(self, acts: np.ndarray) -> np.ndarray:
        out, _ = self._out(acts)
        ne = np.linalg.norm(self.e)
        no = np.linalg.norm(out, axis=1)
        den = ne * no
        cos = np.zeros(len(out))
        np.divide(out @ self.e, den, out=cos, where=den > 0)
        return -self.beta * (1.0 - cos)

    def __call__(self, acts: np.ndarray) -> float:
        return float(self.logits(acts)[self.node])

    def grad(self, acts: np.ndarray) -> np.ndarray:
        out, fw = self._out(acts)
        f = out[self.node]
        nf, ne = np.linalg.norm(f), np.linalg.norm(self.e)
        g_out = np.zeros_like(out)
        if nf > 0 and ne > 0:
            cos = float(f @ self.e) / (nf * ne)
            g_out[self.node] = self.beta * (self.e / (nf * ne) - cos * f / (nf * nf))
        if fw is None:
            return g_out.T
        _, g_in = gcn_backward(fw, self.a, self._tail, g_out, wrt_layer=0)
        return g_in.T


# ---------------------------------------------------------------- metrics

def _mask(acts: np.ndarray, units, mode: str) -> np.ndarray:
    out = np.array(acts, dtype=np.float64, copy=True)
    if mode == "zero":
        out[:, units] = 0.0
    elif mode == "mean":
        out[:, units] = acts.mean(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    return out


def score_drops(score: Callable[[np.ndarray], float], acts: np.ndarray, mask: str = "zero") -> np.ndarray:
    base = score(acts)
    return np.array([base - score(_mask(acts, [u], mask)) for u in range(acts.shape[1])])


def faithfulness(score: Callable[[np.ndarray], float], acts, attribution, mask: str = "zero") -> float:
    """Pearson correlation between attributions and leave-one-unit-out score drops."""
    a = acts.maps if isinstance(acts, ActivationStack) else np.asarray(acts, dtype=np.float64)
    attr = np.asarray(getattr(attribution, "values", attribution), dtype=np.float64).ravel()
    drops = score_drops(score, a, mask)
    if np.ptp(attr) == 0 or np.ptp(drops) == 0:
        raise UndefinedCorrelation("undefined correlation: constant attribution or constant score drops")
    x = attr - attr.mean()
    y = drops - drops.mean()
    return float((x @ y) / math.sqrt((x @ x) * (y @ y)))


def top_units(attribution, count: int) -> np.ndarray:
    attr = np.asarray(getattr(attribution, "values", attribution), dtype=np.float64).ravel()
    return np.argsort(-attr, kind="stable")[:count]


def flips(scores: Callable[[np.ndarray], np.ndarray], acts, attribution, budget: float,
          mask: str = "zero") -> bool:
    """Whether masking the top ``floor(budget * n)`` attributed units changes the argmax."""
    if not 0.0 < budget <= 1.0:
        raise ValueError("budget must be in (0, 1]")
    a = acts.maps if isinstance(acts, ActivationStack) else np.asarray(acts, dtype=np.float64)
    k = int(math.floor(budget * a.shape[1] + 1e-12))
    if k == 0:
        return False
    before = int(np.argmax(scores(a)))
    after = int(np.argmax(scores(_mask(a, top_units(attribution, k), mask))))
    return before != after


def flipping(cases: Sequence[tuple[Callable, object, object]], budget: float, mask: str = "zero") -> float:
    """Fraction of ``(scores_fn, acts, attribution)`` cases whose decision flips under masking."""
    if not 0.0 < budget <= 1.0:
        raise ValueError("budget must be in (0, 1]")
    if not cases:
        return 0.0
    return sum(flips(f, a, attr, budget, mask) for f, a, attr in cases) / len(cases)


def _mass(attribution) -> np.ndarray:
    attr = np.maximum(np.asarray(getattr(attribution, "values", attribution), dtype=np.float64).ravel(), 0.0)
    total = attr.sum()
    if not total > 0:
        raise ValueError("attribution has no positive mass")
    return attr / total


def complexity(attribution) -> float:
    """Shannon entropy (nats) of the L1-normalized non-negative attribution."""
    p = _mass(attribution)
    p = p[p > 0]
    return float(max(-(p * np.log(p)).sum(), 0.0))


def comprehension80(attribution) -> float:
    """Percent of units needed for the top attributions to cover 80% of the mass."""
    p = np.sort(_mass(attribution))[::-1]
    k = int(np.searchsorted(np.cumsum(p), 0.8 - 1e-12) + 1)
    return 100.0 * min(k, len(p)) / len(p)


# ---------------------------------------------------------------- files

def load_activation_file(path: str | Path) -> tuple[ActivationStack, np.ndarray | None]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    shape = tuple(obj["shape"])
    maps = np.asarray(obj["maps"], dtype=np.float64).reshape(shape)
    grads = obj.get("grads")
    if grads is not None:
        grads = np.asarray(grads, dtype=np.float64).reshape(shape).reshape(shape[0], -1)
    return ActivationStack(maps, source=str(path)), grads


def write_pgm(values: np.ndarray, shape: tuple[int, ...], path: str | Path) -> None:
    """Grayscale P2 image, min-max scaled to 0..255."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if len(shape) == 1:
        shape = (1, shape[0])
    h, w = shape[0], int(np.prod(shape[1:]))
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    px = np.rint(scaled * 255).astype(int).reshape(h, w)
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(map(str, row)) for row in px]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


# ---------------------------------------------------------------- tracker substrate

class TargetError(ValueError):
    pass


@dataclass
class GnnTarget:
    stack: ActivationStack
    score: GnnAssociationScore
    node: int
    track_id: int
    frame_index: int


def tracker_target(frames, config, params, frame_index: int, track_id: int,
                   layer: int | None = None) -> GnnTarget:
    """Replay the tracker up to ``frame_index`` and expose the activations feeding
    the target track's association with its matched node.

    ``layer`` defaults to the last hidden layer before the output (L - 1).
    """
    import copy

    from .graph import adjacency
    from .tracker import TrackerState, node_inputs, step

    state = TrackerState(config, params)
    target_frame = None
    for fr in frames:
        if fr.frame_index < frame_index:
            step(state, fr)
        elif fr.frame_index == frame_index:
            target_frame = fr
            break
    if target_frame is None:
        raise TargetError(f"frame {frame_index} is not in the stream")
    before = {tr.track_id: tr.last_embedding.copy() for tr in state.active}
    after = copy.deepcopy(state)
    _, res = step(after, target_frame)
    nodes = [k for k, (tid, _) in enumerate(res.assignments) if tid == track_id]
    if track_id not in before or not nodes:
        raise TargetError(f"track {track_id} is not associated at frame {frame_index}")
    g = after.prev_graph
    a = adjacency(g, config.adjacency)
    p = after.params
    layer = p.layer_count - 1 if layer is None else layer
    if not 0 <= layer <= p.layer_count:
        raise TargetError(f"layer {layer} out of range 0..{p.layer_count}")
    fw = gcn_forward(node_inputs(g, p.dims[0]), a, p)
    stack = ActivationStack(fw.hidden[layer].T.copy(), source=f"gnn-layer-{layer}")
    score = GnnAssociationScore(p, a, before[track_id], nodes[0], layer, config.beta)
    return GnnTarget(stack, score, nodes[0], track_id, frame_index)
