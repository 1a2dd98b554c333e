"""Deterministic synthetic scenarios and a detection degradation model.

Randomness comes from :class:`SplitMix64` so scenario outputs do not depend on
numpy's generator versions.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .detect_io import BBox, Detection, FrameDetections, LabeledFrame

MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 (Steele, Lea & Flood): 64-bit state, golden-ratio increment."""

    GAMMA = 0x9E3779B97F4A7C15
    MUL1 = 0xBF58476D1CE4E5B9
    MUL2 = 0x94D049BB133111EB

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + self.GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * self.MUL1) & MASK64
        z = ((z ^ (z >> 27)) * self.MUL2) & MASK64
        return z ^ (z >> 31)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * (1.0 / (1 << 53)))

    def normal(self) -> float:
        # Box-Muller, one output per call; 1 - u keeps the log argument in (0, 1].
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def choice(self, weights: Sequence[float]) -> int:
        total = sum(weights)
        x = self.uniform() * total
        acc = 0.0
        for k, w in enumerate(weights):
            acc += w
            if x < acc:
                return k
        return len(weights) - 1

    def poisson(self, lam: float) -> int:
        if lam <= 0:
            return 0
        limit = math.exp(-lam)
        k, p = 0, self.uniform()
        while p > limit:
            k += 1
            p *= self.uniform()
        return k

    def unit_vector(self, dim: int) -> tuple[float, ...]:
        v = [self.normal() for _ in range(dim)]
        n = math.sqrt(sum(x * x for x in v)) or 1.0
        return tuple(x / n for x in v)


def derive_seed(seed: int, label: str) -> int:
    """Fan one run seed out to an independent stream per label."""
    h = seed & MASK64
    for ch in label.encode("utf-8"):
        h = SplitMix64(h ^ ch).next_u64()
    return h


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    start: tuple[float, float]
    velocity: tuple[float, float]
    size: tuple[float, float]
    class_id: int = 0
    amplitude: float = 0.0
    period: float = 60.0
    phase: float = 0.0


@dataclass(frozen=True)
class Occlusion:
    object_id: int
    start: int
    duration: int


@dataclass(frozen=True)
class ScenarioConfig:
    object_count: int = 5
    frame_count: int = 100
    motion: str = "constant-velocity"
    speed_range: tuple[float, float] = (0.002, 0.01)
    box_size_range: tuple[float, float] = (0.03, 0.08)
    class_weights: tuple[float, ...] = (1.0,)
    class_names: tuple[str, ...] = ("object",)
    occlusions: tuple[Occlusion, ...] = ()
    seed: int = 0
    embedding_dim: int = 8
    boundary: str = "reflect"
    lane_amplitude: float = 0.02
    lane_period: float = 60.0
    objects: tuple[ObjectSpec, ...] | None = None

    def validate(self) -> None:
        if self.object_count < 0 or self.frame_count < 0:
            raise ScenarioError("object_count and frame_count must be non-negative")
        if self.motion not in ("constant-velocity", "sinusoidal-lane-change"):
            raise ScenarioError(f"unknown motion model {self.motion!r}")
        if self.boundary not in ("reflect", "exit"):
            raise ScenarioError(f"unknown boundary mode {self.boundary!r}")
        lo, hi = self.speed_range
        if lo < 0 or hi < lo:
            raise ScenarioError("speed_range must satisfy 0 <= lo <= hi")
        lo, hi = self.box_size_range
        if lo <= 0 or hi < lo or hi > 1:
            raise ScenarioError("box_size_range must satisfy 0 < lo <= hi <= 1")
        if len(self.class_weights) != len(self.class_names) or not self.class_weights:
            raise ScenarioError("class_weights and class_names must be non-empty and equally long")
        if any(w < 0 for w in self.class_weights) or sum(self.class_weights) <= 0:
            raise ScenarioError("class_weights must be non-negative with positive sum")
        if self.embedding_dim < 1:
            raise ScenarioError("embedding_dim must be >= 1")
        if self.objects is not None and len(self.objects) != self.object_count:
            raise ScenarioError("explicit objects must match object_count")
        windows: dict[int, list[tuple[int, int]]] = {}
        for occ in self.occlusions:
            if not 0 <= occ.object_id < self.object_count:
                raise ScenarioError(f"occlusion references unknown object {occ.object_id}")
            if occ.duration < 1 or occ.start < 0 or occ.start + occ.duration > self.frame_count:
                raise ScenarioError(f"occlusion window {occ} does not fit in {self.frame_count} frames")
            for s, e in windows.get(occ.object_id, []):
                if occ.start < e and s < occ.start + occ.duration:
                    raise ScenarioError(f"overlapping occlusion windows for object {occ.object_id}")
            windows.setdefault(occ.object_id, []).append((occ.start, occ.start + occ.duration))


@dataclass
class GroundTruth:
    frames: list[LabeledFrame]
    embeddings: dict[int, tuple[float, ...]]
    occluded: set[tuple[int, int]] = field(default_factory=set)
    class_names: tuple[str, ...] = ("object",)
    facts: dict = field(default_factory=dict)

    def positions(self, object_id: int) -> dict[int, tuple[float, float]]:
        out = {}
        for fr in self.frames:
            for oid, det in fr.items:
                if oid == object_id:
                    out[fr.frame_index] = (det.box.cx, det.box.cy)
        return out


def _fold(x: float) -> float:
    """Reflect a coordinate into [0, 1] (triangle wave)."""
    x = math.fmod(abs(x), 2.0)
    return 2.0 - x if x > 1.0 else x


def _random_objects(cfg: ScenarioConfig, rng: SplitMix64) -> list[ObjectSpec]:
    specs = []
    for _ in range(cfg.object_count):
        cx = rng.uniform(0.1, 0.9)
        cy = rng.uniform(0.1, 0.9)
        speed = rng.uniform(*cfg.speed_range)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        w = rng.uniform(*cfg.box_size_range)
        h = rng.uniform(*cfg.box_size_range)
        cls = rng.choice(cfg.class_weights)
        amp = cfg.lane_amplitude if cfg.motion == "sinusoidal-lane-change" else 0.0
        phase = rng.uniform(0.0, 2.0 * math.pi)
        specs.append(ObjectSpec((cx, cy), (speed * math.cos(theta), speed * math.sin(theta)),
                                (w, h), cls, amp, cfg.lane_period, phase))
    return specs


def object_center(spec: ObjectSpec, t: int, boundary: str = "reflect") -> tuple[float, float] | None:
    x = spec.start[0] + spec.velocity[0] * t
    y = spec.start[1] + spec.velocity[1] * t
    if spec.amplitude:
        y += spec.amplitude * math.sin(2.0 * math.pi * t / spec.period + spec.phase)
    if boundary == "reflect":
        return (_fold(x), _fold(y))
    if 0.0 <= x <= 1.0 and 0.0 <= y <= 1.0:
        return (x, y)
    return None


def generate(cfg: ScenarioConfig) -> GroundTruth:
    cfg.validate()
    rng = SplitMix64(derive_seed(cfg.seed, "generate"))
    specs = list(cfg.objects) if cfg.objects is not None else _random_objects(cfg, rng)
    emb_rng = SplitMix64(derive_seed(cfg.seed, "embedding"))
    embeddings = {k: emb_rng.unit_vector(cfg.embedding_dim) for k in range(len(specs))}
    occluded = {(o.object_id, t) for o in cfg.occlusions for t in range(o.start, o.start + o.duration)}
    frames = []
    for t in range(cfg.frame_count):
        items = []
        for k, spec in enumerate(specs):
            c = object_center(spec, t, cfg.boundary)
            if c is None:
                continue
            name = cfg.class_names[spec.class_id] if spec.class_id < len(cfg.class_names) else str(spec.class_id)
            det = Detection(BBox(c[0], c[1], spec.size[0], spec.size[1]), 1.0, spec.class_id, name, embeddings[k])
            items.append((k, det))
        frames.append(LabeledFrame(t, tuple(items)))
    return GroundTruth(frames, embeddings, occluded, cfg.class_names)


# ---------------------------------------------------------------- degradation

@dataclass(frozen=True)
class DegradationConfig:
    center_noise: float = 0.0
    size_noise: float = 0.0
    dropout: float = 0.0
    fp_rate: float = 0.0
    embedding_noise: float = 0.0
    fp_conf_range: tuple[float, float] = (0.3, 0.7)
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.dropout <= 1.0:
            raise ScenarioError("dropout must be a probability")
        if min(self.center_noise, self.size_noise, self.embedding_noise, self.fp_rate) < 0:
            raise ScenarioError("noise levels and fp_rate must be non-negative")
        lo, hi = self.fp_conf_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ScenarioError("fp_conf_range must lie in [0, 1]")


@dataclass
class DegradedStream:
    frames: list[FrameDetections]
    sources: list[tuple[int, ...]]  # ground-truth object id per detection, -1 for false positives
    visible: int = 0
    dropped: int = 0
    injected: int = 0

    @property
    def emitted(self) -> int:
        return sum(len(f.detections) for f in self.frames)


MIN_SIZE = 1e-3


def degrade_labeled(gt: GroundTruth, deg: DegradationConfig) -> DegradedStream:
    deg.validate()
    rng = SplitMix64(derive_seed(deg.seed, "degrade"))
    ncls = len(gt.class_names)
    out = DegradedStream([], [])
    for fr in gt.frames:
        t = fr.frame_index
        dets, src = [], []
        for oid, det in fr.items:
            if (oid, t) in gt.occluded:
                continue
            out.visible += 1
            if deg.dropout > 0 and rng.uniform() < deg.dropout:
                out.dropped += 1
                continue
            b = det.box
            nx = deg.center_noise * rng.normal() if deg.center_noise else 0.0
            ny = deg.center_noise * rng.normal() if deg.center_noise else 0.0
            nw = deg.size_noise * rng.normal() if deg.size_noise else 0.0
            nh = deg.size_noise * rng.normal() if deg.size_noise else 0.0
            box = BBox(min(max(b.cx + nx, 0.0), 1.0), min(max(b.cy + ny, 0.0), 1.0),
                       min(max(b.w + nw, MIN_SIZE), 1.0), min(max(b.h + nh, MIN_SIZE), 1.0))
            conf = 1.0
            if deg.center_noise > 0:
                mag = math.hypot(nx, ny)
                conf = 1.0 - min(max(mag / (3.0 * deg.center_noise), 0.0), 0.5)
            emb = det.embedding
            if emb is not None and deg.embedding_noise > 0:
                v = [x + deg.embedding_noise * rng.normal() for x in emb]
                n = math.sqrt(sum(x * x for x in v)) or 1.0
                emb = tuple(x / n for x in v)
            dets.append(Detection(box, conf, det.class_id, det.class_name, emb))
            src.append(oid)
        for _ in range(rng.poisson(deg.fp_rate)):
            dim = len(next(iter(gt.embeddings.values()))) if gt.embeddings else 0
            cls = int(rng.uniform() * ncls) % ncls
            box = BBox(rng.uniform(), rng.uniform(), rng.uniform(0.02, 0.08), rng.uniform(0.02, 0.08))
            conf = rng.uniform(*deg.fp_conf_range)
            emb = rng.unit_vector(dim) if dim else None
            dets.append(Detection(box, conf, cls, gt.class_names[cls], emb))
            src.append(-1)
            out.injected += 1
        out.frames.append(FrameDetections(t, tuple(dets)))
        out.sources.append(tuple(src))
    return out


def degrade(gt: GroundTruth, deg: DegradationConfig) -> list[FrameDetections]:
    return degrade_labeled(gt, deg).frames


# ---------------------------------------------------------------- presets

def preset_linear(cx: float = 0.1, cy: float = 0.5, vx: float = 0.01, vy: float = 0.0,
                  frame_count: int = 11) -> ScenarioConfig:
    return ScenarioConfig(object_count=1, frame_count=frame_count, boundary="exit",
                          objects=(ObjectSpec((cx, cy), (vx, vy), (0.05, 0.05)),))


def preset_occlusion(gap: int, lead: int = 15, tail: int = 15, speed: float = 0.004,
                     seed: int = 0) -> ScenarioConfig:
    """One object in linear motion, hidden for ``gap`` frames after ``lead`` frames."""
    frames = lead + gap + tail
    occ = (Occlusion(0, lead, gap),) if gap > 0 else ()
    return ScenarioConfig(object_count=1, frame_count=frames, boundary="exit", seed=seed,
                          objects=(ObjectSpec((0.2, 0.5), (speed, 0.0), (0.05, 0.08)),), occlusions=occ)


def preset_separated(seed: int = 0, frame_count: int = 200, cols: int = 5, rows: int = 4,
                     amplitude: float = 0.03, period: float = 60.0) -> ScenarioConfig:
    """A grid of objects oscillating vertically inside their own cells."""
    rng = SplitMix64(derive_seed(seed, "separated"))
    specs = []
    for r in range(rows):
        for c in range(cols):
            cx = (c + 0.5) / cols
            cy = (r + 0.5) / rows
            specs.append(ObjectSpec((cx, cy), (0.0, 0.0), (0.04, 0.04), 0, amplitude, period,
                                    rng.uniform(0.0, 2.0 * math.pi)))
    return ScenarioConfig(object_count=len(specs), frame_count=frame_count, boundary="exit",
                          motion="sinusoidal-lane-change", seed=seed, objects=tuple(specs))


def preset_crossing(seed: int = 0, pairs: int = 4, frame_count: int = 60, speed: float = 0.012,
                    min_angle: float = math.radians(60),
                    box: float = 0.06) -> tuple[ScenarioConfig, list[dict]]:
    """Pairs of objects on straight lines that meet at a known point and frame.

    Objects leave the scene when their center exits the unit square.
    """
    rng = SplitMix64(derive_seed(seed, "crossing"))
    specs, meets = [], []
    for p in range(pairs):
        px, py = rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7)
        tc = int(round(rng.uniform(0.35, 0.65) * frame_count))
        th1 = rng.uniform(0.0, 2.0 * math.pi)
        th2 = th1 + rng.uniform(min_angle, math.pi - min_angle) * (1 if rng.uniform() < 0.5 else -1)
        for th in (th1, th2):
            s = speed * rng.uniform(0.8, 1.2)
            v = (s * math.cos(th), s * math.sin(th))
            specs.append(ObjectSpec((px - v[0] * tc, py - v[1] * tc), v, (box, box), 0))
        meets.append({"pair": [2 * p, 2 * p + 1], "frame": tc, "point": [px, py]})
    cfg = ScenarioConfig(object_count=len(specs), frame_count=frame_count, boundary="exit",
                         seed=seed, objects=tuple(specs))
    return cfg, meets


def preset_dense(seed: int = 0, object_count: int = 50, frame_count: int = 200) -> ScenarioConfig:
    return ScenarioConfig(object_count=object_count, frame_count=frame_count, seed=seed,
                          speed_range=(0.001, 0.006), box_size_range=(0.02, 0.05),
                          class_weights=(0.5, 0.3, 0.2), class_names=("car", "person", "motorbike"))


def preset_degraded(seed: int = 11) -> tuple[ScenarioConfig, DegradationConfig]:
    """Mid-density scene with noise, dropout, occlusions and false positives."""
    cfg = ScenarioConfig(object_count=8, frame_count=60, seed=seed, speed_range=(0.002, 0.008),
                         box_size_range=(0.04, 0.09), class_weights=(0.6, 0.4), class_names=("car", "person"),
                         occlusions=(Occlusion(2, 20, 5), Occlusion(5, 35, 4)))
    deg = DegradationConfig(center_noise=0.003, size_noise=0.002, dropout=0.05, fp_rate=0.3,
                            embedding_noise=0.1, seed=seed)
    return cfg, deg


def min_pairwise_distance(gt: GroundTruth) -> float:
    best = math.inf
    for fr in gt.frames:
        if len(fr.items) < 2:
            continue
        c = np.array([[d.box.cx, d.box.cy] for d in fr.detections])
        diff = c[:, None, :] - c[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        best = min(best, float(dist.min()))
    return best


def generate_crossing(seed: int = 0, **kw) -> GroundTruth:
    cfg, meets = preset_crossing(seed, **kw)
    gt = generate(cfg)
    for m in meets:
        a, b = m["pair"]
        pa = object_center(cfg.objects[a], m["frame"], "exit")
        pb = object_center(cfg.objects[b], m["frame"], "exit")
        if pa is None or pb is None or math.dist(pa, pb) > 1e-9:
            raise ScenarioError(f"crossing pair {m['pair']} does not meet at frame {m['frame']}")
    gt.facts["crossings"] = meets
    return gt


def generate_separated(seed: int = 0, min_distance: float | None = None, **kw) -> GroundTruth:
    gt = generate(preset_separated(seed, **kw))
    d = min_pairwise_distance(gt)
    gt.facts["min_pairwise_distance"] = d
    if min_distance is not None and not d > min_distance:
        raise ScenarioError(f"separated preset has min distance {d} <= {min_distance}")
    return gt


# ---------------------------------------------------------------- config files

def _tuple_fields(obj: dict, names) -> dict:
    for n in names:
        if n in obj and isinstance(obj[n], list):
            obj[n] = tuple(obj[n])
    return obj


def scenario_from_dict(d: dict) -> ScenarioConfig:
    known = set(ScenarioConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
    d = dict(d)
    _tuple_fields(d, ("speed_range", "box_size_range", "class_weights", "class_names"))
    if "occlusions" in d:
        d["occlusions"] = tuple(Occlusion(**o) if isinstance(o, dict) else Occlusion(*o) for o in d["occlusions"])
    if d.get("objects") is not None:
        d["objects"] = tuple(ObjectSpec(**_tuple_fields(dict(o), ("start", "velocity", "size")))
                             for o in d["objects"])
    cfg = ScenarioConfig(**d)
    cfg.validate()
    return cfg


def degradation_from_dict(d: dict) -> DegradationConfig:
    known = set(DegradationConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ScenarioError(f"unknown degradation keys: {sorted(unknown)}")
    d = _tuple_fields(dict(d), ("fp_conf_range",))
    cfg = DegradationConfig(**d)
    cfg.validate()
    return cfg


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))
