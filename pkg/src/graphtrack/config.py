"""Flat run configuration shared by every CLI command."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .detect_io import Roi
from .gnn import LossWeights
from .graph import EdgeParams
from .synth import derive_seed
from .tracker import TrackerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # detection gating
    conf_threshold: float = 0.25
    nms_iou: float = 0.5
    roi: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    max_box_w: float = 1.0
    max_box_h: float = 1.0
    # graph
    sigma_d: float = 0.1
    sigma_v: float = 0.05
    tau_dist: float = 0.2
    tau_vel: float = 0.05
    edge_gate: str = "or"
    adjacency: str = "normalized"
    use_velocity: bool = True
    use_appearance: bool = True
    use_temporal: bool = True
    constant_edge_weights: bool = False
    # GNN
    hidden_dim: int = 32
    layers: int = 2
    # association
    beta: float = 0.5
    tau_gate: float = 0.2
    t_max: int = 10
    smoothing: float = 0.7
    # training
    lambda_det: float = 1.0
    lambda_track: float = 1.0
    lambda_reg: float = 0.1
    lr: float = 1e-3
    epochs: int = 100
    momentum: float = 0.0
    # io / eval / explain
    image_w: int = 1000
    image_h: int = 1000
    eval_iou: float = 0.5
    flip_budget: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if len(self.roi) != 4:
            raise ConfigError("roi must have four values x0, y0, x1, y1")
        if self.image_w <= 0 or self.image_h <= 0:
            raise ConfigError("image size must be positive")
        if self.lr < 0 or self.epochs < 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("lr and epochs must be >= 0 and momentum in [0, 1)")
        if not 0.0 < self.eval_iou <= 1.0 or not 0.0 < self.flip_budget <= 1.0:
            raise ConfigError("eval_iou and flip_budget must be in (0, 1]")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        try:
            self.tracker_config()
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # ---- derived module configs

    def edge_params(self) -> EdgeParams:
        return EdgeParams(self.sigma_d, self.sigma_v, self.tau_dist, self.tau_vel, self.edge_gate,
                          self.use_velocity, self.use_appearance, self.use_temporal,
                          self.constant_edge_weights)

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(self.conf_threshold, self.nms_iou, Roi(*self.roi), self.max_box_w,
                             self.max_box_h, self.edge_params(), self.adjacency, self.hidden_dim,
                             self.layers, self.seed_for("gnn-init"), self.beta, self.tau_gate,
                             self.t_max, self.smoothing)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_det, self.lambda_track, self.lambda_reg)

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.image_w, self.image_h)

    def seed_for(self, label: str) -> int:
        return derive_seed(self.seed, label)

    # ---- serialization

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roi"] = list(self.roi)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(d) - set(types))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        clean = {}
        for k, v in d.items():
            default = getattr(cls, k) if k != "roi" else cls.roi
            if k == "roi":
                if not isinstance(v, (list, tuple)) or not all(_is_num(x) for x in v):
                    raise ConfigError("roi must be a list of four numbers")
                clean[k] = tuple(float(x) for x in v)
            elif isinstance(default, bool):
                if not isinstance(v, bool):
                    raise ConfigError(f"{k} must be a boolean")
                clean[k] = v
            elif isinstance(default, int):
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ConfigError(f"{k} must be an integer")
                clean[k] = v
            elif isinstance(default, float):
                if not _is_num(v):
                    raise ConfigError(f"{k} must be a number")
                clean[k] = float(v)
            else:
                if not isinstance(v, str):
                    raise ConfigError(f"{k} must be a string")
                clean[k] = v
        return cls(**clean)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_json(text)

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)
