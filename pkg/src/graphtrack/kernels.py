"""Hot-loop kernels with backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_pykernels`` is used. ``use_backend`` switches at
runtime (benchmarks and equivalence tests use it).
"""
from __future__ import annotations

import logging
from types import ModuleType

from . import _pykernels

log = logging.getLogger(__name__)

try:
    from . import _ckernels  # type: ignore[attr-defined]
except ImportError:  # pragma: no cover - depends on build
    _ckernels = None
    log.debug("native kernels unavailable; using numpy fallback")

_active: ModuleType = _ckernels if _ckernels is not None else _pykernels


def native_available() -> bool:
    return _ckernels is not None


def backend() -> str:
    return _active.BACKEND


def use_backend(name: str) -> None:
    """Select ``"native"`` or ``"python"`` kernels for subsequent calls."""
    global _active
    if name == "python":
        _active = _pykernels
    elif name == "native":
        if _ckernels is None:
            raise RuntimeError("native kernels are not built")
        _active = _ckernels
    else:
        raise ValueError(f"unknown backend {name!r}")


def iou_matrix(a, b):
    return _active.iou_matrix(a, b)


def nms_keep(boxes, scores, classes, iou_threshold):
    return _active.nms_keep(boxes, scores, classes, iou_threshold)


def pair_edges(centers, motions, emb, sigma_d, sigma_v, use_velocity, use_appearance,
               constant_weights, tau_dist, tau_vel, gate_or):
    return _active.pair_edges(centers, motions, emb, sigma_d, sigma_v, use_velocity,
                              use_appearance, constant_weights, tau_dist, tau_vel, gate_or)


def linear_assignment(cost):
    return _active.linear_assignment(cost)
