"""Offline overlay rendering: one SVG per frame."""
from __future__ import annotations

import colorsys
import hashlib
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .detect_io import FrameDetections, LabeledFrame

UNTRACKED = "#808080"


def track_color(track_id: int) -> str:
    """Stable color from a hash of the id (independent of frame or run)."""
    if track_id < 0:
        return UNTRACKED
    h = hashlib.sha256(str(track_id).encode()).digest()
    hue = int.from_bytes(h[:2], "big") / 65536.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 0.95)
    return f"#{round(r * 255):02x}{round(g * 255):02x}{round(b * 255):02x}"


def _items(frame: FrameDetections | LabeledFrame):
    if isinstance(frame, LabeledFrame):
        return list(frame.items)
    return [(-1, d) for d in frame.detections]


def frame_svg(frame: FrameDetections | LabeledFrame, image_size: tuple[int, int] = (1000, 1000),
              fps: float | None = None) -> str:
    w, h = image_size
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<g class="background"><path d="M0 0H{w}V{h}H0Z" fill="#101010"/></g>',
    ]
    for tid, det in _items(frame):
        left, top, bw, bh = det.box.to_pixels_ltwh(w, h)
        color = track_color(tid)
        name = det.class_name or f"class {det.class_id}"
        label = f"{name} {det.confidence:.2f}" if tid < 0 else f"#{tid} {name} {det.confidence:.2f}"
        out.append(f'<rect x="{left:.2f}" y="{top:.2f}" width="{bw:.2f}" height="{bh:.2f}" '
                   f'fill="none" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left:.2f}" y="{max(top - 4, 12):.2f}" fill="{color}" '
                   f'font-family="monospace" font-size="12">{escape(label)}</text>')
    fps_text = "FPS n/a" if fps is None else f"FPS {fps:.1f}"
    out.append(f'<text x="8" y="{h - 8}" fill="#ffffff" font-family="monospace" font-size="14">'
               f'frame {frame.frame_index} | {fps_text}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_frames(frames: Sequence[FrameDetections | LabeledFrame], out_dir: str | Path,
                  image_size: tuple[int, int] = (1000, 1000), fps: float | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for fr in frames:
        p = out / f"frame_{fr.frame_index:06d}.svg"
        p.write_text(frame_svg(fr, image_size, fps), encoding="utf-8")
        paths.append(p)
    return paths
