"""Top-down SVG drawings of scenes, detections and trajectories.

Points are white on a dark canvas, detections yellow with a yellow history
polyline and a cyan future polyline, ground truth green.
"""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .geometry import box_corners


class CanvasTransform:
    """World metres to SVG pixels: x to the right, y up."""

    def __init__(self, half_range: float = 20.0, size: int = 800, margin: int = 20):
        self.half = float(half_range)
        self.size = int(size)
        self.margin = int(margin)
        self.scale = (size - 2 * margin) / (2.0 * half_range)

    def __call__(self, x, y):
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        return self.margin + (x + self.half) * self.scale, self.margin + (self.half - y) * self.scale


def _poly(tf, xy, color, width=1.5, closed=False, extra=""):
    px, py = tf(xy[:, 0], xy[:, 1])
    pts = " ".join(f"{a:.3f},{b:.3f}" for a, b in zip(px, py))
    tag = "polygon" if closed else "polyline"
    return (f'<{tag} points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"{extra}/>')


def render_svg(points=None, detections=(), ground_truth=(), half_range: float = 20.0, size: int = 800,
               title: str | None = None) -> str:
    """Draw one scene.

    ``detections`` items need ``box`` (5,), ``future`` (n, 3) and optionally
    ``history`` (t, 3) at offsets 0, -1, ...; ``ground_truth`` items need
    ``box`` and optionally ``future``.
    """
    tf = CanvasTransform(half_range, size)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect x="0" y="0" width="{size}" height="{size}" fill="#101018"/>']
    cx, cy = tf(0.0, 0.0)
    lo, hi = tf.margin, size - tf.margin
    out.append(f'<g id="axes" stroke="#555" stroke-width="1">'
               f'<line x1="{lo}" y1="{cy:.3f}" x2="{hi}" y2="{cy:.3f}"/>'
               f'<line x1="{cx:.3f}" y1="{lo}" x2="{cx:.3f}" y2="{hi}"/></g>')
    if title:
        out.append(f'<text x="{lo}" y="{lo - 5}" fill="#ccc" font-size="12">{escape(title)}</text>')
    if points is not None and len(points):
        pts = np.asarray(points, dtype=np.float64)
        keep = (np.abs(pts[:, 0]) <= half_range) & (np.abs(pts[:, 1]) <= half_range)
        px, py = tf(pts[keep, 0], pts[keep, 1])
        circles = "".join(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="0.8"/>' for a, b in zip(px, py))
        out.append(f'<g id="points" fill="white">{circles}</g>')
    out.append('<g id="ground_truth">')
    for g in ground_truth:
        out.append(_poly(tf, box_corners(np.asarray(g.box))[0], "#3c3", closed=True))
        fut = getattr(g, "future", None)
        if fut is not None and len(fut):
            path = np.vstack([np.asarray(g.box)[None, :2], np.asarray(fut)[:, :2]])
            out.append(_poly(tf, path, "#3c3", 1.0, extra=' stroke-dasharray="3,2"'))
    out.append("</g>")
    out.append('<g id="detections">')
    for d in detections:
        box = np.asarray(d.box)
        out.append(_poly(tf, box_corners(box)[0], "yellow", closed=True))
        hist = getattr(d, "history", None)
        if hist is not None and len(hist):
            out.append(_poly(tf, np.asarray(hist)[:, :2], "yellow"))
        else:
            out.append(_poly(tf, box[None, :2], "yellow"))
        out.append(_poly(tf, np.vstack([box[None, :2], np.asarray(d.future)[:, :2]]), "cyan"))
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
