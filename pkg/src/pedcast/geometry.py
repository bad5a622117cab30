"""Rotated bird's-eye-view box math.

Boxes are 5-DoF ``(x, y, w, l, h)``: ``w`` is the extent along the box's
local x axis ``(cos h, sin h)`` and ``l`` the extent along ``(-sin h, cos h)``.
Array helpers take ``(N, 5)`` float arrays in that column order; the small
dataclasses are the scalar face of the same functions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

HALF_PI = 0.5 * math.pi
TWO_PI = 2.0 * math.pi


def wrap_angle(h):
    """Wrap angles into (-pi, pi]. Works on floats and arrays."""
    if np.isscalar(h):
        r = math.pi - math.fmod(math.pi - h, TWO_PI)
        if r <= -math.pi:
            r += TWO_PI
        elif r > math.pi:
            r -= TWO_PI
        return r
    h = np.asarray(h, dtype=np.float64)
    r = math.pi - np.mod(math.pi - h, TWO_PI)
    return np.where(r <= -math.pi, r + TWO_PI, r)


@dataclass(frozen=True)
class BevBox5:
    x: float
    y: float
    w: float
    l: float
    h: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0):
            raise ValueError(f"box sizes must be positive, got w={self.w}, l={self.l}")
        object.__setattr__(self, "h", float(wrap_angle(float(self.h))))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.l, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BevBox5":
        return cls(*(float(v) for v in a[:5]))

    @property
    def area(self) -> float:
        return self.w * self.l


@dataclass(frozen=True)
class StandingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate standing box {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def contains(self, other: "StandingBox") -> bool:
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and self.x_max >= other.x_max and self.y_max >= other.y_max)


def as_box_array(boxes) -> np.ndarray:
    """Coerce a BevBox5, a sequence of them, or an array into ``(N, 5)``."""
    if isinstance(boxes, BevBox5):
        return boxes.as_array()[None]
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 5).astype(np.float64, copy=False)
    boxes = list(boxes)
    if not boxes:
        return np.zeros((0, 5))
    if isinstance(boxes[0], BevBox5):
        return np.stack([b.as_array() for b in boxes])
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 5)


def box_corners(boxes: np.ndarray) -> np.ndarray:
    """Counter-clockwise corners, shape ``(N, 4, 2)``."""
    boxes = as_box_array(boxes)
    c, s = np.cos(boxes[:, 4]), np.sin(boxes[:, 4])
    hw, hl = 0.5 * boxes[:, 2], 0.5 * boxes[:, 3]
    local = np.array([[1, -1], [1, 1], [-1, 1], [-1, -1]], dtype=np.float64)
    dx = local[None, :, 0] * hw[:, None]
    dy = local[None, :, 1] * hl[:, None]
    cx = boxes[:, 0, None] + c[:, None] * dx - s[:, None] * dy
    cy = boxes[:, 1, None] + s[:, None] * dx + c[:, None] * dy
    return np.stack([cx, cy], axis=-1)


# -- standing boxes ----------------------------------------------------------

def standing_boxes(boxes, mode: str = "snap") -> np.ndarray:
    """Closest standing boxes as ``(N, 4)`` ``[x_min, y_min, x_max, y_max]``.

    ``mode="snap"`` rounds the heading to the nearest quarter turn (swapping
    extents on odd turns) and keeps area; ``mode="aabb"`` returns the loose
    axis-aligned hull of the rotated corners.
    """
    b = as_box_array(boxes)
    if mode == "aabb":
        corners = box_corners(b)
        return np.concatenate([corners.min(axis=1), corners.max(axis=1)], axis=1)
    if mode != "snap":
        raise ValueError(f"unknown standing box mode {mode!r}")
    quarter = np.rint(b[:, 4] / HALF_PI).astype(np.int64)
    odd = (quarter % 2) != 0
    ex = np.where(odd, b[:, 3], b[:, 2])
    ey = np.where(odd, b[:, 2], b[:, 3])
    return np.stack([b[:, 0] - 0.5 * ex, b[:, 1] - 0.5 * ey,
                     b[:, 0] + 0.5 * ex, b[:, 1] + 0.5 * ey], axis=1)


def to_standing_box(box: BevBox5, mode: str = "snap") -> StandingBox:
    return StandingBox(*standing_boxes(box, mode)[0])


def meta_box(boxes: Sequence[StandingBox]) -> StandingBox:
    """Smallest standing box containing every input box."""
    if len(boxes) == 0:
        raise ValueError("meta_box needs at least one box")
    arr = np.stack([b.as_array() if isinstance(b, StandingBox) else np.asarray(b, dtype=np.float64)
                    for b in boxes])
    return StandingBox(*meta_box_array(arr))


def meta_box_array(stand: np.ndarray) -> np.ndarray:
    """Meta box over the second-to-last axis: ``(..., K, 4) -> (..., 4)``."""
    stand = np.asarray(stand, dtype=np.float64)
    return np.concatenate([stand[..., :2].min(axis=-2), stand[..., 2:].max(axis=-2)], axis=-1)


# -- rotated IoU ---------------------------------------------------------------

def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def _clip_polygons(poly, count, e0, e1):
    """Clip each convex polygon by the left half-plane of edge ``e0 -> e1``."""
    n, m = poly.shape[:2]
    out = np.zeros_like(poly)
    out_count = np.zeros(n, dtype=np.int64)
    rows = np.arange(n)
    ex, ey = e1[:, 0] - e0[:, 0], e1[:, 1] - e0[:, 1]
    safe_count = np.maximum(count, 1)
    for i in range(m):
        active = i < count
        if not active.any():
            break
        cur = poly[:, i]
        nxt = poly[rows, (i + 1) % safe_count]
        dc = _cross(ex, ey, cur[:, 0] - e0[:, 0], cur[:, 1] - e0[:, 1])
        dn = _cross(ex, ey, nxt[:, 0] - e0[:, 0], nxt[:, 1] - e0[:, 1])
        cin, nin = dc >= 0, dn >= 0
        crossing = active & (cin != nin)
        denom = np.where(crossing, dc - dn, 1.0)
        t = dc / denom
        inter = cur + t[:, None] * (nxt - cur)

        emit = crossing
        pos = np.minimum(out_count, m - 1)
        out[rows[emit], pos[emit]] = inter[emit]
        out_count += emit

        emit = active & nin
        pos = np.minimum(out_count, m - 1)
        out[rows[emit], pos[emit]] = nxt[emit]
        out_count += emit
    return out, out_count


def _polygon_area(poly, count):
    n, m = poly.shape[:2]
    rows = np.arange(n)
    area = np.zeros(n)
    safe = np.maximum(count, 1)
    for i in range(m):
        active = i < count
        p = poly[:, i]
        q = poly[rows, (i + 1) % safe]
        area += np.where(active, _cross(p[:, 0], p[:, 1], q[:, 0], q[:, 1]), 0.0)
    return 0.5 * np.abs(area)


def intersection_area_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact intersection areas of aligned box pairs ``a[k]``, ``b[k]``."""
    a, b = as_box_array(a), as_box_array(b)
    n = len(a)
    if n == 0:
        return np.zeros(0)
    poly = np.zeros((n, 8, 2))
    poly[:, :4] = box_corners(a)
    count = np.full(n, 4, dtype=np.int64)
    clip = box_corners(b)
    for k in range(4):
        poly, count = _clip_polygons(poly, count, clip[:, k], clip[:, (k + 1) % 4])
    return np.where(count >= 3, _polygon_area(poly, count), 0.0)


def iou_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotated IoU of aligned pairs; far-apart pairs short-circuit to 0."""
    a, b = as_box_array(a), as_box_array(b)
    out = np.zeros(len(a))
    if len(a) == 0:
        return out
    ra = 0.5 * np.hypot(a[:, 2], a[:, 3])
    rb = 0.5 * np.hypot(b[:, 2], b[:, 3])
    near = np.hypot(a[:, 0] - b[:, 0], a[:, 1] - b[:, 1]) < ra + rb
    if near.any():
        inter = intersection_area_pairs(a[near], b[near])
        union = a[near, 2] * a[near, 3] + b[near, 2] * b[near, 3] - inter
        out[near] = np.clip(inter / union, 0.0, 1.0)
    return out


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise rotated IoU, shape ``(len(a), len(b))``."""
    a, b = as_box_array(a), as_box_array(b)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    ra = 0.5 * np.hypot(a[:, 2], a[:, 3])
    rb = 0.5 * np.hypot(b[:, 2], b[:, 3])
    d = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    ii, jj = np.nonzero(d < ra[:, None] + rb[None, :])
    if len(ii):
        out[ii, jj] = iou_pairs(a[ii], b[jj])
    return out


def rotated_iou(a: BevBox5, b: BevBox5) -> float:
    """Intersection over union of two rotated rectangles."""
    return float(iou_pairs(as_box_array(a), as_box_array(b))[0])


# -- non-maximum suppression ------------------------------------------------

def nms(boxes, scores, iou_thresh: float = 0.5, max_keep: int | None = None) -> list[int]:
    """Greedy rotated NMS; ties on score go to the lower index."""
    b = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(b) != len(scores):
        raise ValueError(f"{len(b)} boxes but {len(scores)} scores")
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in [0, 1], got {iou_thresh}")
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(b[order], b[order])
    suppressed = np.zeros(len(order), dtype=bool)
    keep: list[int] = []
    for r in range(len(order)):
        if suppressed[r]:
            continue
        keep.append(int(order[r]))
        if max_keep is not None and len(keep) >= max_keep:
            break
        suppressed |= ious[r] > iou_thresh
    return keep
