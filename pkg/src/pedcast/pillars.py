"""Point-cloud frames to pillar pseudo-images."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import functional as F
from .nn.layers import activation, init_linear
from .nn.tensor import ShapeError, Tensor, reshape, transpose

N_POINT_FEATURES = 8


@dataclass(frozen=True)
class GridConfig:
    range_x: float = 40.0
    range_y: float = 40.0
    pillar_size: float = 0.3125
    max_points_per_pillar: int = 32
    max_pillars: int = 16384

    def __post_init__(self):
        for name, extent in (("range_x", self.range_x), ("range_y", self.range_y)):
            cells = extent / self.pillar_size
            if self.pillar_size <= 0 or abs(cells - round(cells)) > 1e-9 or round(cells) <= 0:
                raise ValueError(f"{name}={extent} is not a whole number of {self.pillar_size} m pillars")

    @property
    def H(self) -> int:
        return int(round(self.range_x / self.pillar_size))

    @property
    def W(self) -> int:
        return int(round(self.range_y / self.pillar_size))

    @property
    def x_min(self) -> float:
        return -0.5 * self.range_x

    @property
    def y_min(self) -> float:
        return -0.5 * self.range_y

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World x of each row and y of each column."""
        xs = self.x_min + (np.arange(self.H) + 0.5) * self.pillar_size
        ys = self.y_min + (np.arange(self.W) + 0.5) * self.pillar_size
        return xs, ys

    def world_to_cell(self, x, y):
        """Continuous cell indices; integers land on cell centres."""
        return ((np.asarray(x) - self.x_min) / self.pillar_size - 0.5,
                (np.asarray(y) - self.y_min) / self.pillar_size - 0.5)


@dataclass
class PointCloudFrame:
    timestamp: float
    points: np.ndarray  # (N, 3) float32, current-frame vehicle coordinates

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        if self.timestamp > 0:
            raise ValueError(f"frame timestamps are relative to the current frame, got {self.timestamp}")


@dataclass
class Pillars:
    """Retained points grouped by pillar.

    ``features`` holds the decorated points of pillar 0, then pillar 1, and
    so on; ``starts[i]`` is where pillar ``i`` begins. :meth:`padded` gives
    the fixed-width ``(P, M, 8)`` view with a validity mask.
    """
    features: np.ndarray    # (N_kept, 8)
    starts: np.ndarray      # (P,)
    coords: np.ndarray      # (P, 2) integer (row, col) cells
    counts: np.ndarray      # (P,) retained points per pillar
    n_out_of_range: int = 0
    n_truncated: int = 0
    n_dropped_pillars: int = 0
    grid: GridConfig = field(default_factory=GridConfig)

    @property
    def n_pillars(self) -> int:
        return len(self.coords)

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.grid.max_points_per_pillar
        p = self.n_pillars
        pid = np.repeat(np.arange(p), self.counts)
        rank = np.arange(len(self.features)) - np.repeat(self.starts, self.counts)
        feats = np.zeros((p, m, N_POINT_FEATURES))
        mask = np.zeros((p, m), dtype=bool)
        feats[pid, rank] = self.features
        mask[pid, rank] = True
        return feats, mask


def voxelize(frame: PointCloudFrame | np.ndarray, cfg: GridConfig) -> Pillars:
    """Bin points into pillars and decorate each retained point.

    Points keep their input order inside a pillar and anything past
    ``max_points_per_pillar`` is dropped (first come, first kept). Pillars
    come out in row-major cell order and only the first ``max_pillars`` are
    kept. Decoration per point is
    ``(x, y, z, dx_center, dy_center, dx_mean, dy_mean, dz_mean)``.
    """
    pts = frame.points if isinstance(frame, PointCloudFrame) else np.asarray(frame).reshape(-1, 3)
    pts = pts.astype(np.float64)
    m = cfg.max_points_per_pillar
    ix = np.floor((pts[:, 0] - cfg.x_min) / cfg.pillar_size).astype(np.int64)
    iy = np.floor((pts[:, 1] - cfg.y_min) / cfg.pillar_size).astype(np.int64)
    keep = (ix >= 0) & (ix < cfg.H) & (iy >= 0) & (iy < cfg.W)
    n_out = int((~keep).sum())
    pts, ix, iy = pts[keep], ix[keep], iy[keep]
    if len(pts) == 0:
        return Pillars(np.zeros((0, N_POINT_FEATURES)), np.zeros(0, np.int64), np.zeros((0, 2), np.int64),
                       np.zeros(0, np.int64), n_out, 0, 0, cfg)
    cell = ix * cfg.W + iy
    order = np.argsort(cell, kind="stable")
    uniq, first, total = np.unique(cell[order], return_index=True, return_counts=True)
    rank = np.arange(len(order)) - np.repeat(first, total)
    pid = np.repeat(np.arange(len(uniq)), total)
    sel = (rank < m) & (pid < cfg.max_pillars)
    n_drop_pillars = max(len(uniq) - cfg.max_pillars, 0)
    n_trunc = len(order) - int(sel.sum())
    uniq = uniq[:cfg.max_pillars]
    counts = np.minimum(total[:cfg.max_pillars], m)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    xyz = pts[order[sel]]
    pid = pid[sel]

    centroid = np.add.reduceat(xyz, starts, axis=0) / counts[:, None]
    coords = np.stack([uniq // cfg.W, uniq % cfg.W], axis=1)
    cx = cfg.x_min + (coords[:, 0] + 0.5) * cfg.pillar_size
    cy = cfg.y_min + (coords[:, 1] + 0.5) * cfg.pillar_size
    feats = np.empty((len(xyz), N_POINT_FEATURES))
    feats[:, 0:3] = xyz
    feats[:, 3] = xyz[:, 0] - cx[pid]
    feats[:, 4] = xyz[:, 1] - cy[pid]
    feats[:, 5:8] = xyz - centroid[pid]
    return Pillars(feats, starts, coords, counts, n_out, n_trunc, n_drop_pillars, cfg)


def point_feature_scale(cfg: GridConfig) -> np.ndarray:
    """Fixed per-feature input scaling used in place of normalisation layers."""
    ps = cfg.pillar_size
    return np.array([2.0 / cfg.range_x, 2.0 / cfg.range_y, 0.5, 1 / ps, 1 / ps, 1 / ps, 1 / ps, 1.0])


def init_pillar_params(rng: np.random.Generator, c_in: int = 16, prefix: str = "pillar") -> dict:
    params: dict = {}
    init_linear(params, rng, f"{prefix}.fc", N_POINT_FEATURES, c_in)
    return params


def pillar_encode(pillars: Pillars | list, params: dict, feature_scale=None,
                  nonlinearity: str = "relu", prefix: str = "pillar") -> Tensor:
    """Per-point linear layer, nonlinearity, max-pool per pillar, scatter to grid.

    Accepts one :class:`Pillars` (returns an (H, W, C) tensor) or a list of
    them sharing one grid (returns (T, H, W, C), all frames in one pass).
    """
    single = isinstance(pillars, Pillars)
    plist = [pillars] if single else list(pillars)
    if not plist:
        raise ShapeError("pillar_encode needs at least one frame")
    grid = plist[0].grid
    w, b = params[f"{prefix}.fc.w"], params.get(f"{prefix}.fc.b")
    if w.shape[0] != N_POINT_FEATURES:
        raise ShapeError(f"pillar layer expects {N_POINT_FEATURES} inputs, weight is {w.shape}")
    scale = point_feature_scale(grid) if feature_scale is None else np.asarray(feature_scale, dtype=np.float64)
    feats = np.concatenate([p.features for p in plist], axis=0) * scale
    offsets = np.cumsum([0] + [len(p.features) for p in plist])
    starts = np.concatenate([p.starts + off for p, off in zip(plist, offsets)])
    coords = np.concatenate([p.coords + np.array([i * grid.H, 0]) for i, p in enumerate(plist)], axis=0)
    act = activation(nonlinearity)
    per_point = act(F.linear(Tensor(feats), w, b))
    pooled = F.segment_max(per_point, starts)
    img = F.scatter_grid(pooled, coords, (len(plist) * grid.H, grid.W))
    img = reshape(img, (len(plist), grid.H, grid.W, w.shape[1]))
    return reshape(img, img.shape[1:]) if single else img


def group_frames(images: Tensor, t: int) -> Tensor:
    """Concatenate consecutive groups of ``t'/t`` frames along channels.

    ``images`` is (t', H, W, C) ordered oldest to newest; the result is
    (t, H, W, C * t'/t) in the same order, each group's frames appearing in
    input order within the channel axis.
    """
    tp = images.shape[0]
    if t <= 0 or tp % t:
        raise ValueError(f"t={t} must divide the number of frames t'={tp}")
    k = tp // t
    if k == 1:
        return images
    _, h, w, c = images.shape
    grouped = transpose(reshape(images, (t, k, h, w, c)), (0, 2, 3, 1, 4))
    return reshape(grouped, (t, h, w, k * c))
