"""Synthetic pedestrian world: walkers, lidar-like points, grouping, dataset files.

Scenes are built in the current frame's vehicle coordinates. Each frame's
points are moved into the sensor frame of the ego pose at that time and
then brought back, so every frame ends up in one coordinate system, as a
pose-calibrated sensor log would be.
"""
from __future__ import annotations

import io
import math
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .geometry import wrap_angle
from .pillars import PointCloudFrame

BEHAVIORS = ("straight", "turn", "stop-go", "group-follow")
MAX_SPEED = 3.0

MAGIC = b"STIK"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SimConfig:
    n_frames: int = 6                      # t', history frames including the current one
    frame_dt: float = 0.2
    t_future: tuple = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
    n_pedestrians: tuple = (4, 10)
    behaviors: tuple = BEHAVIORS[:3]
    speed: tuple = (0.6, 1.8)
    turn_rate: tuple = (0.05, 0.25)        # |rad/s|
    extent: float = 18.5                   # |x|, |y| bound on history positions
    min_ego_distance: float = 2.0
    ped_width: tuple = (0.6, 0.85)         # along the walking direction
    ped_length: tuple = (0.75, 1.0)
    ped_height: tuple = (1.5, 1.9)
    points_at_5m: tuple = (40.0, 200.0)
    max_points: int = 400
    point_noise: float = 0.02
    clutter_points: int = 300
    n_static: tuple = (0, 3)
    ego_speed: tuple = (0.0, 6.0)
    ego_yaw_rate: float = 0.1
    n_groups: tuple = (0, 1)
    group_size: tuple = (5, 7)
    sway: float = 0.05

    def __post_init__(self):
        if self.n_frames < 1 or self.frame_dt <= 0:
            raise ValueError("need at least one frame and a positive frame spacing")
        unknown = set(self.behaviors) - set(BEHAVIORS)
        if unknown:
            raise ValueError(f"unknown behaviors {sorted(unknown)}")
        if self.speed[1] > MAX_SPEED:
            raise ValueError(f"walker speeds above {MAX_SPEED} m/s are not pedestrians")

    @property
    def history_times(self) -> np.ndarray:
        return -self.frame_dt * np.arange(self.n_frames - 1, -1, -1)

    @property
    def times(self) -> np.ndarray:
        return np.concatenate([self.history_times, np.asarray(self.t_future, dtype=np.float64)])


PRESETS = {
    "default": SimConfig(behaviors=BEHAVIORS[:3], n_groups=(0, 1)),
    "smoke": SimConfig(behaviors=("straight", "turn"), n_groups=(0, 0)),
    "group_heavy": SimConfig(behaviors=("straight", "turn"), n_pedestrians=(2, 5), n_groups=(2, 3)),
    "lyft": SimConfig(t_future=(0.6, 1.2, 1.8, 2.4, 3.0)),
}


@dataclass
class TrackedPedestrian:
    id: int
    times: np.ndarray      # (K,) history offsets oldest first, then future offsets
    boxes: np.ndarray      # (K, 5)
    behavior: str
    occluded: bool = False

    @property
    def current_index(self) -> int:
        return int(np.nonzero(self.times == 0.0)[0][0])

    @property
    def current(self) -> np.ndarray:
        return self.boxes[self.current_index]

    @property
    def history(self) -> np.ndarray:
        """Boxes at offsets oldest ... 0."""
        return self.boxes[: self.current_index + 1]

    @property
    def future(self) -> np.ndarray:
        return self.boxes[self.current_index + 1:]

    @property
    def velocity(self) -> np.ndarray:
        """Finite-difference velocity over the last history step."""
        i = self.current_index
        if i == 0:
            return np.zeros(2)
        dt = self.times[i] - self.times[i - 1]
        return (self.boxes[i, :2] - self.boxes[i - 1, :2]) / dt

    def __eq__(self, other):
        if not isinstance(other, TrackedPedestrian):
            return NotImplemented
        return (self.id == other.id and self.behavior == other.behavior and self.occluded == other.occluded
                and np.array_equal(self.times, other.times) and np.array_equal(self.boxes, other.boxes))


@dataclass
class Scene:
    frames: list            # PointCloudFrame, oldest first
    pedestrians: list       # TrackedPedestrian
    seed: int = 0

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.seed == other.seed and len(self.frames) == len(other.frames)
                and all(a.timestamp == b.timestamp and np.array_equal(a.points, b.points)
                        for a, b in zip(self.frames, other.frames))
                and self.pedestrians == other.pedestrians)


@dataclass(frozen=True)
class GroupingConfig:
    distance_thresh: float = 2.0
    speed_diff_thresh: float = 0.5
    min_group_size: int = 5

    def __post_init__(self):
        if self.distance_thresh <= 0 or self.speed_diff_thresh <= 0 or self.min_group_size < 1:
            raise ValueError("grouping thresholds must be positive")


# -- walker kinematics --------------------------------------------------------------------

def straight_path(p0, v, times):
    """Positions and headings for constant velocity through ``p0`` at time 0."""
    times = np.asarray(times, dtype=np.float64)
    xy = np.asarray(p0, dtype=np.float64)[None, :] + times[:, None] * np.asarray(v, dtype=np.float64)[None, :]
    h = np.full(len(times), math.atan2(v[1], v[0]))
    return xy, h


def turn_path(p0, speed, heading0, omega, times):
    """Constant speed and yaw rate; heading ``heading0`` at time 0."""
    times = np.asarray(times, dtype=np.float64)
    h = heading0 + omega * times
    r = speed / omega
    x = p0[0] + r * (np.sin(h) - math.sin(heading0))
    y = p0[1] - r * (np.cos(h) - math.cos(heading0))
    return np.stack([x, y], axis=1), h


def stop_go_path(p0, speed, heading, stop_start, stop_end, times):
    """Walk, pause over ``[stop_start, stop_end)``, walk on; ``p0`` at time 0."""
    times = np.asarray(times, dtype=np.float64)

    def moving_time(t):
        # signed walking time between 0 and t, excluding the pause
        lo, hi = np.minimum(t, 0.0), np.maximum(t, 0.0)
        pause = np.clip(np.minimum(hi, stop_end) - np.maximum(lo, stop_start), 0.0, None)
        return np.sign(t) * (np.abs(t) - pause)

    d = speed * moving_time(times)
    u = np.array([math.cos(heading), math.sin(heading)])
    return np.asarray(p0)[None, :] + d[:, None] * u[None, :], np.full(len(times), heading)


def _assemble(xy, h, w, l):
    k = len(xy)
    return np.column_stack([xy, np.full(k, w), np.full(k, l), wrap_angle(h)])


# -- point sampling ---------------------------------------------------------------------------

def _ego_poses(rng, cfg: SimConfig, times):
    v = rng.uniform(*cfg.ego_speed)
    yaw_rate = rng.uniform(-cfg.ego_yaw_rate, cfg.ego_yaw_rate)
    psi = yaw_rate * times
    if abs(yaw_rate) < 1e-9:
        ex, ey = v * times, np.zeros_like(times)
    else:
        ex = v / yaw_rate * np.sin(psi)
        ey = v / yaw_rate * (1.0 - np.cos(psi))
    return np.column_stack([ex, ey]), psi


def _pedestrian_points(rng, cfg: SimConfig, box, height, density, sensor):
    """Noisy points on the sensor-facing half of an elliptical shell."""
    x, y, w, l, h = box
    r = max(math.hypot(x - sensor[0], y - sensor[1]), 0.5)
    n = min(rng.poisson(density * (5.0 / r) ** 2), cfg.max_points)
    if n == 0:
        return np.zeros((0, 3))
    # semi-axes shrunk slightly so noisy points stay inside the box
    a, b = 0.45 * w, 0.45 * l
    c, s = math.cos(h), math.sin(h)
    to_sensor = np.array([sensor[0] - x, sensor[1] - y])
    local = np.array([c * to_sensor[0] + s * to_sensor[1], -s * to_sensor[0] + c * to_sensor[1]])
    facing = math.atan2(local[1] * a, local[0] * b)
    phi = facing + rng.uniform(-0.5 * math.pi, 0.5 * math.pi, n)
    lx, ly = a * np.cos(phi), b * np.sin(phi)
    pts = np.empty((n, 3))
    pts[:, 0] = x + c * lx - s * ly
    pts[:, 1] = y + s * lx + c * ly
    pts[:, 2] = rng.uniform(0.1, height, n)
    pts += rng.normal(0.0, cfg.point_noise, size=pts.shape)
    return pts


def _static_objects(rng, cfg: SimConfig):
    objs = []
    for _ in range(rng.integers(cfg.n_static[0], cfg.n_static[1] + 1)):
        x, y = rng.uniform(-cfg.extent, cfg.extent, 2)
        if rng.random() < 0.5:
            objs.append(("pole", x, y, rng.uniform(0.08, 0.15), rng.uniform(2.5, 4.0)))
        else:
            objs.append(("bush", x, y, rng.uniform(0.4, 1.2), rng.uniform(0.3, 0.9)))
    return objs


def _static_points(rng, cfg: SimConfig, objs, sensor):
    out = []
    for kind, x, y, size, height in objs:
        r = max(math.hypot(x - sensor[0], y - sensor[1]), 0.5)
        n = min(rng.poisson(120.0 * (5.0 / r) ** 2), cfg.max_points)
        ang = rng.uniform(0.0, 2 * math.pi, n)
        rad = size * (1.0 if kind == "pole" else np.sqrt(rng.random(n)))
        pts = np.column_stack([x + rad * np.cos(ang), y + rad * np.sin(ang), rng.uniform(0.0, height, n)])
        out.append(pts)
    return np.concatenate(out) if out else np.zeros((0, 3))


def _ground_points(rng, cfg: SimConfig, half):
    n = cfg.clutter_points
    return np.column_stack([rng.uniform(-half, half, n), rng.uniform(-half, half, n),
                            rng.normal(0.0, 0.03, n)])


def _to_sensor(pts, pose_xy, psi):
    c, s = math.cos(psi), math.sin(psi)
    d = pts[:, :2] - pose_xy
    out = pts.copy()
    out[:, 0] = c * d[:, 0] + s * d[:, 1]
    out[:, 1] = -s * d[:, 0] + c * d[:, 1]
    return out


def _from_sensor(pts, pose_xy, psi):
    c, s = math.cos(psi), math.sin(psi)
    out = pts.copy()
    out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + pose_xy[0]
    out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + pose_xy[1]
    return out


# -- scenes -------------------------------------------------------------------------------------

def _sample_walker(rng, cfg: SimConfig, behavior: str, times):
    p0 = rng.uniform(-cfg.extent, cfg.extent, 2)
    speed = rng.uniform(*cfg.speed)
    heading = rng.uniform(-math.pi, math.pi)
    if behavior == "straight":
        return straight_path(p0, speed * np.array([math.cos(heading), math.sin(heading)]), times)
    if behavior == "turn":
        omega = rng.uniform(*cfg.turn_rate) * rng.choice([-1.0, 1.0])
        return turn_path(p0, speed, heading, omega, times)
    if behavior == "stop-go":
        start = rng.uniform(times[0], times[-1] - 0.5)
        end = start + rng.uniform(0.5, 2.0)
        return stop_go_path(p0, speed, heading, start, end, times)
    raise ValueError(f"behavior {behavior!r} has no single-walker model")


def _sample_group(rng, cfg: SimConfig, times, size):
    """Members share one leader path plus fixed formation offsets and a small sway."""
    if "turn" in cfg.behaviors and rng.random() < 0.5:
        omega = rng.uniform(*cfg.turn_rate) * rng.choice([-1.0, 1.0])
        lead, h = turn_path(rng.uniform(-cfg.extent, cfg.extent, 2), rng.uniform(*cfg.speed),
                            rng.uniform(-math.pi, math.pi), omega, times)
    else:
        heading = rng.uniform(-math.pi, math.pi)
        v = rng.uniform(*cfg.speed) * np.array([math.cos(heading), math.sin(heading)])
        lead, h = straight_path(rng.uniform(-cfg.extent, cfg.extent, 2), v, times)
    cols = int(math.ceil(size / 2))
    paths = []
    for m in range(size):
        along = 1.1 * (m // 2) - 0.55 * (cols - 1) + rng.uniform(-0.1, 0.1)
        side = 1.1 * (m % 2) - 0.55 + rng.uniform(-0.1, 0.1)
        # offsets ride in the leader's frame so the formation turns with it
        ox = along * np.cos(h) - side * np.sin(h)
        oy = along * np.sin(h) + side * np.cos(h)
        phase = rng.uniform(0, 2 * math.pi)
        sway = cfg.sway * np.sin(2 * math.pi * 0.8 * times + phase)
        xy = lead + np.column_stack([ox - sway * np.sin(h), oy + sway * np.cos(h)])
        paths.append((xy, h))
    return paths


def _valid_placement(xy_hist, placed, cfg: SimConfig, min_gap=1.0):
    if np.any(np.abs(xy_hist) > cfg.extent + 0.5):
        return False
    if np.hypot(xy_hist[-1, 0], xy_hist[-1, 1]) < cfg.min_ego_distance:
        return False
    return all(np.min(np.hypot(*(xy_hist - other).T)) >= min_gap for other in placed)


def simulate_scene(cfg: SimConfig = SimConfig(), seed: int = 0) -> Scene:
    """One deterministic scene for ``(cfg, seed)``."""
    rng = np.random.default_rng(seed)
    times = cfg.times
    nh = cfg.n_frames
    peds: list[TrackedPedestrian] = []
    placed: list[np.ndarray] = []
    density, heights = [], []

    def add(xy, h, behavior):
        w, l = rng.uniform(*cfg.ped_width), rng.uniform(*cfg.ped_length)
        peds.append(TrackedPedestrian(len(peds), times.copy(), _assemble(xy, h, w, l), behavior))
        placed.append(xy[:nh])
        density.append(rng.uniform(*cfg.points_at_5m))
        heights.append(rng.uniform(*cfg.ped_height))

    for _ in range(rng.integers(cfg.n_groups[0], cfg.n_groups[1] + 1)):
        size = int(rng.integers(cfg.group_size[0], cfg.group_size[1] + 1))
        for _attempt in range(50):
            paths = _sample_group(rng, cfg, times, size)
            ok = all(_valid_placement(xy[:nh], placed, cfg) for xy, _ in paths)
            ok = ok and all(np.min(np.hypot(*(a[:nh] - b[:nh]).T)) >= 0.8
                            for i, (a, _) in enumerate(paths) for b, _ in paths[i + 1:])
            if ok:
                for xy, h in paths:
                    add(xy, h, "group-follow")
                break
    singles = [b for b in cfg.behaviors if b != "group-follow"]
    for _ in range(rng.integers(cfg.n_pedestrians[0], cfg.n_pedestrians[1] + 1)):
        if not singles:
            break
        behavior = singles[rng.integers(len(singles))]
        for _attempt in range(50):
            xy, h = _sample_walker(rng, cfg, behavior, times)
            if _valid_placement(xy[:nh], placed, cfg):
                add(xy, h, behavior)
                break

    statics = _static_objects(rng, cfg)
    ego_xy, ego_psi = _ego_poses(rng, cfg, cfg.history_times)
    frames = []
    for fi, ts in enumerate(cfg.history_times):
        sensor = ego_xy[fi]
        parts = [_ground_points(rng, cfg, cfg.extent + 1.5), _static_points(rng, cfg, statics, sensor)]
        for k, ped in enumerate(peds):
            parts.append(_pedestrian_points(rng, cfg, ped.boxes[fi], heights[k], density[k], sensor))
        world = np.concatenate(parts)
        raw = _to_sensor(world, sensor, ego_psi[fi])
        frames.append(PointCloudFrame(float(ts), _from_sensor(raw, sensor, ego_psi[fi]).astype(np.float32)))
    current_pts = frames[-1].points
    for ped in peds:
        ped.occluded = points_in_box_count(current_pts, ped.current) == 0
    return Scene(frames, peds, int(seed))


def scene_seed(base_seed: int, index: int) -> int:
    return int(base_seed) * 1_000_003 + int(index)


def generate_scenes(cfg: SimConfig, n: int, seed: int = 0) -> list[Scene]:
    return [simulate_scene(cfg, scene_seed(seed, i)) for i in range(n)]


def points_in_box_count(points, box) -> int:
    """Number of points whose (x, y) falls inside the rotated box."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x, y, w, l, h = np.asarray(box, dtype=np.float64)[:5]
    dx, dy = pts[:, 0] - x, pts[:, 1] - y
    c, s = math.cos(h), math.sin(h)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return int(np.count_nonzero((np.abs(u) <= 0.5 * w) & (np.abs(v) <= 0.5 * l)))


# -- grouping ------------------------------------------------------------------------------------

def label_groups(pedestrians, cfg: GroupingConfig = GroupingConfig()) -> list:
    """Connected components of the close-and-similar-velocity graph.

    Components with at least ``min_group_size`` members get ids 0, 1, ...
    (ordered by their lowest member index); everyone else gets ``None``.
    """
    n = len(pedestrians)
    pos = np.array([p.current[:2] for p in pedestrians]).reshape(n, 2)
    vel = np.array([p.velocity for p in pedestrians]).reshape(n, 2)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            close = np.hypot(*(pos[i] - pos[j])) < cfg.distance_thresh
            similar = np.hypot(*(vel[i] - vel[j])) < cfg.speed_diff_thresh
            if close and similar:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    roots = [find(i) for i in range(n)]
    sizes = {r: roots.count(r) for r in set(roots)}
    ids: dict = {}
    out = []
    for r in roots:
        if sizes[r] >= cfg.min_group_size:
            out.append(ids.setdefault(r, len(ids)))
        else:
            out.append(None)
    return out


# -- dataset files -------------------------------------------------------------------------------

class DatasetError(ValueError):
    pass


class DatasetFormatError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetChecksumError(DatasetError):
    pass


def _encode_scene(scene: Scene) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<qI", scene.seed, len(scene.frames)))
    for fr in scene.frames:
        pts = np.ascontiguousarray(fr.points, dtype="<f4")
        buf.write(struct.pack("<dI", fr.timestamp, len(pts)))
        buf.write(pts.tobytes())
    buf.write(struct.pack("<I", len(scene.pedestrians)))
    for p in scene.pedestrians:
        buf.write(struct.pack("<qBBI", p.id, BEHAVIORS.index(p.behavior), int(p.occluded), len(p.times)))
        buf.write(np.ascontiguousarray(p.times, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(p.boxes, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetTruncatedError(f"needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size), dtype=dtype).astype(dtype[1:] if dtype[0] == "<" else dtype)


def _decode_scene(payload: bytes) -> Scene:
    r = _Reader(payload)
    seed, n_frames = r.unpack("<qI")
    frames = []
    for _ in range(n_frames):
        ts, n = r.unpack("<dI")
        pts = r.array("<f4", 3 * n).reshape(n, 3)
        frames.append(PointCloudFrame(ts, pts))
    (n_peds,) = r.unpack("<I")
    peds = []
    for _ in range(n_peds):
        pid, tag, occ, k = r.unpack("<qBBI")
        if tag >= len(BEHAVIORS):
            raise DatasetFormatError(f"unknown behavior tag {tag}")
        times = r.array("<f8", k)
        boxes = r.array("<f8", 5 * k).reshape(k, 5)
        peds.append(TrackedPedestrian(pid, times, boxes, BEHAVIORS[tag], bool(occ)))
    if r.pos != len(payload):
        raise DatasetFormatError(f"{len(payload) - r.pos} trailing bytes in scene record")
    return Scene(frames, peds, seed)


def dumps_dataset(scenes) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", FORMAT_VERSION, len(scenes)))
    for sc in scenes:
        payload = _encode_scene(sc)
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
        out.write(struct.pack("<I", zlib.crc32(payload)))
    return out.getvalue()


def loads_dataset(data: bytes) -> list[Scene]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic bytes)")
    version, n = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"dataset format version {version}, this reader handles {FORMAT_VERSION}")
    scenes = []
    for i in range(n):
        (size,) = r.unpack("<Q")
        payload = r.take(size)
        (crc,) = r.unpack("<I")
        if zlib.crc32(payload) != crc:
            raise DatasetChecksumError(f"scene {i} failed its CRC-32 check")
        scenes.append(_decode_scene(payload))
    if r.pos != len(data):
        raise DatasetFormatError(f"{len(data) - r.pos} trailing bytes after {n} scenes")
    return scenes


def write_dataset(path, scenes) -> None:
    data = dumps_dataset(scenes)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_dataset(path) -> list[Scene]:
    with open(path, "rb") as fh:
        return loads_dataset(fh.read())
