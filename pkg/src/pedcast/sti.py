"""Second stage: per-proposal spatio-temporal features, interaction and heads.

Each proposal gets a local feature ``f_i`` built from three parts: crops of
every frame's feature map under that frame's box (geometry), crops under
one box covering the whole track (dynamic), and an embedding of the track's
displacements (history path). An attention graph over all proposals of a
scene turns the ``f_i`` into interaction embeddings ``g_i``. Detection
heads read ``f_i`` only; the future-trajectory head reads ``[f_i; g_i]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import StandingBox, as_box_array, meta_box_array, nms, standing_boxes
from .nn import functional as F
from .nn.layers import activation, dense, init_linear, init_res_block, res_block
from .nn.tensor import Tensor, as_tensor, concat, reshape, transpose
from .pillars import GridConfig
from .trpn import AssignerConfig, LossWeights, ProposalSet, assign_targets, decode_boxes, sequence_box_loss

DEFAULT_T_FUTURE = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
MASKED_SCORE = -1e9


@dataclass(frozen=True)
class STIConfig:
    crop_size: int = 5            # S
    local_channels: int = 96      # residual block output; D_f = this + path_hidden
    path_hidden: int = 32
    phi_dim: int = 32
    alpha_hidden: int = 32        # 0 gives a purely affine score map
    interaction_dim: int = 64     # D_g
    head_hidden: int = 64
    n_future: int = len(DEFAULT_T_FUTURE)
    use_history_path: bool = True
    use_interaction: bool = True
    interaction_radius: float | None = None
    normalizer: str = "diagonal"
    nonlinearity: str = "relu"

    @property
    def feature_dim(self) -> int:
        return self.local_channels + self.path_hidden


@dataclass
class StageTwoTargets:
    labels: np.ndarray        # (P,)
    current: np.ndarray       # (P, 5)
    future: np.ndarray        # (P, n_future, 3)
    future_valid: np.ndarray  # (P, n_future)
    matched: np.ndarray


@dataclass
class Detections:
    boxes: np.ndarray     # (D, 5)
    scores: np.ndarray    # (D,)
    future: np.ndarray    # (D, n_future, 3) x, y, heading
    history: np.ndarray   # (D, t, 5) proposal boxes at offsets 0, -1, ...

    def __len__(self):
        return len(self.scores)

    @classmethod
    def empty(cls, n_future: int, t: int) -> "Detections":
        return cls(np.zeros((0, 5)), np.zeros(0), np.zeros((0, n_future, 3)), np.zeros((0, t, 5)))


# -- cropping ---------------------------------------------------------------------------

def _roi_sample_grid(stand: np.ndarray, grid: GridConfig, s: int):
    """Continuous (u, v) cell indices of the S x S bin centres of each standing box."""
    stand = np.asarray(stand, dtype=np.float64).reshape(-1, 4)
    u0, v0 = grid.world_to_cell(stand[:, 0], stand[:, 1])
    u1, v1 = grid.world_to_cell(stand[:, 2], stand[:, 3])
    # clip to the map extent; cell i spans [i - 0.5, i + 0.5]
    u0, u1 = np.clip(u0, -0.5, grid.H - 0.5), np.clip(u1, -0.5, grid.H - 0.5)
    v0, v1 = np.clip(v0, -0.5, grid.W - 0.5), np.clip(v1, -0.5, grid.W - 0.5)
    degenerate = (u1 <= u0) | (v1 <= v0)
    frac = (np.arange(s) + 0.5) / s
    us = u0[:, None] + frac[None, :] * (u1 - u0)[:, None]
    vs = v0[:, None] + frac[None, :] * (v1 - v0)[:, None]
    uu = np.broadcast_to(us[:, :, None], (len(stand), s, s))
    vv = np.broadcast_to(vs[:, None, :], (len(stand), s, s))
    return uu, vv, degenerate


def roi_align_batch(fmaps, frames, stand, grid: GridConfig, s: int = 5):
    """Crops ``(R, S, S, C)`` of ``fmaps`` (T, H, W, C) under standing boxes (R, 4).

    Row ``r`` samples frame ``frames[r]``. Degenerate boxes (no area left
    after clipping to the map) give zero crops and are flagged.
    """
    fmaps = as_tensor(fmaps)
    frames = np.asarray(frames, dtype=np.int64).reshape(-1)
    uu, vv, degenerate = _roi_sample_grid(stand, grid, s)
    ff = np.broadcast_to(frames[:, None, None], uu.shape)
    crops = F.bilinear_sample(fmaps, ff, uu, vv)
    if degenerate.any():
        keep = (~degenerate).astype(np.float64)[:, None, None, None]
        crops = crops * keep
    return crops, degenerate


def roi_align(fmap, box: StandingBox, grid: GridConfig, s: int = 5):
    """One crop ``(S, S, C)`` of an (H, W, C) map; returns ``(crop, degenerate)``."""
    fmap = as_tensor(fmap)
    stand = box.as_array() if isinstance(box, StandingBox) else np.asarray(box, dtype=np.float64)
    crops, flag = roi_align_batch(reshape(fmap, (1,) + fmap.shape), [0], stand, grid, s)
    return reshape(crops, crops.shape[1:]), bool(flag[0])


def local_geometry_feature(boxes, fmaps, grid: GridConfig, s: int = 5) -> Tensor:
    """Crop frame ``j``'s map under frame ``j``'s standing box.

    ``boxes`` is (P, t, 5) at offsets 0, -1, ...; ``fmaps`` is (t, H, W, C)
    oldest first. Output (P, t, S, S, C) in time order, oldest first.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    p, t = boxes.shape[:2]
    chron = boxes[:, ::-1]
    stand = standing_boxes(chron.reshape(-1, 5)).reshape(p, t, 4)
    frames = np.broadcast_to(np.arange(t), (p, t))
    crops, _ = roi_align_batch(fmaps, frames.reshape(-1), stand.reshape(-1, 4), grid, s)
    return reshape(crops, (p, t, s, s, crops.shape[-1]))


def track_meta_boxes(boxes) -> np.ndarray:
    """Standing meta box (P, 4) covering each proposal's boxes over all frames."""
    boxes = np.asarray(boxes, dtype=np.float64)
    p, t = boxes.shape[:2]
    stand = standing_boxes(boxes.reshape(-1, 5)).reshape(p, t, 4)
    return meta_box_array(stand)


def local_dynamic_feature(boxes, fmaps, grid: GridConfig, s: int = 5) -> Tensor:
    """Crop every frame's map under the proposal's meta box; (P, t, S, S, C)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    p, t = boxes.shape[:2]
    meta = np.repeat(track_meta_boxes(boxes), t, axis=0)
    frames = np.tile(np.arange(t), p)
    crops, _ = roi_align_batch(fmaps, frames, meta, grid, s)
    return reshape(crops, (p, t, s, s, crops.shape[-1]))


def path_displacements(boxes) -> np.ndarray:
    """``[x0 - x_-1, y0 - y_-1, x0 - x_-2, ...]`` per proposal, shape (P, 2(t-1))."""
    boxes = np.asarray(boxes, dtype=np.float64)
    d = boxes[:, :1, :2] - boxes[:, 1:, :2]
    return d.reshape(len(boxes), -1)


# -- parameters ---------------------------------------------------------------------------

def init_sti_params(rng, cfg: STIConfig, channels: int, t: int, prefix: str = "sti") -> dict:
    params: dict = {}
    init_res_block(params, rng, f"{prefix}.local", 3, 2 * t * channels, cfg.local_channels)
    if t > 1:
        init_linear(params, rng, f"{prefix}.path1", 2 * (t - 1), cfg.path_hidden)
        init_linear(params, rng, f"{prefix}.path2", cfg.path_hidden, cfg.path_hidden)
    df = cfg.feature_dim
    init_linear(params, rng, f"{prefix}.phi1", df, cfg.phi_dim, gain=1.0)
    init_linear(params, rng, f"{prefix}.phi2", df, cfg.phi_dim, gain=1.0)
    if cfg.alpha_hidden:
        init_linear(params, rng, f"{prefix}.alpha1", 2 * cfg.phi_dim, cfg.alpha_hidden)
        init_linear(params, rng, f"{prefix}.alpha2", cfg.alpha_hidden, 1, gain=1.0)
    else:
        init_linear(params, rng, f"{prefix}.alpha1", 2 * cfg.phi_dim, 1, gain=1.0)
    init_linear(params, rng, f"{prefix}.gamma", 2 * df, cfg.interaction_dim, gain=1.0)
    init_linear(params, rng, f"{prefix}.det_hidden", df, cfg.head_hidden)
    init_linear(params, rng, f"{prefix}.cls", cfg.head_hidden, 1, gain=0.01)
    init_linear(params, rng, f"{prefix}.cur", cfg.head_hidden, 5, gain=0.01)
    init_linear(params, rng, f"{prefix}.fut_hidden", df + cfg.interaction_dim, cfg.head_hidden)
    init_linear(params, rng, f"{prefix}.fut", cfg.head_hidden, 3 * cfg.n_future, gain=0.01)
    return params


# -- features -------------------------------------------------------------------------------

def history_path_feature(boxes, params: dict, prefix: str = "sti", nonlinearity: str = "relu") -> Tensor:
    """Two-layer perceptron over the displacement vector; (P, path_hidden)."""
    act = activation(nonlinearity)
    x = Tensor(path_displacements(boxes))
    return act(dense(act(dense(x, params, f"{prefix}.path1")), params, f"{prefix}.path2"))


def fuse_local(geom: Tensor, dyn: Tensor, path: Tensor | None, params: dict, cfg: STIConfig,
               prefix: str = "sti") -> Tensor:
    """Crops (P, t, S, S, C) x2 and path (P, D) to ``f`` (P, D_f).

    Frames and both crop kinds are stacked on channels, passed through one
    residual block, average pooled, then joined with the path embedding. A
    missing path (or ``use_history_path=False``) contributes zeros.
    """
    if geom.shape != dyn.shape:
        raise ValueError(f"geometry crops {geom.shape} and dynamic crops {dyn.shape} differ")
    p, t, s, _, c = geom.shape
    x = concat([geom, dyn], axis=-1)                       # (P, t, S, S, 2C)
    x = reshape(transpose(x, (0, 2, 3, 1, 4)), (p, s, s, t * 2 * c))
    y = res_block(x, params, f"{prefix}.local", act=activation(cfg.nonlinearity))
    pooled = F.global_avg_pool(y)
    if path is None or not cfg.use_history_path:
        path = Tensor(np.zeros((p, cfg.path_hidden)))
    return concat([pooled, path], axis=1)


def interaction_scores(f: Tensor, params: dict, cfg: STIConfig, prefix: str = "sti") -> Tensor:
    """Pairwise ``v_ij = alpha([phi1(f_i); phi2(f_j)])``, shape (P, P)."""
    p = f.shape[0]
    a = dense(f, params, f"{prefix}.phi1")
    b = dense(f, params, f"{prefix}.phi2")
    # alpha's first layer splits over the two halves of its input
    w1 = params[f"{prefix}.alpha1.w"]
    k = cfg.phi_dim
    ai = a @ w1[:k]
    bj = b @ w1[k:]
    h = reshape(ai, (p, 1, -1)) + reshape(bj, (1, p, -1)) + params[f"{prefix}.alpha1.b"]
    if cfg.alpha_hidden:
        h = activation(cfg.nonlinearity)(h)
        h = reshape(h, (p * p, cfg.alpha_hidden))
        v = dense(h, params, f"{prefix}.alpha2")
    else:
        v = h
    return reshape(v, (p, p))


def interaction(f: Tensor, params: dict, cfg: STIConfig, prefix: str = "sti", centers=None,
                return_weights: bool = False):
    """Attention-weighted sum of ``gamma([f_i; f_j])`` over all j, self included.

    With ``cfg.interaction_radius`` set, pairs farther apart than the radius
    (by ``centers``) are left out of the sum.
    """
    f = as_tensor(f)
    p = f.shape[0]
    if p == 0:
        raise ValueError("interaction needs at least one proposal")
    v = interaction_scores(f, params, cfg, prefix)
    if cfg.interaction_radius is not None:
        if centers is None:
            raise ValueError("interaction_radius needs proposal centers")
        c = np.asarray(centers, dtype=np.float64)[:, :2]
        far = np.hypot(c[:, None, 0] - c[None, :, 0], c[:, None, 1] - c[None, :, 1]) > cfg.interaction_radius
        v = v + Tensor(np.where(far, MASKED_SCORE, 0.0))
    weights = F.softmax(v, axis=1)
    # gamma is affine, so sum_j w_ij gamma([f_i; f_j]) = G_i(f_i) + sum_j w_ij G_j(f_j) + b
    wg = params[f"{prefix}.gamma.w"]
    df = f.shape[1]
    own = f @ wg[:df] + params[f"{prefix}.gamma.b"]
    other = f @ wg[df:]
    g = own + weights @ other
    return (g, weights) if return_weights else g


def second_stage_heads(f: Tensor, g: Tensor | None, params: dict, cfg: STIConfig, prefix: str = "sti") -> dict:
    """Classification and current refinement from ``f``; future from ``[f; g]``."""
    p = f.shape[0]
    act = activation(cfg.nonlinearity)
    hid = act(dense(f, params, f"{prefix}.det_hidden"))
    logits = reshape(dense(hid, params, f"{prefix}.cls"), (p,))
    cur = dense(hid, params, f"{prefix}.cur")
    if g is None or not cfg.use_interaction:
        g = Tensor(np.zeros((p, cfg.interaction_dim)))
    fh = act(dense(concat([f, g], axis=1), params, f"{prefix}.fut_hidden"))
    fut = reshape(dense(fh, params, f"{prefix}.fut"), (p, cfg.n_future, 3))
    return {"logits": logits, "current": cur, "future": fut}


def sti_forward(proposals: ProposalSet, fmaps: Tensor, params: dict, cfg: STIConfig, grid: GridConfig,
                prefix: str = "sti") -> dict:
    """Features, interaction and heads for every proposal of one scene."""
    boxes = proposals.boxes
    t = boxes.shape[1]
    geom = local_geometry_feature(boxes, fmaps, grid, cfg.crop_size)
    dyn = local_dynamic_feature(boxes, fmaps, grid, cfg.crop_size)
    path = history_path_feature(boxes, params, prefix, cfg.nonlinearity) if (t > 1 and cfg.use_history_path) else None
    f = fuse_local(geom, dyn, path, params, cfg, prefix)
    g = interaction(f, params, cfg, prefix, centers=boxes[:, 0]) if cfg.use_interaction else None
    out = second_stage_heads(f, g, params, cfg, prefix)
    out["f"], out["g"] = f, g
    return out


# -- targets and loss --------------------------------------------------------------------------

def assign_stage_two(proposal_boxes, gt_current, gt_future, cfg: AssignerConfig = AssignerConfig(),
                     normalizer: str = "diagonal") -> StageTwoTargets:
    """Proposals' current boxes act as anchors for the first-stage assigner.

    ``gt_future`` is (G, n_future, 5); NaN rows mark missing future boxes.
    """
    anchors = as_box_array(proposal_boxes)
    base = assign_targets(anchors, gt_current, cfg, gt_past=gt_future, normalizer=normalizer)
    return StageTwoTargets(base.labels, base.current, base.past, base.past_valid, base.matched)


def second_stage_loss(pred: dict, targets: StageTwoTargets, weights: LossWeights = LossWeights()):
    return sequence_box_loss(pred["logits"], pred["current"], pred["future"], targets.labels,
                             targets.current, targets.future, targets.future_valid, weights,
                             seq_name="future_reg")


# -- decoding --------------------------------------------------------------------------------------

def decode_second_stage(proposals: ProposalSet, pred: dict, normalizer: str = "diagonal"):
    """Refined current boxes (P, 5), scores (P,) and future poses (P, n_future, 3)."""
    base = proposals.boxes[:, 0]
    logits = pred["logits"].data if isinstance(pred["logits"], Tensor) else np.asarray(pred["logits"])
    cur = pred["current"].data if isinstance(pred["current"], Tensor) else np.asarray(pred["current"])
    fut = pred["future"].data if isinstance(pred["future"], Tensor) else np.asarray(pred["future"])
    boxes, _ = decode_boxes(base, cur, normalizer)
    n_f = fut.shape[1]
    future = np.empty((len(base), n_f, 3))
    for k in range(n_f):
        fb, _ = decode_boxes(base, fut[:, k], normalizer, sizes=boxes[:, 2:4])
        future[:, k] = fb[:, [0, 1, 4]]
    scores = 1.0 / (1.0 + np.exp(-logits))
    return boxes, scores, future


def final_detections(proposals: ProposalSet, pred: dict, nms_iou: float = 0.5, max_detections: int | None = None,
                     normalizer: str = "diagonal", score_thresh: float = 0.0) -> Detections:
    """Decode refinements and futures, then NMS on the refined current boxes."""
    n_f = pred["future"].shape[1]
    t = proposals.boxes.shape[1]
    if len(proposals) == 0:
        return Detections.empty(n_f, t)
    boxes, scores, future = decode_second_stage(proposals, pred, normalizer)
    idx = np.nonzero(scores >= score_thresh)[0]
    keep = idx[np.asarray(nms(boxes[idx], scores[idx], nms_iou, max_detections), dtype=np.int64)]
    return Detections(boxes[keep], scores[keep], future[keep], proposals.boxes[keep])

