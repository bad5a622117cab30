"""Temporal region proposals: anchors, targets, loss and decoding.

Every anchor regresses the current box and the centre/heading of the same
object in each past frame. Regression vectors follow one scheme::

    dx = (x_gt - x_a) / norm     dw = log(w_gt / w_a)
    dy = (y_gt - y_a) / norm     dl = log(l_gt / l_a)
    dh = sin((h_gt - h_a) / 2)

with ``norm`` the anchor's distance from the ego origin (``position_norm``,
floored at 1 m) or the anchor's diagonal (``diagonal``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BevBox5, as_box_array, iou_matrix, nms, wrap_angle
from .nn import functional as F
from .nn.layers import activation, conv, init_conv
from .nn.tensor import Tensor, reshape, take_rows, transpose, tsum
from .pillars import GridConfig

NORMALIZERS = ("position_norm", "diagonal")
MIN_POSITION_NORM = 1.0


@dataclass(frozen=True)
class AssignerConfig:
    th_pos: float = 0.5
    th_neg: float = 0.35

    def __post_init__(self):
        if not 0.0 <= self.th_neg <= self.th_pos <= 1.0:
            raise ValueError(f"need 0 <= th_neg <= th_pos <= 1, got {self.th_neg}, {self.th_pos}")


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    cur_reg: float = 1.0
    past_reg: float = 1.0

    def __post_init__(self):
        vals = (self.cls, self.cur_reg, self.past_reg)
        if min(vals) < 0 or max(vals) == 0:
            raise ValueError(f"loss weights must be nonnegative and not all zero, got {vals}")


@dataclass
class AnchorTargets:
    labels: np.ndarray        # (N,) in {1, 0, -1}
    current: np.ndarray       # (N, 5); meaningful where labels == 1
    past: np.ndarray          # (N, t-1, 3)
    past_valid: np.ndarray    # (N, t-1) positive anchors whose track has that past box
    matched: np.ndarray       # (N,) index of the best-IoU ground truth, -1 if none
    max_iou: np.ndarray       # (N,)

    @property
    def n_positive(self) -> int:
        return int((self.labels == 1).sum())


@dataclass
class TemporalProposal:
    score: float
    boxes: list  # BevBox5 at frame offsets 0, -1, ..., -(t-1)

    @property
    def current(self) -> BevBox5:
        return self.boxes[0]


# -- anchors ----------------------------------------------------------------------

def build_anchor_grid(grid: GridConfig, priors) -> np.ndarray:
    """Anchors ``(H * W * len(priors), 5)``: row-major cells, priors within a cell."""
    priors = np.asarray(priors, dtype=np.float64).reshape(-1, 3)
    if len(priors) == 0:
        raise ValueError("at least one anchor prior (w, l, h) is required")
    xs, ys = grid.cell_centers()
    cx = np.repeat(xs, grid.W)
    cy = np.tile(ys, grid.H)
    a = len(priors)
    out = np.empty((grid.H * grid.W * a, 5))
    out[:, 0] = np.repeat(cx, a)
    out[:, 1] = np.repeat(cy, a)
    out[:, 2:5] = np.tile(priors, (grid.H * grid.W, 1))
    return out


def _norm(anchors: np.ndarray, normalizer: str) -> np.ndarray:
    if normalizer == "position_norm":
        return np.maximum(np.hypot(anchors[:, 0], anchors[:, 1]), MIN_POSITION_NORM)
    if normalizer == "diagonal":
        return np.hypot(anchors[:, 2], anchors[:, 3])
    raise ValueError(f"unknown normalizer {normalizer!r}; choose from {NORMALIZERS}")


# -- encoding -------------------------------------------------------------------------

def encode_boxes(gt, anchors, normalizer: str = "position_norm") -> np.ndarray:
    """Current-frame 5-vectors ``(dx, dy, dw, dl, dh)`` for aligned rows."""
    gt, anchors = as_box_array(gt), as_box_array(anchors)
    if np.any(gt[:, 2:4] <= 0) or np.any(anchors[:, 2:4] <= 0):
        raise ValueError("box sizes must be positive")
    n = _norm(anchors, normalizer)
    return np.stack([(gt[:, 0] - anchors[:, 0]) / n,
                     (gt[:, 1] - anchors[:, 1]) / n,
                     np.log(gt[:, 2] / anchors[:, 2]),
                     np.log(gt[:, 3] / anchors[:, 3]),
                     np.sin(0.5 * (gt[:, 4] - anchors[:, 4]))], axis=1)


def encode_positions(gt, anchors, normalizer: str = "position_norm") -> np.ndarray:
    """Past/future 3-vectors ``(dx, dy, dh)``; sizes are not regressed."""
    full = encode_boxes(gt, anchors, normalizer)
    return full[:, [0, 1, 4]]


def encode_current(gt: BevBox5, a: BevBox5, normalizer: str = "position_norm") -> np.ndarray:
    return encode_boxes(gt, a, normalizer)[0]


def encode_past(gt_past: BevBox5, a: BevBox5, normalizer: str = "position_norm") -> np.ndarray:
    return encode_positions(gt_past, a, normalizer)[0]


def decode_boxes(anchors, d, normalizer: str = "position_norm", sizes=None):
    """Invert the encoding. ``d`` is (N, 5) or (N, 3).

    3-vectors keep the anchor's (w, l) unless ``sizes`` (N, 2) is given.
    Returns ``(boxes, clamped)`` where ``clamped`` flags rows whose heading
    term fell outside [-1, 1] and was clipped.
    """
    anchors = as_box_array(anchors)
    d = np.asarray(d, dtype=np.float64).reshape(len(anchors), -1)
    n = _norm(anchors, normalizer)
    dh = d[:, -1]
    clamped = np.abs(dh) > 1.0
    dh = np.clip(dh, -1.0, 1.0)
    out = np.empty((len(anchors), 5))
    out[:, 0] = anchors[:, 0] + d[:, 0] * n
    out[:, 1] = anchors[:, 1] + d[:, 1] * n
    if d.shape[1] == 5:
        out[:, 2] = anchors[:, 2] * np.exp(d[:, 2])
        out[:, 3] = anchors[:, 3] * np.exp(d[:, 3])
    elif d.shape[1] == 3:
        out[:, 2:4] = anchors[:, 2:4] if sizes is None else sizes
    else:
        raise ValueError(f"regression vectors must have 3 or 5 entries, got {d.shape[1]}")
    out[:, 4] = wrap_angle(anchors[:, 4] + 2.0 * np.arcsin(dh))
    return out, clamped


def decode(a: BevBox5, d, normalizer: str = "position_norm") -> BevBox5:
    boxes, _ = decode_boxes(a, np.asarray(d)[None], normalizer)
    return BevBox5.from_array(boxes[0])


# -- target assignment ---------------------------------------------------------------

def assign_targets(anchors, gt_current, cfg: AssignerConfig = AssignerConfig(), gt_past=None,
                   normalizer: str = "position_norm") -> AnchorTargets:
    """Label anchors by their best current-frame IoU and build regression targets.

    ``gt_past`` is (G, t-1, 5) with rows for offsets -1 ... -(t-1); rows that
    are NaN mark frames where the track has no box.
    """
    anchors = as_box_array(anchors)
    gt_current = as_box_array(gt_current)
    n, g = len(anchors), len(gt_current)
    tm1 = 0 if gt_past is None else np.asarray(gt_past).shape[1]
    labels = np.zeros(n, dtype=np.int64)
    cur = np.zeros((n, 5))
    past = np.zeros((n, tm1, 3))
    past_valid = np.zeros((n, tm1), dtype=bool)
    matched = np.full(n, -1, dtype=np.int64)
    max_iou = np.zeros(n)
    if g == 0:
        return AnchorTargets(labels, cur, past, past_valid, matched, max_iou)
    ious = iou_matrix(anchors, gt_current)
    best = ious.argmax(axis=1)
    max_iou = ious[np.arange(n), best]
    has = max_iou > 0
    matched[has] = best[has]
    labels[max_iou > cfg.th_pos] = 1
    labels[(max_iou >= cfg.th_neg) & (max_iou <= cfg.th_pos)] = -1
    pos = np.nonzero(labels == 1)[0]
    if len(pos):
        cur[pos] = encode_boxes(gt_current[best[pos]], anchors[pos], normalizer)
        if tm1:
            gp = np.asarray(gt_past, dtype=np.float64)
            for j in range(tm1):
                boxes = gp[best[pos], j]
                ok = np.all(np.isfinite(boxes), axis=1)
                if ok.any():
                    past[pos[ok], j] = encode_positions(boxes[ok], anchors[pos[ok]], normalizer)
                past_valid[pos, j] = ok
    return AnchorTargets(labels, cur, past, past_valid, matched, max_iou)


def sample_anchor_targets(targets: AnchorTargets, rng: np.random.Generator, n_samples: int = 256,
                          pos_fraction: float = 0.5) -> AnchorTargets:
    """Keep a random minibatch of labelled anchors and mark the rest ignored.

    At most ``pos_fraction * n_samples`` positives are kept and negatives
    fill the remainder, so a handful of objects is not drowned out by tens
    of thousands of background anchors.
    """
    labels = targets.labels.copy()
    pos = np.nonzero(labels == 1)[0]
    neg = np.nonzero(labels == 0)[0]
    n_pos = min(len(pos), int(pos_fraction * n_samples))
    n_neg = min(len(neg), n_samples - n_pos)
    drop_pos = rng.permutation(pos)[n_pos:]
    drop_neg = rng.permutation(neg)[n_neg:]
    labels[drop_pos] = -1
    labels[drop_neg] = -1
    past_valid = targets.past_valid.copy()
    past_valid[drop_pos] = False
    return AnchorTargets(labels, targets.current, targets.past, past_valid, targets.matched, targets.max_iou)


# -- network head -----------------------------------------------------------------------

def init_trpn_params(rng, in_channels: int, t: int, hidden: int = 64, n_priors: int = 1,
                     prefix: str = "trpn") -> dict:
    params: dict = {}
    init_conv(params, rng, f"{prefix}.fuse", 1, in_channels * t, hidden)
    init_conv(params, rng, f"{prefix}.cls", 1, hidden, n_priors, gain=0.01)
    init_conv(params, rng, f"{prefix}.cur", 1, hidden, 5 * n_priors, gain=0.01)
    if t > 1:
        init_conv(params, rng, f"{prefix}.past", 1, hidden, 3 * (t - 1) * n_priors, gain=0.01)
    # start with a low objectness prior so the early loss is not dominated by background
    params[f"{prefix}.cls.b"].data[:] = -np.log(99.0)
    return params


def trpn_forward(features: Tensor, params: dict, n_priors: int = 1, prefix: str = "trpn",
                 nonlinearity: str = "relu") -> dict:
    """Backbone features (t, H, W, C) to per-anchor maps.

    Frames are concatenated on channels (oldest first) and fused by a 1x1
    convolution; 1x1 heads then give ``logits`` (N,), ``current`` (N, 5) and
    ``past`` (N, t-1, 3) with N = H * W * n_priors in anchor-grid order.
    """
    t, h, w, c = features.shape
    stacked = reshape(transpose(features, (1, 2, 0, 3)), (1, h, w, t * c))
    hidden = activation(nonlinearity)(conv(stacked, params, f"{prefix}.fuse"))
    n = h * w * n_priors
    out = {
        "logits": reshape(conv(hidden, params, f"{prefix}.cls"), (n,)),
        "current": reshape(conv(hidden, params, f"{prefix}.cur"), (n, 5)),
    }
    if t > 1:
        out["past"] = reshape(conv(hidden, params, f"{prefix}.past"), (n, t - 1, 3))
    return out


# -- loss ---------------------------------------------------------------------------------

def _masked_mean(values: Tensor, rows: np.ndarray) -> Tensor:
    """Sum of the selected rows' values divided by the row count; 0 if empty."""
    if len(rows) == 0:
        return Tensor(0.0)
    return tsum(take_rows(values, rows)) * (1.0 / len(rows))


def trpn_loss(pred: dict, targets: AnchorTargets, weights: LossWeights = LossWeights()):
    """Weighted classification, current and per-frame past regression losses.

    Classification averages over anchors with label >= 0; regression terms
    average over positives; the past term sums one positive-mean per past
    frame. Terms with an empty mask contribute 0. Returns ``(total, parts)``.
    """
    return sequence_box_loss(pred["logits"], pred["current"], pred.get("past"), targets.labels,
                             targets.current, targets.past, targets.past_valid, weights)


def sequence_box_loss(logits: Tensor, current: Tensor, seq: Tensor | None, labels, cur_targets,
                      seq_targets, seq_valid, weights: LossWeights, seq_name: str = "past_reg"):
    """Shared by both stages: ``seq`` holds past (first stage) or future (second stage) vectors."""
    labels = np.asarray(labels)
    valid = np.nonzero(labels >= 0)[0]
    pos = np.nonzero(labels == 1)[0]
    ce = F.binary_cross_entropy(logits, (labels == 1).astype(np.float64))
    l_cls = _masked_mean(ce, valid)
    l_cur = Tensor(0.0)
    if len(pos):
        sl1 = F.smooth_l1(take_rows(current, pos), Tensor(cur_targets[pos]))
        l_cur = tsum(sl1) * (1.0 / len(pos))
    l_seq = Tensor(0.0)
    if seq is not None:
        for j in range(seq_targets.shape[1]):
            rows = np.nonzero(seq_valid[:, j])[0]
            if len(rows) == 0:
                continue
            sl1 = F.smooth_l1(_frame_rows(seq, rows, j), Tensor(seq_targets[rows, j]))
            l_seq = l_seq + tsum(sl1) * (1.0 / len(rows))
    total = l_cls * weights.cls + l_cur * weights.cur_reg + l_seq * weights.past_reg
    parts = {"cls": l_cls.item(), "cur_reg": l_cur.item(), seq_name: l_seq.item(), "total": total.item()}
    return total, parts


def _frame_rows(past: Tensor, rows: np.ndarray, j: int) -> Tensor:
    n, tm1, _ = past.shape
    flat = reshape(past, (n * tm1, 3))
    return take_rows(flat, rows * tm1 + j)


# -- proposals --------------------------------------------------------------------------------

@dataclass
class ProposalSet:
    scores: np.ndarray     # (P,)
    boxes: np.ndarray      # (P, t, 5) at offsets 0, -1, ..., -(t-1)
    anchor_index: np.ndarray
    clamped: np.ndarray    # (P,) any heading term clipped while decoding

    def __len__(self):
        return len(self.scores)

    def to_list(self) -> list[TemporalProposal]:
        return [TemporalProposal(float(s), [BevBox5.from_array(b) for b in bs])
                for s, bs in zip(self.scores, self.boxes)]

    @classmethod
    def empty(cls, t: int) -> "ProposalSet":
        return cls(np.zeros(0), np.zeros((0, t, 5)), np.zeros(0, np.int64), np.zeros(0, bool))


def generate_proposals(logits, current, past, anchors, nms_iou: float = 0.5, pre_nms_top_k: int = 512,
                       post_nms_top_k: int = 64, normalizer: str = "position_norm") -> ProposalSet:
    """Top-k anchors by score, decoded to temporal boxes, NMS on current boxes."""
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits).reshape(-1)
    current = np.asarray(current.data if isinstance(current, Tensor) else current).reshape(-1, 5)
    t = 1
    if past is not None:
        past = np.asarray(past.data if isinstance(past, Tensor) else past)
        past = past.reshape(len(logits), -1, 3)
        t = past.shape[1] + 1
    anchors = as_box_array(anchors)
    order = np.argsort(-logits, kind="stable")[:pre_nms_top_k]
    if len(order) == 0:
        return ProposalSet.empty(t)
    a = anchors[order]
    cur_boxes, clamped = decode_boxes(a, current[order], normalizer)
    boxes = np.empty((len(order), t, 5))
    boxes[:, 0] = cur_boxes
    for j in range(1, t):
        pb, cl = decode_boxes(a, past[order, j - 1], normalizer, sizes=cur_boxes[:, 2:4])
        boxes[:, j] = pb
        clamped |= cl
    scores = 1.0 / (1.0 + np.exp(-logits[order]))
    keep = nms(cur_boxes, scores, nms_iou, post_nms_top_k)
    keep = np.asarray(keep, dtype=np.int64)
    return ProposalSet(scores[keep], boxes[keep], order[keep], clamped[keep])
