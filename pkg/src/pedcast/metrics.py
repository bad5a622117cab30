"""Detection and trajectory evaluation: BEV AP, DE@t, ADE, HR@t, breakdowns.

AP uses the continuous precision envelope over every distinct score
threshold. Trajectory metrics are computed on the true-positive pairs that
AP matching produces. Ground truths with fewer than ``HARD_POINTS`` lidar
points are left out, and detections that only hit such objects count
neither way.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import as_box_array, iou_matrix

HARD_POINTS = 5
HIT_RADIUS = 0.5
BIN_EDGES = (0.0, 2.5, 5.0, 7.5, 10.0)


@dataclass
class Detection:
    box: np.ndarray
    score: float
    future: np.ndarray  # (n_future, 3)

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)
        self.future = np.asarray(self.future, dtype=np.float64).reshape(-1, 3)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must be in [0, 1], got {self.score}")


@dataclass
class GroundTruthObject:
    box: np.ndarray
    future: np.ndarray  # (n_future, 3)
    point_count: int
    group_id: int | None = None

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)
        self.future = np.asarray(self.future, dtype=np.float64).reshape(-1, 3)
        if self.point_count < 0:
            raise ValueError("point_count must be nonnegative")

    @property
    def hard(self) -> bool:
        return self.point_count < HARD_POINTS


@dataclass
class MatchResult:
    pairs: list                 # (det index, gt index) true positives
    false_positives: list       # det indices
    ignored: list               # det indices that only hit hard ground truths
    missed: list                # non-hard gt indices left unmatched
    order: list = field(default_factory=list)   # det indices by descending score


def _scores(dets) -> np.ndarray:
    return np.array([d.score for d in dets], dtype=np.float64)


def match_detections(dets, gts, iou_thresh: float = 0.5) -> MatchResult:
    """Greedy score-order matching on rotated current-box IoU.

    Each detection takes the unmatched non-hard ground truth of highest IoU
    at or above ``iou_thresh``. Failing that, a detection reaching the
    threshold on a hard ground truth is ignored; anything else is a false
    positive.
    """
    order = list(np.argsort(-_scores(dets), kind="stable")) if dets else []
    hard = np.array([g.hard for g in gts], dtype=bool)
    ious = iou_matrix(as_box_array([d.box for d in dets]) if dets else np.zeros((0, 5)),
                      as_box_array([g.box for g in gts]) if gts else np.zeros((0, 5)))
    taken = np.zeros(len(gts), dtype=bool)
    pairs, fps, ignored = [], [], []
    for di in order:
        row = ious[di]
        ok = (row >= iou_thresh) & ~hard & ~taken
        if ok.any():
            gi = int(np.argmax(np.where(ok, row, -1.0)))
            taken[gi] = True
            pairs.append((int(di), gi))
        elif np.any((row >= iou_thresh) & hard):
            ignored.append(int(di))
        else:
            fps.append(int(di))
    missed = [i for i in range(len(gts)) if not hard[i] and not taken[i]]
    return MatchResult(pairs, fps, ignored, missed, [int(i) for i in order])


def average_precision(scores, is_tp, n_positive: int):
    """Area under the precision envelope; tied scores form one threshold.

    Returns ``None`` when there are no positives to find.
    """
    if n_positive <= 0:
        return None
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s, tp = scores[order], is_tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    # operating points sit at the last detection of each score level
    ends = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    recall = ctp[ends] / n_positive
    precision = ctp[ends] / (ctp[ends] + cfp[ends])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def _collect(scenes, iou_thresh):
    """Per-scene matches plus flattened (score, tp) records."""
    matches, scores, flags, n_pos = [], [], [], 0
    for dets, gts in scenes:
        m = match_detections(dets, gts, iou_thresh)
        matches.append(m)
        tp_dets = {d for d, _ in m.pairs}
        for d in list(tp_dets) + m.false_positives:
            scores.append(dets[d].score)
            flags.append(d in tp_dets)
        n_pos += sum(not g.hard for g in gts)
    return matches, np.array(scores), np.array(flags, dtype=bool), n_pos


def bev_ap(scenes, iou_thresh: float = 0.5):
    """AP over a dataset given as ``[(detections, ground_truths), ...]`` per scene."""
    _, scores, flags, n_pos = _collect(scenes, iou_thresh)
    return average_precision(scores, flags, n_pos)


@dataclass
class TrajectoryMetrics:
    de: np.ndarray       # (n_future,) centimetres
    ade: float           # centimetres
    hr: np.ndarray       # (n_future,) fractions
    support: int


def displacement_errors(pred_futures, gt_futures, hit_radius: float = HIT_RADIUS):
    """DE@t and HR@t per horizon plus ADE over matched pairs; ``None`` if empty."""
    if len(pred_futures) == 0:
        return None
    p = np.asarray(pred_futures, dtype=np.float64)[..., :2]
    g = np.asarray(gt_futures, dtype=np.float64)[..., :2]
    dist = np.hypot(p[..., 0] - g[..., 0], p[..., 1] - g[..., 1])     # (N, n_future)
    de = 100.0 * dist.mean(axis=0)
    hr = (dist <= hit_radius).mean(axis=0)
    return TrajectoryMetrics(de, float(de.mean()), hr, len(p))


def _pair_futures(scenes, matches, keep=None):
    preds, gts_out = [], []
    for (dets, gts), m in zip(scenes, matches):
        for d, g in m.pairs:
            if keep is None or keep(gts[g]):
                preds.append(dets[d].future)
                gts_out.append(gts[g].future)
    return preds, gts_out


@dataclass
class EvalReport:
    ap: float | None
    trajectory: TrajectoryMetrics | None
    n_gt: int
    n_det: int
    t_future: tuple = ()
    breakdown: list = field(default_factory=list)
    group: dict = field(default_factory=dict)


def evaluate(scenes, iou_thresh: float = 0.5, t_future=None, bin_size: float = 2.5) -> EvalReport:
    matches, scores, flags, n_pos = _collect(scenes, iou_thresh)
    ap = average_precision(scores, flags, n_pos)
    preds, gts = _pair_futures(scenes, matches)
    traj = displacement_errors(preds, gts)
    n_det = sum(len(d) for d, _ in scenes)
    report = EvalReport(ap, traj, n_pos, n_det, tuple(t_future or ()))
    report.breakdown = breakdown_by_trajectory_length(scenes, bin_size, iou_thresh, matches=matches)
    report.group = group_breakdown(scenes, iou_thresh, matches=matches)
    return report


def path_length(gt: GroundTruthObject) -> float:
    """Polyline length from the current centre through the future waypoints."""
    pts = np.vstack([gt.box[None, :2], gt.future[:, :2]])
    return float(np.sum(np.hypot(*np.diff(pts, axis=0).T)))


def length_bin(length: float, bin_size: float = 2.5, n_bins: int = 5) -> int:
    return int(min(max(length, 0.0) // bin_size, n_bins - 1))


def bin_label(i: int, bin_size: float = 2.5, n_bins: int = 5) -> str:
    lo = i * bin_size
    return f"[{lo:g},{lo + bin_size:g})" if i < n_bins - 1 else f"[{lo:g},inf)"


@dataclass
class BinMetrics:
    label: str
    n_gt: int           # all ground truths in the bin, hard included
    support: int        # non-hard ground truths
    n_matched: int
    ap: float | None
    ade: float | None


def breakdown_by_trajectory_length(scenes, bin_size: float = 2.5, iou_thresh: float = 0.5,
                                   n_bins: int = 5, matches=None, attribute_fp: str = "all"):
    """AP and ADE per future-path-length bin.

    True positives go to their ground truth's bin. Unmatched detections
    count as false positives in every bin (``attribute_fp="all"``) or only
    in the bin of the nearest ground truth (``"nearest"``).
    """
    if matches is None:
        matches = [match_detections(d, g, iou_thresh) for d, g in scenes]
    if attribute_fp not in ("all", "nearest"):
        raise ValueError(f"unknown attribute_fp {attribute_fp!r}")
    out = []
    bins_per_scene = [[length_bin(path_length(g), bin_size, n_bins) for g in gts] for _, gts in scenes]
    for b in range(n_bins):
        scores, flags, n_pos, n_gt = [], [], 0, 0
        preds, gfut = [], []
        for (dets, gts), m, bins in zip(scenes, matches, bins_per_scene):
            n_gt += sum(1 for x in bins if x == b)
            n_pos += sum(1 for g, x in zip(gts, bins) if x == b and not g.hard)
            for d, gi in m.pairs:
                if bins[gi] == b:
                    scores.append(dets[d].score)
                    flags.append(True)
                    preds.append(dets[d].future)
                    gfut.append(gts[gi].future)
            for d in m.false_positives:
                if attribute_fp == "all" or _nearest_bin(dets[d], gts, bins) == b:
                    scores.append(dets[d].score)
                    flags.append(False)
        traj = displacement_errors(preds, gfut)
        out.append(BinMetrics(bin_label(b, bin_size, n_bins), n_gt, n_pos, len(preds),
                              average_precision(scores, flags, n_pos), traj.ade if traj else None))
    return out


def _nearest_bin(det, gts, bins):
    if not gts:
        return -1
    d = [np.hypot(*(g.box[:2] - det.box[:2])) for g in gts]
    return bins[int(np.argmin(d))]


def per_object_ade(scenes, iou_thresh: float = 0.5, matches=None) -> dict:
    """ADE in centimetres for every matched ground truth, keyed by (scene index, gt index)."""
    if matches is None:
        matches = [match_detections(d, g, iou_thresh) for d, g in scenes]
    out = {}
    for s, ((dets, gts), m) in enumerate(zip(scenes, matches)):
        for d, g in m.pairs:
            out[(s, g)] = displacement_errors([dets[d].future], [gts[g].future]).ade
    return out


def group_breakdown(scenes, iou_thresh: float = 0.5, matches=None) -> dict:
    """ADE over all matched pairs and over pairs whose ground truth is in a group."""
    if matches is None:
        matches = [match_detections(d, g, iou_thresh) for d, g in scenes]
    out = {}
    for name, keep in (("all", None), ("grouped", lambda g: g.group_id is not None),
                       ("ungrouped", lambda g: g.group_id is None)):
        preds, gts = _pair_futures(scenes, matches, keep)
        out[name] = displacement_errors(preds, gts)
    return out


def format_report(report: EvalReport) -> str:
    """One metric per line: ``name value support``; absent values print as ``nan``."""
    def fmt(v):
        return "nan" if v is None else repr(float(v))

    lines = [f"bev_ap {fmt(report.ap)} {report.n_gt}"]
    tr = report.trajectory
    n = tr.support if tr else 0
    labels = [f"{t:g}" for t in report.t_future] if report.t_future else (
        [str(i + 1) for i in range(len(tr.de))] if tr else [])
    for i, lab in enumerate(labels):
        lines.append(f"de@{lab} {fmt(tr.de[i] if tr else None)} {n}")
    lines.append(f"ade {fmt(tr.ade if tr else None)} {n}")
    for i, lab in enumerate(labels):
        lines.append(f"hr@{lab} {fmt(tr.hr[i] if tr else None)} {n}")
    for b in report.breakdown:
        lines.append(f"bin{b.label}.ap {fmt(b.ap)} {b.support}")
        lines.append(f"bin{b.label}.ade {fmt(b.ade)} {b.n_matched}")
    for name, m in report.group.items():
        lines.append(f"group.{name}.ade {fmt(m.ade if m else None)} {m.support if m else 0}")
    return "\n".join(lines) + "\n"
