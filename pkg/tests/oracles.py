"""Independent reference implementations used only by the tests."""
import numpy as np


def points_in_rotated_box(px, py, box):
    """Membership by projecting onto the box's own axes."""
    x, y, w, l, h = box
    dx, dy = px - x, py - y
    u = dx * np.cos(h) + dy * np.sin(h)
    v = -dx * np.sin(h) + dy * np.cos(h)
    return (np.abs(u) <= w / 2) & (np.abs(v) <= l / 2)


def monte_carlo_iou(a, b, n_side=1000, rng=None):
    """Stratified Monte-Carlo IoU: one uniform sample in each cell of an n_side^2 lattice."""
    rng = rng or np.random.default_rng(0)
    ra = 0.5 * np.hypot(a[2], a[3])
    rb = 0.5 * np.hypot(b[2], b[3])
    x0 = min(a[0] - ra, b[0] - rb)
    x1 = max(a[0] + ra, b[0] + rb)
    y0 = min(a[1] - ra, b[1] - rb)
    y1 = max(a[1] + ra, b[1] + rb)
    i = np.arange(n_side)
    gx, gy = np.meshgrid(i, i, indexing="ij")
    px = x0 + (gx + rng.random(gx.shape)) * (x1 - x0) / n_side
    py = y0 + (gy + rng.random(gy.shape)) * (y1 - y0) / n_side
    ina = points_in_rotated_box(px, py, a)
    inb = points_in_rotated_box(px, py, b)
    union = np.count_nonzero(ina | inb)
    return np.count_nonzero(ina & inb) / union if union else 0.0


def brute_force_nms(boxes, scores, thresh, iou_fn):
    """Quadratic greedy reference: repeatedly take the best remaining box."""
    remaining = list(range(len(boxes)))
    keep = []
    while remaining:
        best = max(remaining, key=lambda i: (scores[i], -i))
        keep.append(best)
        remaining = [i for i in remaining
                     if i != best and iou_fn(boxes[best], boxes[i]) <= thresh]
    return keep


def enumerated_ap(records, n_positive):
    """AP from a PR table enumerated at every distinct score threshold.

    ``records`` is a list of (score, is_tp). For each threshold the table
    holds the precision and recall of all detections scoring at or above
    it; AP sums recall increments times the best precision at any equal or
    higher recall.
    """
    thresholds = sorted({s for s, _ in records}, reverse=True)
    table = []
    for th in thresholds:
        kept = [tp for s, tp in records if s >= th]
        tp = sum(kept)
        table.append((tp / n_positive, tp / len(kept)))
    ap, prev_r = 0.0, 0.0
    for r, _ in table:
        best_p = max(p for rr, p in table if rr >= r)
        ap += (r - prev_r) * best_p
        prev_r = r
    return ap


def smooth_l1_ref(e):
    e = abs(e)
    return 0.5 * e * e if e < 1.0 else e - 0.5
