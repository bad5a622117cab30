"""One test per acceptance criterion, numbered 1 to 11."""
import math
import os
import time

import numpy as np
import pytest

import composite
import gradcases
from oracles import enumerated_ap, monte_carlo_iou, smooth_l1_ref
from pedcast import metrics, simworld, sti, trpn
from pedcast.cli import _gt_records, main
from pedcast.geometry import iou_pairs
from pedcast.metrics import Detection, GroundTruthObject
from pedcast.nn import Tensor
from pedcast.nn.gradcheck import gradcheck
from pedcast.pillars import GridConfig

T_FUTURE = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)


# 1 -------------------------------------------------------------------------------------------

def test_c01_encode_decode_round_trip():
    rng = np.random.default_rng(1)
    n = 10_000
    t0 = time.perf_counter()
    anchors = np.column_stack([rng.uniform(-40, 40, (n, 2)), rng.uniform(0.3, 3.0, (n, 2)),
                               rng.uniform(-math.pi, math.pi, n)])
    dh = rng.uniform(-math.pi, math.pi, n) * (1 - 1e-9)
    gt = np.column_stack([anchors[:, :2] + rng.uniform(-5, 5, (n, 2)), rng.uniform(0.3, 3.0, (n, 2)),
                          anchors[:, 4] + dh])
    for norm in trpn.NORMALIZERS:
        back, clamped = trpn.decode_boxes(anchors, trpn.encode_boxes(gt, anchors, norm), norm)
        assert not clamped.any()
        assert np.max(np.abs(back[:, :4] - gt[:, :4])) < 1e-9
        heading_err = np.abs(np.remainder(back[:, 4] - gt[:, 4] + math.pi, 2 * math.pi) - math.pi)
        assert np.max(heading_err) < 1e-9
    assert time.perf_counter() - t0 < 1.0


# 2 -------------------------------------------------------------------------------------------

def test_c02_rotated_iou_matches_monte_carlo():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    a = np.column_stack([rng.uniform(-2, 2, (200, 2)), rng.uniform(0.3, 3.0, (200, 2)),
                         rng.uniform(-math.pi, math.pi, 200)])
    b = np.column_stack([a[:, :2] + rng.uniform(-1.5, 1.5, (200, 2)), rng.uniform(0.3, 3.0, (200, 2)),
                         rng.uniform(-math.pi, math.pi, 200)])
    exact = iou_pairs(a, b)
    assert np.count_nonzero(exact > 0.05) > 100
    worst = max(abs(exact[i] - monte_carlo_iou(a[i], b[i], 1000, np.random.default_rng(i))) for i in range(200))
    assert worst < 2e-3
    assert time.perf_counter() - t0 < 30.0


# 3 -------------------------------------------------------------------------------------------

def test_c03_gradients_match_finite_differences():
    t0 = time.perf_counter()
    worst = {name: gradcases.worst_error(build) for name, build in gradcases.op_cases().items()}
    assert max(worst.values()) < 1e-4, worst
    forward, params, _, _ = composite.build(0)
    errs = gradcheck(forward, params, step=1e-5, coords_per_tensor=2)
    assert max(errs.values()) < 1e-4, errs
    assert time.perf_counter() - t0 < 120.0


# 4 -------------------------------------------------------------------------------------------

def _trpn_setup():
    rng = np.random.default_rng(4)
    grid = GridConfig(4.0, 4.0, 0.5)
    anchors = trpn.build_anchor_grid(grid, [(0.9, 0.9, 0.0)])
    gt = np.array([[0.1, 0.2, 0.8, 0.9, 0.3], [-1.0, 1.1, 0.7, 0.9, -0.4]])
    gt_past = np.stack([gt + [0.15 * j, 0, 0, 0, 0] for j in (1, 2)], axis=1)
    targets = trpn.assign_targets(anchors, gt, gt_past=gt_past)
    params = trpn.init_trpn_params(rng, 4, 3, hidden=8)
    for p in params.values():
        p.data += rng.normal(0, 0.1, p.shape)
    feats = Tensor(rng.normal(size=(3, grid.H, grid.W, 4)))
    return rng, params, feats, targets


def _loss_and_grads(params, feats, targets, deltas):
    for p in params.values():
        p.grad = None
    pred = trpn.trpn_forward(feats, params)
    pred = {k: v + Tensor(deltas[k]) for k, v in pred.items()}
    total, _ = trpn.trpn_loss(pred, targets)
    total.backward()
    return total.item(), {k: p.grad.copy() for k, p in params.items()}


def test_c04_ignored_anchors_contribute_nothing():
    rng, params, feats, base = _trpn_setup()
    sampled = trpn.sample_anchor_targets(base, np.random.default_rng(0), 8, 0.5)
    for targets in (base, sampled):
        labels = targets.labels
        assert {-1, 0, 1} <= set(labels.tolist())
        ignored = labels == -1
        shapes = {"logits": (len(labels),), "current": (len(labels), 5), "past": (len(labels), 2, 3)}
        zero = {k: np.zeros(s) for k, s in shapes.items()}
        noise = {}
        for k, s in shapes.items():
            d = rng.normal(0, 5.0, s)
            d[~ignored] = 0.0
            noise[k] = d
        l0, g0 = _loss_and_grads(params, feats, targets, zero)
        l1, g1 = _loss_and_grads(params, feats, targets, noise)
        assert l1 - l0 == 0.0
        for k in params:
            assert np.array_equal(g0[k], g1[k]), k


# 5 -------------------------------------------------------------------------------------------

def test_c05_past_loss_sums_per_frame_means():
    labels = np.array([1, 1, 0])
    past_t = np.array([[[0.2, 0.1, 0.0], [0.4, -0.3, 0.1]],
                       [[-0.5, 0.0, 0.2], [0.0, 0.0, 0.0]],
                       [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]])
    valid = np.array([[True, True], [True, False], [False, False]])
    past_p = np.array([[[1.7, 0.1, 0.3], [0.4, 0.5, 0.1]],
                       [[-0.1, 0.9, 0.2], [8.0, 8.0, 8.0]],
                       [[9.0, 9.0, 9.0], [9.0, 9.0, 9.0]]])
    targets = trpn.AnchorTargets(labels, np.zeros((3, 5)), past_t, valid, np.array([0, 1, -1]), np.zeros(3))
    pred = {"logits": Tensor(np.zeros(3)), "current": Tensor(np.zeros((3, 5))), "past": Tensor(past_p)}
    _, parts = trpn.trpn_loss(pred, targets)

    def row(i, j):
        return sum(smooth_l1_ref(a - b) for a, b in zip(past_p[i, j], past_t[i, j]))

    per_frame = (row(0, 0) + row(1, 0)) / 2 + row(0, 1) / 1
    pooled = (row(0, 0) + row(1, 0) + row(0, 1)) / 3
    assert abs(per_frame - pooled) > 0.1 and abs(per_frame - 2 * pooled) > 0.1
    assert abs(parts["past_reg"] - per_frame) < 1e-12


# 6 -------------------------------------------------------------------------------------------

def _gt(x, points=50):
    return GroundTruthObject(np.array([x, 0.0, 0.7, 0.8, 0.0]), np.tile([x, 0.0, 0.0], (6, 1)), points)


def _det(gt, score, dx=0.0):
    box = gt.box.copy()
    box[0] += dx
    return Detection(box, score, gt.future.copy())


FAR = np.array([40.0, 40.0, 0.7, 0.8, 0.0])

AP_CASES = [
    # gts (x, points), detections (gt index or None for a false positive, score, x offset), PR records, positives
    ([(0, 50), (4, 50), (8, 50), (12, 3)],
     [(0, 0.9, 0), (None, 0.8, 0), (1, 0.7, 0), (0, 0.6, 0.1), (3, 0.5, 0), (2, 0.4, 0)],
     [(0.9, True), (0.8, False), (0.7, True), (0.6, False), (0.4, True)], 3),
    ([(0, 50), (4, 4), (8, 50)],
     [(0, 0.5, 0), (None, 0.5, 0), (1, 0.9, 0), (2, 0.3, 0)],
     [(0.5, True), (0.5, False), (0.3, True)], 2),
    ([(0, 50), (4, 50), (8, 50), (12, 50), (16, 5)],
     [(None, 0.95, 0), (None, 0.9, 0), (2, 0.85, 0), (4, 0.8, 0), (0, 0.2, 0.5)],
     [(0.95, False), (0.9, False), (0.85, True), (0.8, True), (0.2, False)], 5),
    ([(0, 2), (4, 1)], [(0, 0.9, 0), (1, 0.8, 0), (None, 0.7, 0)], [(0.7, False)], 0),
]


@pytest.mark.parametrize("case", range(len(AP_CASES)))
def test_c06_ap_matches_enumerated_table(case):
    gt_spec, det_spec, records, n_pos = AP_CASES[case]
    gts = [_gt(x, pts) for x, pts in gt_spec]
    dets = []
    for k, (gi, score, dx) in enumerate(det_spec):
        if gi is None:
            dets.append(Detection(FAR + [0, 3 * k, 0, 0, 0], score, np.zeros((6, 3))))
        else:
            dets.append(_det(gts[gi], score, dx))
    ap = metrics.bev_ap([(dets, gts)])
    if n_pos == 0:
        assert ap is None
    else:
        assert abs(ap - enumerated_ap(records, n_pos)) < 1e-12


# 7 -------------------------------------------------------------------------------------------

ICFG = sti.STIConfig(crop_size=3, local_channels=6, path_hidden=4, phi_dim=3, alpha_hidden=5, interaction_dim=4,
                     head_hidden=5, n_future=2)


def _interaction_params(rng, cfg):
    p = sti.init_sti_params(rng, cfg, 2, 3)
    for v in p.values():
        v.data += rng.normal(0, 0.3, v.shape)
    return p


@pytest.mark.parametrize("alpha_hidden", [5, 0])
def test_c07_interaction_normalized_and_equivariant(alpha_hidden):
    cfg = sti.STIConfig(**{**ICFG.__dict__, "alpha_hidden": alpha_hidden})
    for seed in range(5):
        rng = np.random.default_rng(70 + seed)
        params = _interaction_params(rng, cfg)
        p = int(rng.integers(1, 9))
        f = rng.normal(size=(p, cfg.feature_dim))
        g, w = sti.interaction(Tensor(f), params, cfg, return_weights=True)
        assert np.max(np.abs(w.data.sum(axis=1) - 1.0)) <= 1e-12
        perm = rng.permutation(p)
        g_perm = sti.interaction(Tensor(f[perm]), params, cfg).data
        assert np.max(np.abs(g_perm - g.data[perm])) <= 1e-12
        bias = "sti.alpha2.b" if alpha_hidden else "sti.alpha1.b"
        params[bias].data += 3.7
        g_shift = sti.interaction(Tensor(f), params, cfg).data
        assert np.max(np.abs(g_shift - g.data)) <= 1e-12


# 8 -------------------------------------------------------------------------------------------

def _read_report(path):
    out = {}
    for line in open(path):
        name, value, support = line.split()
        out[name] = (float(value), int(support))
    return out


@pytest.mark.slow
def test_c08_end_to_end_smoke(tmp_path):
    train_data, test_data = str(tmp_path / "train.bin"), str(tmp_path / "test.bin")
    run, report_path = str(tmp_path / "run"), str(tmp_path / "report.txt")
    assert main(["gen-data", "--out", train_data, "--scenes", "200", "--seed", "0"]) == 0
    assert main(["gen-data", "--out", test_data, "--scenes", "50", "--seed", "99"]) == 0
    t0 = time.perf_counter()
    assert main(["train", "--data", train_data, "--out", run]) == 0
    train_seconds = time.perf_counter() - t0
    assert main(["eval", "--data", test_data, "--checkpoint", os.path.join(run, "checkpoint.ckpt"),
                 "--out", report_path]) == 0
    report = _read_report(report_path)

    rows = [line.split() for line in open(os.path.join(run, "loss_log.tsv"))]
    total = np.array([float(r[rows[0].index("total")]) for r in rows[1:]])
    assert total[-500:].mean() < total[:500].mean()
    assert train_seconds <= 1800.0
    assert report["bev_ap"][0] >= 0.80
    assert report["ade"][0] <= 50.0


# 9 -------------------------------------------------------------------------------------------

ABLATION_SEEDS = (0, 1, 2)
ABLATION_STEPS = 3000
ABLATION_VARIANTS = {"full": {}, "no_interaction": {"sti.use_interaction": False},
                     "neither": {"sti.use_interaction": False, "sti.use_history_path": False}}


def _ablation_run(seed, flags, train, test):
    """Per-object ADE of one trained variant plus the grouped flag of every test pedestrian."""
    from pedcast.config import RunConfig
    from pedcast.model import Model, detections_to_records, ground_truth_records, train_steps
    model = Model(RunConfig({"grid.range": 10.0, "train.steps": ABLATION_STEPS, "seed": seed, **flags}))
    train_steps(model, [model.prepare(s) for s in train], 0, ABLATION_STEPS, {})
    batches = [model.prepare(s, with_targets=False) for s in test]
    scenes = [(detections_to_records(model.infer(b)), ground_truth_records(b)) for b in batches]
    grouped = {(s, i) for s, (_, gts) in enumerate(scenes) for i, g in enumerate(gts) if g.group_id is not None}
    return metrics.per_object_ade(scenes), grouped


@pytest.mark.slow
def test_c09_ablation_direction():
    from dataclasses import replace
    sim = replace(simworld.PRESETS["group_heavy"], extent=3.5)
    train = simworld.generate_scenes(sim, 200, 0)
    test = simworld.generate_scenes(sim, 50, 99)
    per_seed = []
    for seed in ABLATION_SEEDS:
        runs = {name: _ablation_run(seed, flags, train, test) for name, flags in ABLATION_VARIANTS.items()}
        grouped = runs["full"][1]
        # compare variants on the pedestrians every variant detected
        common = set.intersection(*(set(per) for per, _ in runs.values()))
        common_grouped = common & grouped
        assert len(common) > 100 and len(common_grouped) > 50
        per_seed.append({name: (np.mean([per[k] for k in common]), np.mean([per[k] for k in common_grouped]))
                         for name, (per, _) in runs.items()})
    mean = {name: np.mean([r[name] for r in per_seed], axis=0) for name in ABLATION_VARIANTS}
    assert mean["full"][0] <= mean["neither"][0]
    gain_all = mean["no_interaction"][0] - mean["full"][0]
    gain_grouped = mean["no_interaction"][1] - mean["full"][1]
    assert gain_grouped >= gain_all, (mean, gain_all, gain_grouped)


# 10 ------------------------------------------------------------------------------------------

def _breakdown_scenes():
    rng = np.random.default_rng(10)
    cfg = simworld.PRESETS["group_heavy"]
    out = []
    for sc in simworld.generate_scenes(cfg, 12, 10):
        gts = _gt_records(sc)
        # fast walkers so that every length bin is populated
        for speed in (0.5, 2.0, 3.0, 4.0):
            x0 = rng.uniform(-10, 10, 2)
            fut = np.array([[x0[0] + speed * t, x0[1], 0.0] for t in T_FUTURE])
            gts.append(GroundTruthObject(np.array([*x0, 0.7, 0.8, 0.0]), fut, int(rng.integers(0, 40))))
        dets = []
        for g in gts:
            if rng.random() < 0.8:
                box = g.box + np.r_[rng.normal(0, 0.05, 2), 0, 0, 0]
                fut = g.future + np.c_[rng.normal(0, 0.4, (6, 2)), np.zeros(6)]
                dets.append(Detection(box, float(rng.random()), fut))
        for _ in range(2):
            dets.append(Detection(np.r_[rng.uniform(-15, 15, 2), 0.7, 0.8, 0.0], float(rng.random()),
                                  np.zeros((6, 3))))
        out.append((dets, gts))
    return out


def test_c10_breakdown_partitions_and_weights():
    scenes = _breakdown_scenes()
    report = metrics.evaluate(scenes, 0.5, T_FUTURE, 2.5)
    rows = report.breakdown
    assert [r.label for r in rows] == ["[0,2.5)", "[2.5,5)", "[5,7.5)", "[7.5,10)", "[10,inf)"]
    edges = [(0.0, 2.5), (2.5, 5.0), (5.0, 7.5), (7.5, 10.0), (10.0, math.inf)]
    all_gts = [g for _, gts in scenes for g in gts]
    counts = [sum(lo <= metrics.path_length(g) < hi for g in all_gts) for lo, hi in edges]
    assert counts == [r.n_gt for r in rows] and sum(counts) == len(all_gts)
    assert all(r.support > 0 for r in rows)
    assert sum(r.support for r in rows) == report.n_gt
    assert sum(r.n_matched for r in rows) == report.trajectory.support
    weighted = sum(r.n_matched * r.ade for r in rows if r.n_matched) / sum(r.n_matched for r in rows)
    assert abs(weighted - report.trajectory.ade) < 1e-9
    grp = report.group
    assert grp["grouped"].support > 0
    assert grp["grouped"].support + grp["ungrouped"].support == grp["all"].support


# 11 ------------------------------------------------------------------------------------------

def test_c11_training_and_dataset_are_deterministic(tmp_path):
    data = str(tmp_path / "scenes.bin")
    assert main(["gen-data", "--out", data, "--scenes", "3", "--seed", "11"]) == 0
    runs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert main(["train", "--data", data, "--out", out, "--steps", "3", "--seed", "5"]) == 0
        runs.append(open(os.path.join(out, "checkpoint.ckpt"), "rb").read())
    assert runs[0] == runs[1]

    raw = open(data, "rb").read()
    scenes = simworld.loads_dataset(raw)
    assert scenes == simworld.generate_scenes(simworld.PRESETS["smoke"], 3, 11)
    assert simworld.dumps_dataset(scenes) == raw
    for sc, ref in zip(scenes, simworld.generate_scenes(simworld.PRESETS["smoke"], 3, 11)):
        for fa, fb in zip(sc.frames, ref.frames):
            assert fa.timestamp == fb.timestamp
            assert np.array_equal(fa.points, fb.points.astype(np.float32))
        for pa, pb in zip(sc.pedestrians, ref.pedestrians):
            assert np.array_equal(pa.boxes, pb.boxes) and np.array_equal(pa.times, pb.times)
