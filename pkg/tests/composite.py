"""A small end-to-end graph (pillars, backbone, T-RPN, second stage) on a 16x16 grid."""
import numpy as np

from pedcast import sti, trpn
from pedcast.nn import BackboneConfig, init_backbone, resunet_forward
from pedcast.pillars import GridConfig, PointCloudFrame, group_frames, init_pillar_params, pillar_encode, voxelize

ACT = "tanh"


def build(seed=0):
    rng = np.random.default_rng(seed)
    grid = GridConfig(range_x=5.0, range_y=5.0, max_points_per_pillar=8)
    assert (grid.H, grid.W) == (16, 16)
    frames = [PointCloudFrame(-0.2 * (5 - i), rng.uniform([-2.5, -2.5, 0], [2.5, 2.5, 1.8], (150, 3)))
              for i in range(6)]
    pils = [voxelize(f, grid) for f in frames]
    params = init_pillar_params(rng, 4)
    bcfg = BackboneConfig(c0=8, c1=8, c2=8, channel_divisor=1, nonlinearity=ACT)
    params.update(init_backbone(rng, bcfg, 8))
    t = 3
    params.update(trpn.init_trpn_params(rng, bcfg.out_channels, t, hidden=8))
    scfg = sti.STIConfig(crop_size=3, local_channels=8, path_hidden=4, phi_dim=4, alpha_hidden=4,
                         interaction_dim=4, head_hidden=6, n_future=2, nonlinearity=ACT)
    params.update(sti.init_sti_params(rng, scfg, bcfg.out_channels, t))
    for p in params.values():
        p.data += rng.normal(0, 0.05, p.shape)
    anchors = trpn.build_anchor_grid(grid, [(0.9, 0.9, 0.0)])
    gt = np.array([[0.1, 0.2, 0.7, 0.9, 0.3], [-1.0, 1.2, 0.7, 0.9, -0.5]])
    gt_past = np.stack([gt + [0.2 * j, 0, 0, 0, 0] for j in (1, 2)], axis=1)
    gt_future = np.stack([gt - [0.3 * j, 0, 0, 0, 0] for j in (1, 2)], axis=1)
    targets = trpn.assign_targets(anchors, gt, gt_past=gt_past)
    state = {"props": None}

    def forward():
        img = pillar_encode(pils, params, nonlinearity=ACT)
        fm = resunet_forward(group_frames(img, t), bcfg, params)
        pred = trpn.trpn_forward(fm, params, nonlinearity=ACT)
        l1, _ = trpn.trpn_loss(pred, targets)
        if state["props"] is None:
            # proposals are a discrete selection; freeze them so the loss is smooth in the parameters
            state["props"] = trpn.generate_proposals(pred["logits"], pred["current"], pred["past"], anchors,
                                                     post_nms_top_k=6)
        props = state["props"]
        out = sti.sti_forward(props, fm, params, scfg, grid)
        t2 = sti.assign_stage_two(props.boxes[:, 0], gt, gt_future)
        l2, _ = sti.second_stage_loss(out, t2)
        return l1 + l2

    forward()
    return forward, params, targets, state
