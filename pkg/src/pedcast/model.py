"""The full two-stage network: preprocessing, joint training step and inference."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sti as sti_mod
from . import trpn
from .config import RunConfig
from .geometry import wrap_angle
from .metrics import Detection, GroundTruthObject
from .nn import BackboneConfig, Tensor, init_backbone, no_grad, resunet_forward
from .nn.optim import adam_step
from .pillars import GridConfig, group_frames, init_pillar_params, pillar_encode, voxelize
from .simworld import GroupingConfig, Scene, label_groups, points_in_box_count


@dataclass
class SceneBatch:
    """Everything one scene contributes to a step, computed once."""
    pillars: list
    gt_current: np.ndarray     # (G, 5)
    gt_past: np.ndarray        # (G, t-1, 5) at grouped-frame offsets -1, -2, ...
    gt_future: np.ndarray      # (G, n_future, 5)
    gt_tracks: np.ndarray      # (G, t, 5) at offsets 0, -1, ...
    point_counts: np.ndarray   # (G,)
    group_ids: list
    anchor_targets: trpn.AnchorTargets | None = None


class Model:
    """Parameters plus the configuration needed to run them."""

    def __init__(self, cfg: RunConfig | None = None, seed: int | None = None):
        cfg = cfg or RunConfig()
        self.cfg = cfg
        self.grid = GridConfig(cfg["grid.range"], cfg["grid.range"], cfg["grid.pillar_size"],
                               cfg["grid.max_points_per_pillar"], cfg["grid.max_pillars"])
        self.t_input = cfg["frames.input"]
        self.t = cfg["frames.groups"]
        if self.t_input % self.t:
            raise ValueError(f"frames.groups={self.t} must divide frames.input={self.t_input}")
        self.t_future = tuple(cfg["frames.future"])
        self.backbone = BackboneConfig(cfg["backbone.c0"], cfg["backbone.c1"], cfg["backbone.c2"],
                                       cfg["backbone.kernel"], cfg["backbone.nonlinearity"],
                                       cfg["backbone.channel_divisor"])
        radius = cfg["sti.interaction_radius"]
        self.sti = sti_mod.STIConfig(
            crop_size=cfg["sti.crop_size"], local_channels=cfg["sti.local_channels"],
            path_hidden=cfg["sti.path_hidden"], phi_dim=cfg["sti.phi_dim"],
            alpha_hidden=cfg["sti.alpha_hidden"], interaction_dim=cfg["sti.interaction_dim"],
            head_hidden=cfg["sti.head_hidden"], n_future=len(self.t_future),
            use_history_path=cfg["sti.use_history_path"], use_interaction=cfg["sti.use_interaction"],
            interaction_radius=radius if radius > 0 else None, normalizer=cfg["sti.normalizer"],
            nonlinearity=cfg["backbone.nonlinearity"])
        self.assigner = trpn.AssignerConfig(cfg["assign.th_pos"], cfg["assign.th_neg"])
        self.loss1 = trpn.LossWeights(cfg["loss.cls"], cfg["loss.cur_reg"], cfg["loss.past_reg"])
        self.loss2 = trpn.LossWeights(cfg["loss2.cls"], cfg["loss2.cur_reg"], cfg["loss2.future_reg"])
        priors = [(cfg["trpn.anchor_w"], cfg["trpn.anchor_l"], h) for h in cfg["trpn.anchor_headings"]]
        self.n_priors = len(priors)
        self.anchors = trpn.build_anchor_grid(self.grid, priors)
        rng = np.random.default_rng(cfg["seed"] if seed is None else seed)
        c_in = cfg["pillar.channels"]
        params = init_pillar_params(rng, c_in)
        params.update(init_backbone(rng, self.backbone, c_in * self.t_input // self.t))
        params.update(trpn.init_trpn_params(rng, self.backbone.out_channels, self.t, cfg["trpn.hidden"],
                                            self.n_priors))
        params.update(sti_mod.init_sti_params(rng, self.sti, self.backbone.out_channels, self.t))
        self.params: dict = params

    # -- data -------------------------------------------------------------------------------
    def group_offsets(self) -> np.ndarray:
        """History index of each grouped frame's newest member, offsets 0, -1, ..."""
        k = self.t_input // self.t
        newest = k * np.arange(1, self.t + 1) - 1
        return newest[::-1]

    def prepare(self, scene: Scene, with_targets: bool = True) -> SceneBatch:
        if len(scene.frames) != self.t_input:
            raise ValueError(f"scene has {len(scene.frames)} frames, config expects {self.t_input}")
        pillars = [voxelize(f, self.grid) for f in scene.frames]
        peds = scene.pedestrians
        g = len(peds)
        idx = self.group_offsets()
        tracks = np.array([p.history[idx] for p in peds]).reshape(g, self.t, 5)
        fut = np.array([p.future for p in peds]).reshape(g, -1, 5)
        if fut.shape[1] != len(self.t_future):
            raise ValueError(f"scene carries {fut.shape[1]} future steps, config expects {len(self.t_future)}")
        counts = np.array([points_in_box_count(scene.frames[-1].points, p.current) for p in peds], dtype=np.int64)
        groups = label_groups(peds, GroupingConfig()) if peds else []
        batch = SceneBatch(pillars, tracks[:, 0].copy(), tracks[:, 1:].copy(), fut, tracks, counts, groups)
        if with_targets:
            batch.anchor_targets = trpn.assign_targets(self.anchors, batch.gt_current, self.assigner,
                                                       batch.gt_past, self.cfg["trpn.normalizer"])
        return batch

    # -- network ----------------------------------------------------------------------------
    def features(self, batch: SceneBatch) -> Tensor:
        act = self.backbone.nonlinearity
        images = pillar_encode(batch.pillars, self.params, nonlinearity=act)
        return resunet_forward(group_frames(images, self.t), self.backbone, self.params)

    def first_stage(self, fmaps: Tensor) -> dict:
        return trpn.trpn_forward(fmaps, self.params, self.n_priors, nonlinearity=self.backbone.nonlinearity)

    def proposals(self, pred: dict, training: bool = False) -> trpn.ProposalSet:
        c = self.cfg
        keep = c["train.post_nms_top_k"] if training else c["trpn.post_nms_top_k"]
        return trpn.generate_proposals(pred["logits"], pred["current"], pred.get("past"), self.anchors,
                                       c["trpn.nms_iou"], c["trpn.pre_nms_top_k"], keep, c["trpn.normalizer"])

    def jittered_gt_proposals(self, batch: SceneBatch, rng: np.random.Generator) -> trpn.ProposalSet:
        """Noisy copies of ground-truth tracks, so the second stage sees positives early."""
        n = min(self.cfg["train.gt_proposals"], len(batch.gt_current))
        if n == 0:
            return trpn.ProposalSet.empty(self.t)
        pick = np.sort(rng.choice(len(batch.gt_current), size=n, replace=False))
        boxes = batch.gt_tracks[pick].copy()
        s = self.cfg["train.gt_jitter"]
        boxes[:, :, :2] += rng.normal(0.0, s, size=(n, self.t, 2))
        boxes[:, :, 2:4] *= np.exp(rng.normal(0.0, 0.5 * s, size=(n, 1, 2)))
        boxes[:, :, 4] = wrap_angle(boxes[:, :, 4] + rng.normal(0.0, s, size=(n, self.t)))
        return trpn.ProposalSet(np.ones(n), boxes, np.full(n, -1), np.zeros(n, bool))

    def loss(self, batch: SceneBatch, rng: np.random.Generator):
        """Joint first- and second-stage loss for one scene; returns ``(total, parts)``."""
        fmaps = self.features(batch)
        pred = self.first_stage(fmaps)
        targets = batch.anchor_targets
        if self.cfg["train.anchor_samples"] > 0:
            targets = trpn.sample_anchor_targets(targets, rng, self.cfg["train.anchor_samples"],
                                                 self.cfg["train.pos_fraction"])
        l1, p1 = trpn.trpn_loss(pred, targets, self.loss1)
        props = self.proposals(pred, training=True)
        extra = self.jittered_gt_proposals(batch, rng)
        props = _merge(props, extra)
        parts = {f"rpn.{k}": v for k, v in p1.items()}
        total = l1
        if len(props):
            out = sti_mod.sti_forward(props, fmaps, self.params, self.sti, self.grid)
            tg = sti_mod.assign_stage_two(props.boxes[:, 0], batch.gt_current, batch.gt_future,
                                          self.assigner, self.sti.normalizer)
            l2, p2 = sti_mod.second_stage_loss(out, tg, self.loss2)
            total = total + l2
            parts.update({f"sti.{k}": v for k, v in p2.items()})
        parts["total"] = total.item()
        return total, parts

    def infer(self, batch: SceneBatch) -> sti_mod.Detections:
        with no_grad():
            fmaps = self.features(batch)
            pred = self.first_stage(fmaps)
            props = self.proposals(pred)
            if len(props) == 0:
                return sti_mod.Detections.empty(len(self.t_future), self.t)
            out = sti_mod.sti_forward(props, fmaps, self.params, self.sti, self.grid)
            c = self.cfg
            return sti_mod.final_detections(props, out, c["infer.nms_iou"], c["infer.max_detections"],
                                            self.sti.normalizer, c["infer.score_thresh"])

    # -- state ------------------------------------------------------------------------------
    def state_dict(self) -> dict:
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"checkpoint lacks parameter {k}")
            if state[k].shape != p.data.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape}, model {p.data.shape}")
            p.data[...] = state[k]


def evaluate_model(model: Model, batches: list, iou: float | None = None):
    from .metrics import evaluate
    scenes = [(detections_to_records(model.infer(b)), ground_truth_records(b)) for b in batches]
    c = model.cfg
    return evaluate(scenes, c["eval.iou"] if iou is None else iou, model.t_future, c["eval.bin_size"])


def _merge(a: trpn.ProposalSet, b: trpn.ProposalSet) -> trpn.ProposalSet:
    if len(b) == 0:
        return a
    if len(a) == 0:
        return b
    return trpn.ProposalSet(np.concatenate([a.scores, b.scores]), np.concatenate([a.boxes, b.boxes]),
                            np.concatenate([a.anchor_index, b.anchor_index]),
                            np.concatenate([a.clamped, b.clamped]))


def detections_to_records(dets: sti_mod.Detections) -> list:
    return [Detection(b, float(np.clip(s, 0.0, 1.0)), f) for b, s, f in zip(dets.boxes, dets.scores, dets.future)]


def ground_truth_records(batch: SceneBatch) -> list:
    out = []
    for i in range(len(batch.gt_current)):
        fut = batch.gt_future[i][:, [0, 1, 4]]
        out.append(GroundTruthObject(batch.gt_current[i], fut, int(batch.point_counts[i]), batch.group_ids[i]))
    return out


# -- training loop -------------------------------------------------------------------------------

class TrainingError(RuntimeError):
    pass


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step)])


def scene_for_step(seed: int, step: int, n_scenes: int) -> int:
    """Each epoch visits every scene once in a seed-determined order."""
    epoch, pos = divmod(step, n_scenes)
    return int(np.random.default_rng([int(seed), 1_000_000 + epoch]).permutation(n_scenes)[pos])


def learning_rate(cfg: RunConfig, step: int) -> float:
    """Base rate, scaled by ``train.lr_decay`` from ``train.lr_decay_at`` of ``train.steps`` on."""
    if step >= cfg["train.lr_decay_at"] * cfg["train.steps"]:
        return cfg["train.lr"] * cfg["train.lr_decay"]
    return cfg["train.lr"]


def train_steps(model: Model, batches: list, start: int, stop: int, opt_state: dict, log=None,
                on_step=None) -> dict:
    """Run steps ``start`` .. ``stop - 1``; every draw depends only on (seed, step)."""
    seed = model.cfg["seed"]
    for step in range(start, stop):
        batch = batches[scene_for_step(seed, step, len(batches))]
        rng = step_rng(seed, step)
        for p in model.params.values():
            p.grad = None
        total, parts = model.loss(batch, rng)
        if not np.isfinite(total.item()):
            raise TrainingError(f"non-finite loss at step {step}: {parts}")
        total.backward()
        grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
        adam_step(model.params, grads, opt_state, lr=learning_rate(model.cfg, step))
        if log is not None:
            log(step, parts)
        if on_step is not None:
            on_step(step + 1)
    return opt_state


def training_state(model: Model, opt_state: dict, step: int) -> dict:
    out = {f"param/{k}": v for k, v in model.state_dict().items()}
    for k in model.params:
        if k in opt_state.get("m", {}):
            out[f"adam.m/{k}"] = opt_state["m"][k]
            out[f"adam.v/{k}"] = opt_state["v"][k]
    out["adam.t"] = np.array(float(opt_state.get("t", 0)))
    out["train.step"] = np.array(float(step))
    return out


def restore_training_state(model: Model, state: dict) -> tuple[dict, int]:
    model.load_state_dict({k[len("param/"):]: v for k, v in state.items() if k.startswith("param/")})
    opt = {"t": int(state.get("adam.t", np.array(0.0))), "m": {}, "v": {}}
    for k, v in state.items():
        if k.startswith("adam.m/"):
            opt["m"][k[len("adam.m/"):]] = v.copy()
        elif k.startswith("adam.v/"):
            opt["v"][k[len("adam.v/"):]] = v.copy()
    return opt, int(state.get("train.step", np.array(0.0)))
