"""Command-line entry points: gen-data, train, eval, predict, render, benchmark."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from collections import Counter

import numpy as np

from . import metrics, simworld
from .config import ConfigError, load_config, parse_override
from .model import (Model, TrainingError, detections_to_records, ground_truth_records, restore_training_state,
                    train_steps, training_state)
from .nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .predictions import PredictedObject, PredictionFile, read_predictions, write_predictions
from .render import render_svg

CHECKPOINT_NAME = "checkpoint.ckpt"
CONFIG_NAME = "config.json"


class CliError(Exception):
    pass


def _config(args, extra: dict | None = None):
    overrides = dict(parse_override(s) for s in (getattr(args, "set", None) or []))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    overrides.update(extra or {})
    return load_config(getattr(args, "config", None), overrides)


def _sim_config(cfg):
    preset = cfg["sim.preset"]
    if preset not in simworld.PRESETS:
        raise CliError(f"unknown sim.preset {preset!r}; choose from {sorted(simworld.PRESETS)}")
    base = simworld.PRESETS[preset]
    from dataclasses import replace
    return replace(base, n_frames=cfg["frames.input"], frame_dt=cfg["frames.dt"],
                   t_future=tuple(cfg["frames.future"]))


# -- gen-data ----------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    sim = _sim_config(cfg)
    scenes = simworld.generate_scenes(sim, args.scenes, cfg["seed"])
    try:
        simworld.write_dataset(args.out, scenes)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}") from None
    hist = Counter(len(s.pedestrians) for s in scenes)
    counts = [simworld.points_in_box_count(s.frames[-1].points, p.current) for s in scenes for p in s.pedestrians]
    hard = float(np.mean(np.array(counts) < metrics.HARD_POINTS)) if counts else 0.0
    print(f"wrote {len(scenes)} scenes to {args.out}")
    print("pedestrians per scene: " + (", ".join(f"{k}:{hist[k]}" for k in sorted(hist)) or "none"))
    print(f"hard ground-truth fraction: {hard:.4f} ({len(counts)} pedestrians)")
    return 0


# -- train ---------------------------------------------------------------------------------------

def cmd_train(args) -> int:
    extra = {"train.steps": args.steps} if args.steps is not None else {}
    cfg = _config(args, extra)
    scenes = _read_data(args.data)
    if not scenes:
        raise CliError("training data holds no scenes")
    os.makedirs(args.out, exist_ok=True)
    model = Model(cfg)
    ckpt_path = os.path.join(args.out, CHECKPOINT_NAME)
    opt_state: dict = {}
    start = 0
    if args.resume and os.path.exists(ckpt_path):
        opt_state, start = restore_training_state(model, load_checkpoint(ckpt_path))
    with open(os.path.join(args.out, CONFIG_NAME), "w") as fh:
        fh.write(cfg.to_json())
    try:
        batches = [model.prepare(s) for s in scenes]
    except ValueError as exc:
        raise CliError(f"data does not fit the config: {exc}") from None
    steps = cfg["train.steps"]
    every = max(cfg["train.checkpoint_every"], 1)
    log_path = os.path.join(args.out, "loss_log.tsv")
    mode = "a" if start > 0 else "w"
    with open(log_path, mode) as log_fh:
        header_written = start > 0

        def log(step, parts):
            nonlocal header_written
            if not header_written:
                log_fh.write("step\t" + "\t".join(parts) + "\n")
                header_written = True
            log_fh.write(f"{step}\t" + "\t".join(repr(v) for v in parts.values()) + "\n")
            if args.verbose and (step + 1) % 10 == 0:
                print(f"step {step + 1}: total {parts['total']:.4f}", flush=True)

        def on_step(done):
            if done % every == 0 or done == steps:
                save_checkpoint(ckpt_path, training_state(model, opt_state, done))

        try:
            train_steps(model, batches, start, steps, opt_state, log, on_step)
        except TrainingError as exc:
            raise CliError(str(exc)) from None
    if start >= steps:
        save_checkpoint(ckpt_path, training_state(model, opt_state, start))
    print(f"trained steps {start}..{steps}; checkpoint {ckpt_path}")
    return 0


# -- model loading -------------------------------------------------------------------------------

def _load_model(args) -> Model:
    path = args.checkpoint
    if not path or not os.path.exists(path):
        raise CliError(f"missing checkpoint {path!r}")
    cfg_path = getattr(args, "config", None) or os.path.join(os.path.dirname(os.path.abspath(path)), CONFIG_NAME)
    if not os.path.exists(cfg_path):
        cfg_path = None
    overrides = dict(parse_override(s) for s in (getattr(args, "set", None) or []))
    cfg = load_config(cfg_path, overrides)
    model = Model(cfg)
    try:
        restore_training_state(model, load_checkpoint(path))
    except (KeyError, ValueError) as exc:
        raise CliError(f"checkpoint does not match the config: {exc}") from None
    return model


def _read_data(path):
    try:
        return simworld.read_dataset(path)
    except FileNotFoundError:
        raise CliError(f"missing dataset {path!r}") from None


def _predict_scenes(model: Model, scenes) -> PredictionFile:
    pf = PredictionFile(model.t_future)
    for i, sc in enumerate(scenes):
        dets = model.infer(model.prepare(sc, with_targets=False))
        pf.scenes[i] = [PredictedObject(b, float(np.clip(s, 0.0, 1.0)), f, h[:, [0, 1, 4]])
                        for b, s, f, h in zip(dets.boxes, dets.scores, dets.future, dets.history)]
    return pf


def oracle_predictions(scenes, t_future) -> PredictionFile:
    """Ground truth written as predictions with score 1."""
    pf = PredictionFile(tuple(t_future))
    for i, sc in enumerate(scenes):
        pf.scenes[i] = [PredictedObject(p.current, 1.0, p.future[:, [0, 1, 4]], p.history[::-1][:, [0, 1, 4]])
                        for p in sc.pedestrians]
    return pf


def _gt_records(scene, grouping=simworld.GroupingConfig()):
    groups = simworld.label_groups(scene.pedestrians, grouping) if scene.pedestrians else []
    out = []
    for p, g in zip(scene.pedestrians, groups):
        count = simworld.points_in_box_count(scene.frames[-1].points, p.current)
        out.append(metrics.GroundTruthObject(p.current, p.future[:, [0, 1, 4]], count, g))
    return out


def evaluate_predictions(pf: PredictionFile, scenes, iou: float = 0.5, bin_size: float = 2.5):
    pairs = []
    for i, sc in enumerate(scenes):
        dets = [metrics.Detection(o.box, o.score, o.future) for o in pf.scenes.get(i, [])]
        pairs.append((dets, _gt_records(sc)))
    return metrics.evaluate(pairs, iou, pf.t_future, bin_size)


# -- eval / predict ------------------------------------------------------------------------------

def cmd_eval(args) -> int:
    scenes = _read_data(args.data)
    if args.predictions:
        pf = read_predictions(args.predictions)
        cfg = _config(args)
    elif args.checkpoint:
        model = _load_model(args)
        cfg = model.cfg
        pf = _predict_scenes(model, scenes)
    else:
        raise CliError("eval needs --checkpoint or --predictions")
    report = evaluate_predictions(pf, scenes, cfg["eval.iou"], cfg["eval.bin_size"])
    text = metrics.format_report(report)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_predict(args) -> int:
    scenes = _read_data(args.data)
    if args.oracle:
        cfg = _config(args)
        pf = oracle_predictions(scenes, cfg["frames.future"])
    else:
        pf = _predict_scenes(_load_model(args), scenes)
    write_predictions(args.out, pf)
    print(f"wrote predictions for {len(scenes)} scenes to {args.out}")
    return 0


# -- render --------------------------------------------------------------------------------------

def cmd_render(args) -> int:
    points, dets, gts = None, [], []
    if args.data:
        scenes = _read_data(args.data)
        if not 0 <= args.scene < len(scenes):
            raise CliError(f"scene index {args.scene} out of range (dataset has {len(scenes)})")
        sc = scenes[args.scene]
        points = sc.frames[-1].points if sc.frames else None
        gts = _gt_records(sc)
    if args.predictions:
        pf = read_predictions(args.predictions)
        if args.scene not in pf.scenes:
            if not args.data:
                raise CliError(f"scene index {args.scene} not in {args.predictions}")
        dets = pf.scenes.get(args.scene, [])
    if not args.data and not args.predictions:
        raise CliError("render needs --data and/or --predictions")
    svg = render_svg(points, dets, gts, half_range=args.range / 2.0, title=f"scene {args.scene}")
    with open(args.out, "w") as fh:
        fh.write(svg)
    print(f"wrote {args.out}")
    return 0


# -- benchmark -----------------------------------------------------------------------------------

STAGES = ("voxelize", "backbone", "trpn", "sti", "nms")


def benchmark(model: Model, scene, runs: int = 30, warmup: int = 3) -> dict:
    """Per-stage wall times in seconds over ``runs`` timed repetitions."""
    from . import sti as sti_mod
    from .nn import no_grad
    from .pillars import voxelize
    times = {k: [] for k in STAGES}
    for r in range(warmup + runs):
        rec = {}
        with no_grad():
            t0 = time.perf_counter()
            pillars = [voxelize(f, model.grid) for f in scene.frames]
            t1 = time.perf_counter()
            batch = model.prepare(scene, with_targets=False)
            batch.pillars = pillars
            t1b = time.perf_counter()
            fmaps = model.features(batch)
            t2 = time.perf_counter()
            pred = model.first_stage(fmaps)
            props = model.proposals(pred)
            t3 = time.perf_counter()
            out = sti_mod.sti_forward(props, fmaps, model.params, model.sti, model.grid) if len(props) else None
            t4 = time.perf_counter()
            if out is not None:
                sti_mod.final_detections(props, out, model.cfg["infer.nms_iou"], model.cfg["infer.max_detections"],
                                         model.sti.normalizer)
            t5 = time.perf_counter()
        rec = {"voxelize": t1 - t0, "backbone": t2 - t1b, "trpn": t3 - t2, "sti": t4 - t3, "nms": t5 - t4}
        if r >= warmup:
            for k, v in rec.items():
                times[k].append(v)
    return times


def cmd_benchmark(args) -> int:
    overrides = {"grid.range": float(args.range)} if args.range else {}
    if args.checkpoint:
        model = _load_model(args)
        if overrides:
            model_cfg = model.cfg.updated(overrides)
            state = model.state_dict()
            model = Model(model_cfg)
            model.load_state_dict(state)
    else:
        model = Model(_config(args, overrides))
    sim = _sim_config(model.cfg)
    from dataclasses import replace
    sim = replace(sim, extent=max(model.grid.range_x / 2 - 1.5, 2.5))
    scene = simworld.simulate_scene(sim, model.cfg["seed"])
    times = benchmark(model, scene, args.runs, args.warmup)
    lines = [f"grid {model.grid.H}x{model.grid.W} runs {args.runs}"]
    for k in STAGES:
        arr = 1e3 * np.array(times[k])
        lines.append(f"{k} median_ms {np.median(arr):.3f} p95_ms {np.percentile(arr, 95):.3f}")
    total = 1e3 * np.sum([times[k] for k in STAGES], axis=0)
    lines.append(f"total median_ms {np.median(total):.3f} p95_ms {np.percentile(total, 95):.3f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


# -- parser --------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pedcast", description="Pedestrian detection and trajectory forecasting.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file of dotted config keys")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("gen-data", help="simulate scenes into a dataset file")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scenes", type=int, default=200)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train the two-stage network")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint or a predictions file")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--predictions")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="write a predictions file")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--oracle", action="store_true", help="write the ground truth as predictions")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("render", help="draw one scene as SVG")
    sp.add_argument("--data")
    sp.add_argument("--predictions")
    sp.add_argument("--scene", type=int, default=0)
    sp.add_argument("--range", type=float, default=40.0, help="canvas side in metres")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("benchmark", help="per-stage inference latency")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--range", type=float, help="grid side in metres")
    sp.add_argument("--runs", type=int, default=30)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, CheckpointError, simworld.DatasetError, OSError) as exc:
        print(f"pedcast {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
