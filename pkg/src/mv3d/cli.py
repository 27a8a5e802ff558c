"""Command-line entry point.

Subcommands: synth (write scene files), run (forward a checkpoint over a
scene and dump artifacts), train (stage 1 or 2), check (invariant battery),
eval (geometric metrics CSV). Exit codes: 0 ok, 1 usage, 2 validation,
3 runtime failure. The MV3D_OUT environment variable sets the default
output root.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import fileio
from .aggregation import dump_tokens_csv, select_instances
from .config import ConfigError, RunConfig, config_from_dict, load_config, toy_preset
from .evaluate import evaluate_scene, inference_completions
from .model import Pipeline
from .rng import Stream
from .scene import PlacementError, Scene, SceneSpec, generate_scene, load_scene, \
    save_scene
from .train import DivergenceError, train_stage1, train_stage2, write_loss_csv

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


def _out_root() -> Path:
    return Path(os.environ.get("MV3D_OUT", "."))


def _build_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif getattr(args, "preset", None) == "toy":
        cfg = toy_preset()
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "objects", None) is not None:
        cfg.scene.num_objects = args.objects
    if getattr(args, "views", None) is not None:
        cfg.scene.num_views = args.views
    if getattr(args, "feat_hw", None) is not None:
        cfg.scene.feat_hw = args.feat_hw
    if getattr(args, "token_stride", None) is not None:
        cfg.model.token_stride = args.token_stride
    if getattr(args, "scenes", None) is not None:
        cfg.num_scenes = args.scenes
    if getattr(args, "steps", None) is not None:
        cfg.train.steps = args.steps
    if getattr(args, "batch", None) is not None:
        cfg.train.batch = args.batch
    if getattr(args, "lr", None) is not None:
        cfg.train.lr = args.lr
    if getattr(args, "mask_ratio", None) is not None:
        cfg.model.mask_ratio = args.mask_ratio
    return cfg.validate()


def _scene_paths(scene_dir: Path) -> list[Path]:
    manifest = scene_dir / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.json under {scene_dir}")
    doc = json.loads(manifest.read_text(encoding="utf-8"))
    return [scene_dir / name for name in doc["scenes"]]


# ---- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out) if args.out else _out_root() / "scenes"
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(cfg.num_scenes):
        scene = generate_scene(cfg.seed + i, cfg.scene)
        name = f"scene_{i:04d}.json"
        save_scene(scene, out / name)
        names.append(name)
    manifest = {
        "format": "mv3d-manifest", "version": 1, "seed": cfg.seed,
        "scenes": names,
        "spec": {"num_objects": cfg.scene.num_objects,
                 "num_views": cfg.scene.num_views,
                 "feat_hw": cfg.scene.feat_hw},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1),
                                       encoding="utf-8")
    print(f"wrote {len(names)} scenes to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out) if args.out else _out_root() / "run"
    if out.exists() and any(out.iterdir()) and not args.force:
        sys.stderr.write(f"error: output directory {out} exists; use --force\n")
        return EXIT_VALIDATION
    out.mkdir(parents=True, exist_ok=True)
    scene = load_scene(args.scene)
    if scene.spec.feat_hw != cfg.scene.feat_hw or \
            scene.spec.num_views != cfg.scene.num_views:
        cfg.scene = scene.spec
        cfg.validate()
    pipeline = Pipeline(cfg)
    if args.checkpoint:
        pipeline.store.load(args.checkpoint)

    timings = {}
    t0 = time.time()
    memory, _, outputs = pipeline.forward_instances(scene)
    det = outputs.detached()
    timings["forward_s"] = time.time() - t0

    t0 = time.time()
    tokens = select_instances(det, threshold=cfg.model.conf_threshold)
    for tok in tokens:
        for v in range(len(scene.observation.cameras)):
            mask = det.mask_logits.data[v, tok.probe_index] > 0.0
            fileio.write_pgm(out / f"mask_probe{tok.probe_index:03d}_view{v}.pgm",
                             mask)
    with open(out / "instances.csv", "w", newline="") as f:
        writer = csv.writer(f)
        v_count = len(scene.observation.cameras)
        header = ["probe", "class_logit", "px", "py", "pz"]
        for v in range(v_count):
            header += [f"v{v}_x1", f"v{v}_y1", f"v{v}_x2", f"v{v}_y2"]
        writer.writerow(header)
        for tok in tokens:
            row = [tok.probe_index, repr(tok.logit)] + \
                  [repr(x) for x in tok.point]
            for v in range(v_count):
                row += [repr(x) for x in det.boxes.data[v, tok.probe_index]]
            writer.writerow(row)
    timings["instances_s"] = time.time() - t0

    t0 = time.time()
    stream = Stream(cfg.seed).child("run")
    queries, ctokens = inference_completions(pipeline, scene, memory, det, stream)
    coords = np.array([q.coord for q in queries]).reshape(-1, 3)
    norms = np.array([float(np.linalg.norm(t.feature.data)) for t in ctokens])
    fileio.write_ply(out / "completions.ply", coords, norms)
    token_set = pipeline.aggregator.assemble(tokens, ctokens, scene.truth.p_ee)
    pipeline.consumer.validate(token_set)
    dump_tokens_csv(out / "tokens.csv", token_set)
    timings["completion_s"] = time.time() - t0

    (out / "timing.txt").write_text(
        "".join(f"{k}: {v:.3f}\n" for k, v in timings.items()), encoding="utf-8")
    print(f"artifacts in {out}: {len(tokens)} instances, {len(queries)} queries")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out) if args.out else _out_root() / "train"
    out.mkdir(parents=True, exist_ok=True)
    scenes = [load_scene(p) for p in _scene_paths(Path(args.scenes))]
    if not scenes:
        sys.stderr.write("error: no scenes found\n")
        return EXIT_VALIDATION
    cfg.scene = scenes[0].spec
    cfg.validate()
    pipeline = Pipeline(cfg)
    if args.stage == 1:
        result = train_stage1(pipeline, scenes)
        columns = ["step", "cls", "box", "giou", "mask", "dice", "l1_3d", "total"]
        ckpt = out / "stage1.ckpt"
    else:
        if not args.init:
            sys.stderr.write("error: --stage 2 requires --init with a stage-1 "
                             "checkpoint\n")
            return EXIT_VALIDATION
        pipeline.store.load(args.init)
        result, _teacher = train_stage2(pipeline, scenes)
        columns = ["step", "recon", "cos", "var", "total"]
        ckpt = out / "stage2.ckpt"
    if result.diverged:
        pipeline.store.load_state(result.last_good_state)
        pipeline.store.save(out / "last_good.ckpt")
        sys.stderr.write("error: loss diverged; saved last good checkpoint\n")
        return EXIT_RUNTIME
    pipeline.store.save(ckpt)
    write_loss_csv(out / f"stage{args.stage}_loss.csv", result.history, columns)
    print(f"stage {args.stage} done: total {result.history[-1]['total']:.4f}, "
          f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_all_checks

    cfg = _build_config(args)
    results = run_all_checks(cfg, quick=args.quick)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out) if args.out else _out_root() / "eval"
    out.mkdir(parents=True, exist_ok=True)
    scenes = [load_scene(p) for p in _scene_paths(Path(args.scenes))]
    cfg.scene = scenes[0].spec
    cfg.validate()
    pipeline = Pipeline(cfg)
    if args.checkpoint:
        pipeline.store.load(args.checkpoint)
    rows = []
    for i, scene in enumerate(scenes):
        m = evaluate_scene(pipeline, scene, seed=cfg.seed + i)
        rows.append([i] + m.row())
    with open(out / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scene", "centroid_l1", "mask_iou", "hidden_hit_rate",
                         "distill_cos"])
        for row in rows:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    arr = np.array([r[1:] for r in rows], dtype=float)
    with np.errstate(invalid="ignore"):
        means = np.nanmean(arr, axis=0)
    print("mean centroid_l1 %.4f  mask_iou %.4f  hidden_hit %.4f  cos %.4f"
          % tuple(means))
    return EXIT_OK


def build_parser() -> _Parser:
    p = _Parser(prog="mv3d", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--preset", choices=["toy"], help="named config preset")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("synth", help="generate scene files plus a manifest")
    common(sp)
    sp.add_argument("--scenes", type=int, help="number of scenes")
    sp.add_argument("--objects", type=int)
    sp.add_argument("--views", type=int)
    sp.add_argument("--feat-hw", dest="feat_hw", type=int)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("run", help="forward one scene and dump artifacts")
    common(sp)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--token-stride", dest="token_stride", type=int)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("train", help="run one training stage")
    common(sp)
    sp.add_argument("--stage", type=int, choices=[1, 2], required=True)
    sp.add_argument("--scenes", required=True, help="scene directory")
    sp.add_argument("--init", help="stage-1 checkpoint (stage 2 only)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    sp.add_argument("--token-stride", dest="token_stride", type=int)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("check", help="run the invariant battery")
    common(sp)
    sp.add_argument("--quick", action="store_true")
    sp.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    sp.set_defaults(fn=cmd_check)

    sp = sub.add_parser("eval", help="geometric metrics over scenes")
    common(sp)
    sp.add_argument("--scenes", required=True, help="scene directory")
    sp.add_argument("--checkpoint")
    sp.add_argument("--token-stride", dest="token_stride", type=int)
    sp.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        sys.stderr.write(f"config error: {e}\n")
        return EXIT_VALIDATION
    except (fileio.FileFormatError, FileNotFoundError, PlacementError,
            DivergenceError, KeyError, ValueError) as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
