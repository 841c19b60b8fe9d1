"""Command-line surface.

Subcommands: gen-scene, train, render, eval, gradcheck.  Every command
prints a JSON summary to stdout and writes files under --out.  Exit
codes: 0 success, 2 validation failure, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .errors import NumericalAbort, ValidationError


def _cmd_gen_scene(args) -> dict:
    from .scenedata import NoiseConfig, generate_dataset, humanoid4_scene

    if args.preset != "humanoid4":
        raise ValidationError(f"unknown preset {args.preset!r} (available: humanoid4)")
    noise = NoiseConfig(
        boundary_width=args.noise_boundary,
        flip_prob=args.noise_flip,
        blob_count=args.noise_blobs,
    )
    manifest = generate_dataset(
        args.out,
        scene=humanoid4_scene(),
        n_frames=args.frames,
        image_size=args.size,
        labeled=args.labeled,
        seed=args.seed,
        noise=noise,
    )
    return {"manifest": manifest, "frames": args.frames, "labeled": args.labeled}


def _load_train_inputs(args):
    from .losses import LossWeights
    from .scenedata import load_dataset
    from .trainer import TrainConfig

    dataset = load_dataset(args.scene)
    weights = LossWeights()
    if args.config:
        try:
            with open(args.config) as fh:
                obj = json.load(fh)
        except FileNotFoundError:
            raise ValidationError(f"{args.config}: train config not found") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{args.config}: invalid JSON: {exc}") from None
        wobj = obj.pop("loss_weights", None)
        if wobj is not None:
            try:
                weights = LossWeights(**wobj)
            except TypeError as exc:
                raise ValidationError(f"{args.config}: loss_weights: {exc}") from None
        known = set(TrainConfig.__dataclass_fields__)
        bad = set(obj) - known
        if bad:
            raise ValidationError(f"{args.config}: unknown config fields {sorted(bad)}")
        cfg = TrainConfig(**obj)
    else:
        cfg = TrainConfig()
    return dataset, cfg, weights


def _cmd_train(args) -> dict:
    from .trainer import fit

    dataset, cfg, weights = _load_train_inputs(args)
    result = fit(dataset, cfg, weights, args.out)
    return {
        "checkpoint": result["checkpoint"],
        "checkpoints": result["checkpoints"],
        "log": result["log"],
        "iterations": cfg.iterations,
        "seed": cfg.seed,
    }


def _cmd_render(args) -> dict:
    from .images import write_pgm, write_ppm
    from .params import FieldParams
    from .renderer import render_image
    from .scenedata import load_dataset

    dataset = load_dataset(args.scene)
    params = FieldParams.load(args.checkpoint, dataset.scene.skeleton)
    if args.camera not in dataset.cameras:
        raise ValidationError(
            f"unknown camera {args.camera!r}; manifest has {sorted(dataset.cameras)}"
        )
    cam = dataset.cameras[args.camera]
    if not 0 <= args.pose_frame < len(dataset.frames):
        raise ValidationError(
            f"pose-frame {args.pose_frame} outside [0, {len(dataset.frames)})"
        )
    rec = dataset.frames[args.pose_frame]
    rgb, alpha, labels, _ = render_image(
        cam, rec.pose, params, d_samples=args.d_samples, frame_index=rec.index
    )
    os.makedirs(args.out, exist_ok=True)
    stem = f"render_f{args.pose_frame:03d}_{args.camera}"
    paths = {
        "rgb": os.path.join(args.out, stem + "_rgb.ppm"),
        "alpha": os.path.join(args.out, stem + "_alpha.pgm"),
        "labels": os.path.join(args.out, stem + "_labels.pgm"),
    }
    write_ppm(paths["rgb"], rgb)
    write_pgm(paths["alpha"], np.rint(255.0 * np.clip(alpha, 0.0, 1.0)), maxval=255)
    write_pgm(paths["labels"], labels, maxval=dataset.scene.num_classes - 1)
    return {"files": paths, "camera": args.camera, "pose_frame": args.pose_frame}


def _cmd_eval(args) -> dict:
    from .metrics import evaluate
    from .params import FieldParams
    from .scenedata import load_dataset

    dataset = load_dataset(args.scene)
    params = FieldParams.load(args.checkpoint, dataset.scene.skeleton)
    report = evaluate(
        dataset,
        params,
        split=args.split,
        d_samples=args.d_samples,
        frame_stride=args.frame_stride,
        with_consistency=not args.no_consistency,
    )
    obj = report.to_json_obj()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, f"eval_{args.split}.json")
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=1)
            fh.write("\n")
        obj["report_file"] = path
    return obj


def _cmd_gradcheck(args) -> dict:
    from . import gradcheck

    report = gradcheck.run(args.module)
    if not report["ok"]:
        raise NumericalAbort("gradient check failed (see report)")
    return report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semhum")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="write a synthetic scene to disk")
    g.add_argument("--preset", default="humanoid4")
    g.add_argument("--labeled", type=int, default=5, help="frames carrying label maps")
    g.add_argument("--frames", type=int, default=30)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-boundary", type=int, default=1)
    g.add_argument("--noise-flip", type=float, default=0.005)
    g.add_argument("--noise-blobs", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_cmd_gen_scene)

    t = sub.add_parser("train", help="optimize fields on a scene")
    t.add_argument("--scene", required=True, help="path to manifest.json")
    t.add_argument("--config", help="TrainConfig JSON (may embed loss_weights)")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=_cmd_train)

    r = sub.add_parser("render", help="render a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--camera", required=True)
    r.add_argument("--pose-frame", type=int, required=True)
    r.add_argument("--d-samples", type=int, default=128)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=_cmd_render)

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scene", required=True)
    e.add_argument("--split", choices=("train", "heldout"), default="heldout")
    e.add_argument("--d-samples", type=int, default=128)
    e.add_argument("--frame-stride", type=int, default=5)
    e.add_argument("--no-consistency", action="store_true")
    e.add_argument("--out")
    e.set_defaults(fn=_cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument(
        "--module",
        default="all",
        choices=("all", "autodiff", "motionfield", "canonicalfield", "renderer", "losses"),
    )
    c.set_defaults(fn=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(result, indent=1, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
