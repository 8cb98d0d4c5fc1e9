"""Command line entry point: ``hvc {gen-data,train,gradcheck,propagate,eval}``.

Every command ends with one machine-readable line on stdout (a JSON object;
``eval`` ends with ``J&F_m = <value>``). Exit status is 0 on success, 1 on
invalid input and 2 on numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck as gc
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .exceptions import DegenerateBatch, HVCError, NonFiniteGradient
from .io import atomic_write_text, list_images, load_image_dir, read_image, read_mask, write_mask
from .metrics import evaluate_dataset
from .propagation import run_video
from .synthdata import train_images, write_dataset
from .trainer import HVCTrainer

log = logging.getLogger("hvc")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class NumericFailure(Exception):
    pass


def n_threads():
    raw = os.environ.get("HVC_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"HVC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"HVC_THREADS must be a positive integer, got {raw!r}")
    return n


def summary(**fields):
    print(json.dumps(fields, sort_keys=True))


def _config(args):
    return load_config(args.config, args.set or (), args.seed)


def _out(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args):
    cfg = _config(args)
    out = _out(args, "data")
    write_dataset(out, cfg.data)
    cfg.save(out / "config.yaml")
    summary(command="gen-data", out=str(out), n_train=cfg.data.n_train, n_videos=cfg.data.n_videos)


def _training_images(args, cfg):
    if args.data is None:
        log.info("no --data given: rendering %d synthetic images", cfg.data.n_train)
        return train_images(cfg.data)
    root = Path(args.data)
    if not root.is_dir():
        raise FileNotFoundError(f"--data {root} is not a directory")
    sub = root / "train"
    return load_image_dir(sub if sub.is_dir() else root)


def cmd_train(args):
    cfg = _config(args)
    out = _out(args, "run")
    images = _training_images(args, cfg)
    if args.resume:
        trainer = load_checkpoint(args.resume)
    else:
        trainer = HVCTrainer(cfg.train, cfg.model, cfg.crop)
    cfg.save(out / "config.yaml")
    ckpt = out / "model.hvc"
    try:
        records = trainer.fit(images, log_path=out / "loss.csv", checkpoint_path=ckpt,
                              max_steps=args.max_steps,
                              progress=lambda r: log.info("step %d loss %.5f", r["step"], r["loss"]))
    except (NonFiniteGradient, DegenerateBatch) as exc:
        raise NumericFailure(str(exc)) from exc
    save_checkpoint(ckpt, trainer)
    losses = [r["loss"] for r in records]
    summary(command="train", checkpoint=str(ckpt), steps=trainer.step,
            initial_loss=losses[0] if losses else None, final_loss=losses[-1] if losses else None)


def cmd_gradcheck(args):
    cfg = _config(args)
    results = gc.run_all(cfg.gradcheck.trials)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if args.out:
        out = _out(args, None)
        cfg.save(out / "config.yaml")
        atomic_write_text(out / "gradcheck.txt", "\n".join(r.line() for r in results) + "\n")
    summary(command="gradcheck", passed=not failed, failed=failed,
            max_rel_error={r.name: r.max_rel_error for r in results})
    if failed:
        raise NumericFailure(f"gradient check failed: {', '.join(failed)}")


def _propagate_one(model, frame_dir, first_mask_path, out_dir, prop_cfg):
    paths = list_images(frame_dir)
    if len(paths) < 2:
        raise ValueError(f"{frame_dir}: need at least 2 frames")
    frames = np.stack([read_image(p) for p in paths])
    first = read_mask(first_mask_path)
    hard, _ = run_video(model, frames, first, prop_cfg)
    lines = []
    for t, (p, m) in enumerate(zip(paths, hard)):
        write_mask(out_dir / (p.stem + ".png"), m)
        counts = np.bincount(m.ravel(), minlength=int(first.max()) + 1)
        lines.append(json.dumps({"frame": t, "file": p.stem + ".png",
                                 "counts": {str(k): int(c) for k, c in enumerate(counts)}}))
    atomic_write_text(out_dir / "summary.jsonl", "\n".join(lines) + "\n")
    return len(paths)


def cmd_propagate(args):
    cfg = _config(args)
    out = _out(args, "masks")
    model = load_checkpoint(args.checkpoint).target
    jobs = []
    if args.videos:
        if not args.annotations:
            raise ValueError("--videos needs --annotations (first-frame masks per video)")
        for vdir in sorted(p for p in Path(args.videos).iterdir() if p.is_dir()):
            anns = list_images(Path(args.annotations) / vdir.name)
            if not anns:
                raise FileNotFoundError(f"no first-frame mask for video {vdir.name}")
            jobs.append((vdir, anns[0], out / vdir.name))
    elif args.frames and args.mask:
        jobs.append((Path(args.frames), Path(args.mask), out))
    else:
        raise ValueError("give --frames and --mask, or --videos and --annotations")
    cfg.save(out / "config.yaml")
    workers = n_threads() or 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        counts = list(pool.map(lambda j: _propagate_one(model, *j, cfg.propagation), jobs))
    summary(command="propagate", out=str(out), videos=len(jobs), frames=int(sum(counts)))


def cmd_eval(args):
    cfg = _config(args)
    report = evaluate_dataset(args.pred, args.gt, cfg.eval.tol_frac, cfg.eval.last_fraction)
    for err in report.errors:
        log.warning("%s", err)
    if args.out:
        out = _out(args, None)
        atomic_write_text(out / "report.json", report.to_json())
        cfg.save(out / "config.yaml")
    print(report.to_table())


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hvc", description="Hybrid static-dynamic correspondence learning.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="render the synthetic corpus")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train an encoder")
    s.add_argument("--data", help="image directory (or dataset root holding train/)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--max-steps", type=int, help="stop after this many steps")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("propagate", parents=[common], help="propagate first-frame masks")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--frames", help="directory of one video's frames")
    s.add_argument("--mask", help="first-frame mask for --frames")
    s.add_argument("--videos", help="root with one frame directory per video")
    s.add_argument("--annotations", help="root with one mask directory per video")
    s.set_defaults(func=cmd_propagate)

    s = sub.add_parser("eval", parents=[common], help="score predicted masks")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        threads = n_threads()
        with threadpool_limits(limits=threads):
            args.func(args)
    except NumericFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HVCError, ValueError, TypeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
