"""Command-line entry point: ``objclust <command> [flags]``.

Exit codes: 0 success, 2 usage or input error, 3 numerical abort during
training, 4 incompatible or corrupted checkpoint.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .exceptions import CheckpointError, ConfigError, NumericalAbort, UndefinedMetricError

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_CHECKPOINT = 0, 2, 3, 4

log = logging.getLogger("objclust")


class UsageError(Exception):
    pass


@dataclass
class CommandResult:
    exit_code: int = EXIT_OK
    artifacts: list = field(default_factory=list)
    summary: str = ""


def _load_split(root, split):
    from .datasets import DatasetManifest, SceneDataset

    if not Path(root).is_dir():
        raise UsageError(f"data directory not found: {root}")
    return SceneDataset.from_manifest(DatasetManifest.load(root, split).validate())


def _load_model(args, model_factory):
    if model_factory is not None:
        return model_factory(args.ckpt)
    from .trainer import load_model

    return load_model(args.ckpt)


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args, model_factory=None):
    from .datasets import generate_multimnist, load_source_digits, sklearn_digits

    if args.mnist_dir == "sklearn":
        images, labels = sklearn_digits()
    else:
        images, labels = load_source_digits(args.mnist_dir)
    manifest = generate_multimnist(images, labels, args.count, args.seed, args.out,
                                   split=args.split, image_size=args.image_size,
                                   max_objects=args.max_objects)
    path = Path(args.out) / f"manifest_{args.split}.json"
    return CommandResult(artifacts=[str(path)],
                         summary=f"wrote {manifest.count} scenes; manifest {path}")


def cmd_train(args, model_factory=None):
    from .config import RunConfig, apply_overrides, load_config
    from .trainer import resume, train

    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    dataset = _load_split(args.data, args.split)
    eval_dataset = _load_split(args.eval_data, args.eval_split) if args.eval_data else None
    state = None
    if args.resume:
        if args.config:
            raise UsageError("--resume takes its config from the checkpoint; use --set to adjust")
        state = resume(args.resume)
        cfg = RunConfig.from_dict(apply_overrides(state.config.to_dict(), args.set))
        state.config = cfg
    else:
        cfg = load_config(args.config, args.set)
    state = train(cfg, dataset, args.out, eval_dataset=eval_dataset, state=state)
    out = Path(args.out)
    return CommandResult(artifacts=[str(out / "metrics.jsonl"), str(out / "report.json")],
                         summary=f"trained to step {state.step}; outputs in {out}")


def cmd_eval(args, model_factory=None):
    from .metrics import evaluate, write_detections

    dataset = _load_split(args.data, args.split)
    model = _load_model(args, model_factory)
    report, dets = evaluate(model, dataset, batch_size=args.batch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    write_detections(out / "detections.jsonl", dataset, dets)
    return CommandResult(artifacts=[str(out / "report.json"), str(out / "detections.jsonl")],
                         summary=f"AP {report.ap:.4f}  ACC {report.acc:.4f}  NMI {report.nmi:.4f}")


def _panel(img):
    arr = np.clip(img.detach().cpu().numpy().transpose(1, 2, 0), 0, 1)
    return (arr * 255).round().astype(np.uint8)


def cmd_manipulate(args, model_factory=None):
    from .datasets import read_image
    from .manipulation import (decompose, deterministic_infer, recompose, render_latents,
                               shuffle_objects, swap_category, vary_local)

    if not Path(args.image).is_file():
        raise UsageError(f"image not found: {args.image}")
    model = _load_model(args, model_factory)
    C = model.cfg.num_clusters
    if args.target_k is not None and not 0 <= args.target_k < C:
        raise UsageError(f"--target-k must lie in [0, {C}), got {args.target_k}")
    if args.noise < 0:
        raise UsageError("--noise must be >= 0")
    x = torch.as_tensor(read_image(args.image))[None]
    if tuple(x.shape[2:]) != tuple(model.image_hw):
        raise UsageError(f"image is {tuple(x.shape[2:])}, model expects {tuple(model.image_hw)}")

    gen = torch.Generator().manual_seed(args.seed)
    grid = deterministic_infer(model, x)
    panels = [x[0], render_latents(model, grid)[0]]
    n_present = int((grid.z_pres >= 0.5).sum())
    if args.mode != "reconstruct":
        if n_present == 0:
            raise UsageError("no objects detected in the image; nothing to manipulate")
        if args.mode == "shuffle":
            edited = shuffle_objects(grid, gen)
        else:
            objs = decompose(grid, model.prior)
            if args.mode == "swap":
                k = args.target_k
                if k is None:
                    k = int(torch.randint(C, (1,), generator=gen))
                objs = swap_category(objs, model.prior, k)
            else:
                objs = vary_local(objs, args.noise, gen)
            edited = recompose(objs, grid)
        panels.append(render_latents(model, edited)[0])

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sep = np.full((x.shape[2], 2, 3), 255, dtype=np.uint8)
    strip = [_panel(panels[0])]
    for p in panels[1:]:
        strip += [sep, _panel(p)]
    Image.fromarray(np.concatenate(strip, axis=1)).save(out)
    return CommandResult(artifacts=[str(out)],
                         summary=f"{args.mode}: {len(panels)} panels, {n_present} objects -> {out}")


def cmd_export_latents(args, model_factory=None):
    from .manipulation import export_latents

    dataset = _load_split(args.data, args.split)
    model = _load_model(args, model_factory)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    n = export_latents(model, dataset, args.out, batch_size=args.batch_size)
    return CommandResult(artifacts=[args.out], summary=f"wrote {n} rows to {args.out}")


def cmd_plot(args, model_factory=None):
    from .manipulation import read_latents
    from .plotting import plot_latent_scatter, plot_training_curves
    from .trainer import read_metrics

    src = args.metrics_log or args.latents
    if not Path(src).is_file():
        raise UsageError(f"input not found: {src}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.metrics_log:
        rows = read_metrics(src)
        if not rows:
            raise UsageError(f"metrics log is empty: {src}")
        if not all("step" in r for r in rows):
            raise UsageError(f"{src}: records lack a 'step' field")
        plot_training_curves(rows, out)
    else:
        _, _, classes, Z = read_latents(src)
        if len(classes) == 0:
            raise UsageError(f"latent export has no rows: {src}")
        plot_latent_scatter(classes, Z, out)
    return CommandResult(artifacts=[str(out)], summary=f"wrote {out}")


# -- parser --------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="objclust", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate multi-digit scenes with box annotations")
    g.add_argument("--mnist-dir", required=True,
                   help="directory with MNIST IDX files or mnist.npz, an .npz file, "
                        "or 'sklearn' for the bundled 8x8 digits")
    g.add_argument("--out", required=True, help="dataset root to write")
    g.add_argument("--count", type=int, default=1000, help="number of scenes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="train", help="split name (default: train)")
    g.add_argument("--image-size", type=int, default=128)
    g.add_argument("--max-objects", type=int, default=10)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="YAML config file (defaults when omitted)")
    t.add_argument("--data", required=True, help="dataset root")
    t.add_argument("--split", default="train")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. model.num_clusters=5 (repeatable)")
    t.add_argument("--eval-data", help="dataset root for periodic evaluation")
    t.add_argument("--eval-split", default="test")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="detection AP and clustering ACC/NMI on annotated data")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True, help="directory for report.json and detections.jsonl")
    e.add_argument("--batch-size", type=int, default=16)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("manipulate", help="edit the latents of one image and re-render it")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--image", required=True, help="input PNG of the model's image size")
    m.add_argument("--mode", required=True, choices=("swap", "vary", "shuffle", "reconstruct"))
    m.add_argument("--target-k", type=int, help="cluster for swap (random when omitted)")
    m.add_argument("--noise", type=float, default=1.0, help="style noise scale for vary")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True, help="output PNG: original | reconstruction | edit")
    m.set_defaults(func=cmd_manipulate)

    x = sub.add_parser("export-latents", help="write appearance codes of correct detections")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--split", default="test")
    x.add_argument("--out", required=True, help="output CSV")
    x.add_argument("--batch-size", type=int, default=16)
    x.set_defaults(func=cmd_export_latents)

    pl = sub.add_parser("plot", help="training curves or a latent scatter as an image file")
    src = pl.add_mutually_exclusive_group(required=True)
    src.add_argument("--metrics-log", help="metrics.jsonl from a training run")
    src.add_argument("--latents", help="CSV from export-latents")
    pl.add_argument("--out", required=True, help="output image path")
    pl.set_defaults(func=cmd_plot)
    return p


def run(argv=None, model_factory=None) -> CommandResult:
    """Parse and execute one command, mapping failures to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return CommandResult(exit_code=int(exc.code or 0))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args, model_factory)
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandResult(EXIT_NUMERICAL, [str(exc.diagnostics_path)], str(exc))
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandResult(EXIT_CHECKPOINT, summary=str(exc))
    except (UsageError, ConfigError, UndefinedMetricError, FileNotFoundError, ValueError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandResult(EXIT_USAGE, summary=str(exc))
    print(result.summary)
    return result


def main(argv=None, model_factory=None) -> int:
    """Console entry point; ``model_factory(ckpt_path)`` replaces checkpoint loading in tests."""
    return run(argv, model_factory).exit_code


if __name__ == "__main__":
    sys.exit(main())
