"""Command-line entry point: ``festaseg <command> [options]``.

Every command prints its effective configuration as one ``config: {...}``
JSON line first.  Failures print a single ``error[<class>/<kind>]: message``
line to stderr and exit with 2 (invalid input) or 1 (runtime failure).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import io
from .annotations import UNLABELED, count_labeled, rasterize, save_annotations
from .config import RunConfig, experiment_defaults, override, run_config_from_dict
from .crf import mean_field_exact, mean_field_fast
from .errors import FestaSegError, UsageError, ValidationError
from .experiment import markdown_report, report_json, run_experiment
from .metrics import accumulate, format_table, report
from .model import ModelConfig, predict_probs
from .synth import generate_scene, simulate_scribbles
from .trainer import train

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _echo(cfg: RunConfig) -> None:
    print("config: " + json.dumps(cfg.to_dict(), sort_keys=True))


def _load_config(args, base: RunConfig | None = None) -> RunConfig:
    raw = io.load_json(args.config) if args.config else None
    return run_config_from_dict(raw, base)


def _num_classes(cfg: RunConfig, value) -> RunConfig:
    if value is None:
        return cfg
    return override(override(cfg, "scene", num_classes=value), "model", num_classes=value)


def _paths(cfg: RunConfig, **paths) -> RunConfig:
    cfg.paths.update({k: str(v) for k, v in paths.items() if v is not None})
    return cfg


def cmd_synth(args) -> int:
    cfg = _num_classes(_load_config(args), args.num_classes)
    cfg = override(cfg, "scene", seed=args.seed, height=args.height, width=args.width,
                   noise_sigma=args.noise_sigma)
    cfg = override(cfg, "scribble", level=args.level)
    cfg = _paths(cfg, out_image=args.out_image, out_labels=args.out_labels, out_annotations=args.out_annotations)
    _echo(cfg)
    image, dense = generate_scene(cfg.scene)
    io.save_image_png(args.out_image, image)
    io.save_labels_png(args.out_labels, dense)
    if args.out_annotations:
        anns, warnings = simulate_scribbles(dense, cfg.scribble, cfg.scene.num_classes)
        for w in warnings:
            print(f"warning: {w}", file=sys.stderr)
        save_annotations(args.out_annotations, anns)
    return EXIT_OK


def cmd_scribble(args) -> int:
    cfg = _num_classes(_load_config(args), args.num_classes)
    cfg = override(cfg, "scribble", level=args.level, seed=args.seed)
    cfg = _paths(cfg, labels=args.labels, out_annotations=args.out_annotations, out_labels=args.out_labels)
    _echo(cfg)
    dense = io.load_labels_png(args.labels)
    k = cfg.model.num_classes
    if dense.max() >= k:
        raise ValidationError(f"dense labels contain class {dense.max()} but num_classes is {k}")
    anns, warnings = simulate_scribbles(dense, cfg.scribble, k)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    sparse, conflicts = rasterize(anns, *dense.shape, k, cfg.scribble.dilation_radius)
    save_annotations(args.out_annotations, anns)
    io.save_labels_png(args.out_labels, sparse)
    _, total = count_labeled(sparse, k)
    print(f"annotations {len(anns)} labeled_pixels {total} fraction {total / sparse.size:.4f} "
          f"conflicts {conflicts}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _num_classes(_load_config(args), args.num_classes)
    cfg = override(cfg, "train", seed=args.seed, max_steps=args.steps, lr=args.lr,
                   class_weighting=True if args.class_weighting else None)
    cfg = override(cfg, "festa", lam=args.lam)
    cfg = _paths(cfg, image=args.image, labels=args.labels, val_image=args.val_image,
                 val_labels=args.val_labels, out_checkpoint=args.out_checkpoint, out_history=args.out_history)
    if (args.val_image is None) != (args.val_labels is None):
        raise UsageError("--val-image and --val-labels go together")
    _echo(cfg)
    train_set = [(io.load_image_png(args.image), io.load_labels_png(args.labels))]
    val_set = []
    if args.val_image:
        val_set = [(io.load_image_png(args.val_image), io.load_labels_png(args.val_labels))]
    result = train(train_set, val_set, cfg.model, cfg.festa, cfg.train, history_path=args.out_history)
    io.save_checkpoint(args.out_checkpoint, {k: result.weights[k] for k in cfg.model.layer_shapes()})
    step, loss, _, lr = result.history[-1] if result.history else (0, float("nan"), 0, cfg.train.lr)
    print(f"steps {step} final_loss {loss:.6f} lr {lr:.3g}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _paths(_load_config(args), image=args.image, checkpoint=args.checkpoint,
                 out_probs=args.out_probs, out_labels=args.out_labels)
    weights = io.load_checkpoint(args.checkpoint)
    model = ModelConfig.from_weights(weights)
    cfg = _num_classes(cfg, model.num_classes)
    cfg = dataclasses.replace(cfg, model=model)
    _echo(cfg)
    probs = predict_probs(io.load_image_png(args.image), model, weights)
    io.save_probmap(args.out_probs, probs)
    io.save_labels_png(args.out_labels, probs.astype(np.float32).argmax(axis=-1))
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = override(_load_config(args), "crf", w1=args.w1, w2=args.w2, iterations=args.iterations)
    cfg = _paths(cfg, image=args.image, probs=args.probs, out_labels=args.out_labels, out_probs=args.out_probs)
    _echo(cfg)
    probs = io.load_probmap(args.probs).astype(np.float64)
    image = io.load_image_png(args.image)
    fn = mean_field_exact if args.method == "exact" else mean_field_fast
    q = fn(probs, image, cfg.crf)
    io.save_labels_png(args.out_labels, q.argmax(axis=-1))
    if args.out_probs:
        io.save_probmap(args.out_probs, q)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _num_classes(_load_config(args), args.num_classes)
    cfg = _paths(cfg, gt=args.gt, pred=args.pred, out_json=args.out_json)
    _echo(cfg)
    gt = io.load_labels_png(args.gt)
    pred = io.load_labels_png(args.pred)
    if (pred == UNLABELED).any():
        raise ValidationError("prediction must be fully labeled")
    exclude = [int(c) for c in args.exclude.split(",")] if args.exclude else []
    rep = report(accumulate(gt, pred, cfg.model.num_classes, exclude))
    print(format_table(rep))
    if args.out_json:
        io.save_json(args.out_json, rep)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _load_config(args, experiment_defaults())
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    cfg = override(cfg, "experiment", preset=args.preset, seeds=seeds)
    cfg = override(cfg, "train", max_steps=args.steps)
    cfg = _paths(cfg, out_markdown=args.out_markdown, out_json=args.out_json)
    _echo(cfg)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    result = run_experiment(cfg.experiment_config(), log=log)
    md = markdown_report(result)
    print(md, end="")
    if args.out_markdown:
        with open(args.out_markdown, "w") as fh:
            fh.write(md)
    if args.out_json:
        with open(args.out_json, "w") as fh:
            fh.write(report_json(result))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="festaseg", description="Sparse-label segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run configuration")
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate a synthetic scene")
    p.add_argument("--out-image", required=True)
    p.add_argument("--out-labels", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--out-annotations", help="also simulate scribbles and write them as JSON")
    p.add_argument("--level", choices=["point", "line", "polygon"])

    p = add("scribble", cmd_scribble, "simulate sparse annotations from dense labels")
    p.add_argument("--labels", required=True)
    p.add_argument("--out-annotations", required=True)
    p.add_argument("--out-labels", required=True)
    p.add_argument("--level", choices=["point", "line", "polygon"])
    p.add_argument("--seed", type=int)
    p.add_argument("--num-classes", type=int)

    p = add("train", cmd_train, "train a model on sparse labels")
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--val-image")
    p.add_argument("--val-labels")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--out-history", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--class-weighting", action="store_true")
    p.add_argument("--num-classes", type=int)

    p = add("predict", cmd_predict, "predict class probabilities")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-probs", required=True)
    p.add_argument("--out-labels", required=True)

    p = add("refine", cmd_refine, "refine probabilities with the dense CRF")
    p.add_argument("--image", required=True)
    p.add_argument("--probs", required=True)
    p.add_argument("--out-labels", required=True)
    p.add_argument("--out-probs")
    p.add_argument("--w1", type=float)
    p.add_argument("--w2", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--method", choices=["fast", "exact"], default="fast")

    p = add("eval", cmd_eval, "score a prediction against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--exclude", help="comma-separated class ids to ignore")
    p.add_argument("--out-json")
    p.add_argument("--num-classes", type=int)

    p = add("experiment", cmd_experiment, "compare training objectives over seeds")
    p.add_argument("--preset", choices=["point", "line", "polygon"])
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--steps", type=int)
    p.add_argument("--out-markdown")
    p.add_argument("--out-json")
    p.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        print(f"error[validation/{exc.kind}]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error[validation/file]: {exc.strerror}: {exc.filename}", file=sys.stderr)
        return EXIT_VALIDATION
    except FestaSegError as exc:
        print(f"error[runtime/{exc.kind}]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
