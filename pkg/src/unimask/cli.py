"""Command-line entry point: ``unimask <command> ...``.

Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .errors import UnimaskError, ValidationError, WrongTask

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as a single line."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- commands -------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    report = run_suite(range(args.seed, args.seed + args.count), args.size)
    for name, err in sorted(report.worst_by_check().items()):
        print(f"{name:32s} {err:.3e}")
    checked = sum(r.checked for r in report.results)
    skipped = sum(r.skipped for r in report.results)
    print(f"coordinates checked: {checked}, skipped at kinks: {skipped}")
    print(f"max relative error: {report.max_rel_error:.3e} ({'pass' if report.passed else 'FAIL'})")
    return EXIT_OK if report.passed else EXIT_FAILED


def _proposals_by_image(manifest, path):
    items = io.load_proposals(path)
    known = {im.id for im in manifest.images}
    problems = [f"proposals for unknown image {i}" for i, _ in items if i not in known]
    if problems:
        raise ValidationError(problems)
    return items


def cmd_match(args) -> int:
    from .matcher import cost_matrix, match
    from .merge import apply_task_merge

    manifest = io.load_manifest(args.manifest)
    out = []
    for image_id, props in _proposals_by_image(manifest, args.proposals):
        spec = manifest.spec_for(image_id)
        gts = manifest.gts_for(image_id)
        merged = apply_task_merge(props, spec)
        kept = [g for g in gts if not g.ignore]
        costs = cost_matrix(merged, kept, spec) if kept else np.zeros((len(merged.entries), 0))
        asg = match(merged, gts, spec)
        out.append({
            "image_id": image_id,
            "entries": [{"kind": e.kind, "category_id": e.category_id, "members": list(e.members)} for e in merged.entries],
            "cost_matrix": costs,
            "pairs": [list(p) for p in asg.pairs],
            "unmatched_predictions": list(asg.unmatched_predictions),
            "dropped_gts": list(asg.dropped_gts),
            "total_cost": asg.total_cost,
        })
    _emit({"matches": out}, args.out)
    return EXIT_OK


def _infer_one(props, spec, conf_threshold):
    from .postprocess import instance_infer, panoptic_infer, semantic_infer

    if spec.task == "panoptic":
        return panoptic_infer(props, spec, conf_threshold)
    if spec.task == "semantic":
        return semantic_infer(props, spec)
    return instance_infer(props, spec)


def cmd_infer(args) -> int:
    manifest = io.load_manifest(args.manifest)
    anns = []
    for image_id, props in _proposals_by_image(manifest, args.proposals):
        spec = manifest.spec_for(image_id)
        if args.task is not None and args.task != spec.task:
            raise WrongTask(f"image {image_id} belongs to a {spec.task} dataset, not {args.task}")
        output = _infer_one(props, spec, args.conf_threshold)
        anns.extend(io.output_annotations(image_id, output, start_id=len(anns) + 1))
    result = replace(manifest, annotations=tuple(anns))
    io.save_manifest(result, args.out)
    print(f"wrote {len(anns)} segments for {len(manifest.images)} images to {args.out}")
    return EXIT_OK


def cmd_propose(args) -> int:
    from .cotrain.head import forward

    manifest = io.load_manifest(args.manifest)
    head, table = io.load_checkpoint(args.checkpoint)
    items = []
    for im in manifest.images:
        items.append((im.id, forward(head, io.image_features(manifest, im.id), table, manifest.dataset(im.dataset))))
    io.save_proposals(items, args.out)
    print(f"wrote proposals for {len(items)} images to {args.out}")
    return EXIT_OK


def _gather_pairs(pred, gt, metric):
    """Per-image (prediction, truth) pairs for the requested metric."""
    gt_ids = [im.id for im in gt.images]
    pred_ids = {im.id for im in pred.images}
    extra = sorted(pred_ids - set(gt_ids))
    if extra:
        raise ValidationError([f"prediction image {i} is not in the ground truth" for i in extra])
    pairs = []
    for image_id in gt_ids:
        image = gt.image(image_id)
        spec = gt.spec_for(image_id)
        p_anns = pred.annotations_for(image_id) if image_id in pred_ids else []
        g_anns = gt.annotations_for(image_id)
        if metric == "pq":
            pairs.append((
                io.panoptic_from_annotations(p_anns, spec, image.height, image.width),
                io.panoptic_from_annotations(g_anns, spec, image.height, image.width),
            ))
        elif metric == "miou":
            pairs.append((
                io.semantic_from_annotations(p_anns, image.height, image.width),
                io.semantic_from_annotations(g_anns, image.height, image.width),
            ))
        else:
            pairs.append((io.instances_from_annotations(p_anns), [a.gt for a in g_anns]))
    return pairs


def cmd_eval(args) -> int:
    from .metrics import mask_ap, mean_iou, panoptic_quality

    pred, gt = io.load_manifest(args.pred), io.load_manifest(args.gt)
    pairs = _gather_pairs(pred, gt, args.metric)
    if args.metric == "pq":
        cats = sorted({c for d in gt.datasets for c in d.vocabulary})
        things = sorted({c for d in gt.datasets for c in d.thing_categories})
        report = panoptic_quality(pairs, cats, things)
    elif args.metric == "miou":
        report = mean_iou(pairs)
    else:
        report = mask_ap([p for p, _ in pairs], [g for _, g in pairs])
    _emit(report.to_json(), args.out)
    return EXIT_OK


def cmd_gen(args) -> int:
    from .cotrain.synth import default_specs, make_scene

    spec = default_specs()[args.kind]
    images, anns = [], []
    for index in range(args.count):
        scene = make_scene(args.kind, args.seed, index, args.size, spec.name)
        image_id = index + 1
        record = {"kind": args.kind, "seed": args.seed, "index": index, "size": args.size}
        images.append(io.ImageRecord(image_id, scene.height, scene.width, spec.name, {"generator": record}))
        segments = scene.hidden if (args.hidden_masks and scene.hidden) else scene.gt
        for g in segments:
            anns.append(io.Annotation(len(anns) + 1, image_id, g))
    manifest = io.Manifest(io.MANIFEST_VERSION, tuple(images), (spec,), tuple(anns))
    io.save_manifest(manifest, args.out)
    print(f"wrote {args.count} {args.kind} scenes ({len(anns)} segments) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .cotrain.train import evaluate, standard_config, train

    config = io.load_config(args.config) if args.config else standard_config()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    config = replace(config, **overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(config)
    reports = evaluate(result.head, result.table, config)
    io.save_checkpoint(result.head, result.table, out / "checkpoint.bin")
    io.write_json({name: r.to_json() for name, r in reports.items()}, out / "metrics.json")
    io.save_config(config, out / "config.json")
    for name, r in reports.items():
        print(f"{name:20s} {r.metric:6s} {r.overall:.4f}")
    return EXIT_OK


def _output_for(manifest, image_id):
    spec = manifest.spec_for(image_id)
    image = manifest.image(image_id)
    anns = manifest.annotations_for(image_id)
    if spec.task == "panoptic":
        return io.panoptic_from_annotations(anns, spec, image.height, image.width)
    if spec.task == "semantic":
        return io.semantic_from_annotations(anns, image.height, image.width)
    return io.instances_from_annotations(anns)


def cmd_render(args) -> int:
    from .render import render_overlay

    manifest = io.load_manifest(args.result)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = [args.image_id] if args.image_id is not None else [im.id for im in manifest.images]
    for image_id in ids:
        try:
            manifest.image(image_id)
        except KeyError:
            raise ValidationError([f"unknown image id {image_id}"]) from None
        base = io.image_rgb(manifest, image_id)
        if base is None:
            base = io.image_features(manifest, image_id)
        path = render_overlay(base, _output_for(manifest, image_id), out / f"image_{image_id}.png", args.scale)
        print(path)
    return EXIT_OK


def _emit(obj, out):
    text = io.canonical_dumps(obj)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unimask", description="Universal mask-proposal segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    p.add_argument("--seed", type=int, default=0, help="first random seed")
    p.add_argument("--count", type=int, default=20, help="number of seeds")
    p.add_argument("--size", type=int, default=8, help="mask side length")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("match", help="cost matrix and assignment for each image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("infer", help="post-process proposals into task outputs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=("panoptic", "semantic", "instance_box", "instance_mask"))
    p.add_argument("--conf-threshold", type=float, default=0.85, help="panoptic confidence cut")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("propose", help="run a trained head over a manifest's images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_propose)

    p = sub.add_parser("eval", help="metrics between a prediction and a ground-truth manifest")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--metric", required=True, choices=("pq", "miou", "ap"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen", help="write a synthetic dataset manifest")
    p.add_argument("--kind", required=True, choices=("panoptic_shapes", "semantic_shapes", "box_shapes"))
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--hidden-masks", action="store_true", help="box_shapes: emit the true masks instead of boxes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train and evaluate from a config; writes checkpoint and metrics")
    p.add_argument("--config", help="TrainConfig JSON (default: the standard three-dataset setup)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--steps", type=int, help="override the number of steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="overlay PNGs for a result manifest")
    p.add_argument("--result", required=True, help="manifest holding the outputs to draw")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--image-id", type=int)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        for problem in exc.problems:
            print(f"invalid: {problem}", file=sys.stderr)
        return EXIT_FAILED
    except (UnimaskError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
