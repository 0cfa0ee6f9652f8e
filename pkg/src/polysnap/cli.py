"""Command-line entry points: gen-data, train, eval, deform, serve.

All subcommands accept --config (a JSON file with optional "model",
"train", "data" and "service" sections) and --seed.  Exit codes: 0 on
success, 2 on validation/input errors, 3 on numerical aborts.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from . import geometry as geo
from . import reports, trainer
from .geometry import GeometryError
from .model import Model, ModelConfig, desk_config
from .trainer import (CompatibilityError, NumericalAbort, TrainConfig,
                      evaluate, load_checkpoint, train)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def load_config_file(path) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return doc


def model_config_from(doc: dict) -> ModelConfig:
    return ModelConfig.from_json(doc["model"]) if "model" in doc else desk_config()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polysnap",
        description="Polygon-based refinement of instance masks: synthetic data, "
                    "training, evaluation, single-image refinement, annotation service.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="seed override")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--train-instances", type=int, default=2000)
    p.add_argument("--val-instances", type=int, default=200)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--mode", choices=["detection", "annotation"], default="detection")
    p.add_argument("--out", required=True, help="report directory")

    p = sub.add_parser("deform", help="refine mask(s) for one image into polygons")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--mask", action="append", required=True,
                   help="instance mask PNG (repeatable)")
    p.add_argument("--label", action="append", default=None,
                   help="label per mask (repeatable, default 'object')")
    p.add_argument("--mode", choices=["detection", "annotation"], default="annotation")
    p.add_argument("--out", required=True, help="output polygon JSON")
    p.add_argument("--write-masks", help="directory for rasterized refined masks")

    p = sub.add_parser("serve", help="run the interactive annotation HTTP service")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--data-dir", default=None, help="session event-log directory")
    p.add_argument("--ui-dir", default=None, help="static UI bundle directory")
    return parser


def cmd_gen_data(args) -> int:
    doc = load_config_file(args.config)
    cfg = datamod.DatasetConfig.from_json(doc.get("data", {}))
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    manifest = datamod.write_dataset(
        Path(args.out), cfg, seed,
        splits={"train": {"instances": args.train_instances},
                "val": {"instances": args.val_instances}})
    print(json.dumps(manifest["splits"], indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    doc = load_config_file(args.config)
    model_cfg = model_config_from(doc)
    train_doc = dict(doc.get("train", {}))
    if args.seed is not None:
        train_doc["seed"] = args.seed
    if args.epochs is not None:
        train_doc["epochs"] = args.epochs
    train_cfg = TrainConfig.from_json(train_doc)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "model.ckpt"
    result = train(train_cfg, model_cfg, dataset_root=args.data, out_path=ckpt,
                   progress=not args.quiet)
    written = reports.write_train_outputs(out_dir, result.timeline)
    print(f"trained {result.steps} steps -> {ckpt}")
    for w in written:
        print(f"wrote {w}")
    return EXIT_OK


def cmd_eval(args) -> int:
    doc = load_config_file(args.config)
    expected = ModelConfig.from_json(doc["model"]) if "model" in doc else None
    model, _, _ = _load_checked(args.checkpoint, expected)
    records = datamod.load_split(args.data, args.split)
    pair, examples = evaluate(model, records, mode=args.mode, split=args.split)
    written = reports.write_eval_outputs(args.out, pair, examples)
    print(reports.format_eval_table(pair))
    for w in written:
        print(f"wrote {w}")
    return EXIT_OK


def _load_checked(path, expected: ModelConfig | None):
    model, opt, manifest = load_checkpoint(path)
    if expected is not None and expected.hash() != manifest["model_config_hash"]:
        raise CompatibilityError(
            f"checkpoint config {manifest['model_config_hash']} does not match "
            f"requested config {expected.hash()}")
    return model, opt, manifest


def cmd_deform(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    image = geo.load_image_png(args.image)
    masks = [geo.load_mask_png(m) for m in args.mask]
    labels = args.label or []
    labels += ["object"] * (len(masks) - len(labels))
    instances = []
    for mask, label in zip(masks, labels):
        if mask.shape != image.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match image "
                             f"{image.shape[:2]}")
        refined = trainer.refine_mask(model, image, mask, mode=args.mode, label=label)
        if refined is None:
            print(f"warning: mask for '{label}' produced no usable polygons",
                  file=sys.stderr)
            continue
        instances.append(refined)
    geo.save_instances(args.out, instances)
    print(f"wrote {args.out} ({len(instances)} instances)")
    if args.write_masks:
        mask_dir = Path(args.write_masks)
        mask_dir.mkdir(parents=True, exist_ok=True)
        h, w = image.shape[:2]
        for i, inst in enumerate(instances):
            path = mask_dir / f"refined_{i:02d}.png"
            geo.save_mask_png(path, geo.rasterize_mask(inst.polygons, h, w))
            print(f"wrote {path}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import os

    from . import service
    doc = load_config_file(args.config)
    svc = doc.get("service", {})
    env = os.environ
    host = args.host or env.get("POLYSNAP_HOST") or svc.get("host", "127.0.0.1")
    port = args.port if args.port is not None else int(
        env.get("POLYSNAP_PORT") or svc.get("port", 8765))
    data_dir = (args.data_dir or env.get("POLYSNAP_DATA_DIR")
                or svc.get("data_dir", "sessions"))
    ui_dir = args.ui_dir or env.get("POLYSNAP_UI_DIR") or svc.get("ui_dir")
    server = service.AnnotationServer(checkpoint=args.checkpoint, data_dir=data_dir,
                                      ui_dir=ui_dir, host=host, port=port)
    print(f"serving on http://{host}:{server.port}/ (sessions in {data_dir})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
                "deform": cmd_deform, "serve": cmd_serve}
    try:
        return handlers[args.command](args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FloatingPointError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, OSError, GeometryError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
