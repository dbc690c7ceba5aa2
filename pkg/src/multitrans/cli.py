"""Command-line surface: generate, train, eval, ablate, attention.

Exit codes: 0 on success, 1 on contract/domain errors, 2 on bad usage.
Configuration files are JSON documents with optional "generate", "model",
and "train" sections; flags override the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .data import GenConfig, generate_dataset, load_dataset, save_dataset
from .errors import MultitransError
from .evaluation import dump_attention, evaluate, write_metrics_csv, write_report_json
from .model import FUSIONS, VARIANTS, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train, write_loss_csv


class UsageError(Exception):
    pass


def _load_config_doc(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def _model_config_for_dataset(doc: dict, dataset, args) -> ModelConfig:
    section = dict(doc.get("model", {}))
    # the dataset dictates the input geometry
    section["num_sensors"] = len(dataset.modalities)
    section["input_dim"] = dataset.train[0].features.shape[2]
    section["num_classes"] = len(dataset.class_names)
    section["modalities"] = list(dataset.modalities)
    if getattr(args, "variant", None):
        section["variant"] = args.variant
    if getattr(args, "fusion", None):
        section["fusion"] = args.fusion
    return ModelConfig.from_dict(section)


def _train_config(doc: dict, args) -> TrainConfig:
    section = dict(doc.get("train", {}))
    if getattr(args, "seed", None) is not None:
        section["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        if args.epochs < 1:
            raise UsageError("--epochs must be at least 1")
        section["epochs"] = args.epochs
    return TrainConfig.from_dict(section)


def _cmd_generate(args) -> int:
    doc = _load_config_doc(args.config)
    section = dict(doc.get("generate", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    cfg = GenConfig.from_dict(section)
    dataset = generate_dataset(cfg)
    out = Path(args.out)
    save_dataset(dataset, out)
    (out / "generate-config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    print(
        f"wrote {len(dataset.train)} train / {len(dataset.test)} test scenes to {out} "
        f"(classes: {', '.join(dataset.class_names)})"
    )
    return 0


def _cmd_train(args) -> int:
    doc = _load_config_doc(args.config)
    dataset = load_dataset(args.data)
    model_cfg = _model_config_for_dataset(doc, dataset, args)
    train_cfg = _train_config(doc, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, history = train(dataset, model_cfg, train_cfg, checkpoint_dir=out)
    save_checkpoint(out / "checkpoint.json", params, model_cfg)
    write_loss_csv(out / "loss.csv", history)
    print(f"trained {model_cfg.variant}-{model_cfg.fusion} for {train_cfg.epochs} epochs; "
          f"final mean loss {history[-1][2]:.6g}")
    return 0


def _cmd_eval(args) -> int:
    params, model_cfg = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    report = evaluate(
        params,
        model_cfg,
        dataset.test,
        class_names=dataset.class_names,
        checkpoint_id=Path(args.checkpoint).name,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_json(out / "report.json", report)
    write_metrics_csv(out / "metrics.csv", report)
    print(f"mAP {report.map_score:.6g} over {len(report.per_class_ap)} classes "
          f"({report.num_test_frames} test frames)")
    if report.excluded_classes:
        print(f"excluded (no positive frames): {', '.join(report.excluded_classes)}")
    return 0


_ABLATION_LABELS = {
    ("baseline", "sum"): "A-1",
    ("baseline", "max"): "A-2",
    ("baseline", "concat"): "A-3",
    ("multitrans", "sum"): "C-1",
    ("multitrans", "max"): "C-2",
    ("multitrans", "concat"): "C-3",
}


def _cmd_ablate(args) -> int:
    doc = _load_config_doc(args.config)
    dataset = load_dataset(args.data)
    train_cfg = _train_config(doc, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in VARIANTS:
        for fusion in FUSIONS:
            label = _ABLATION_LABELS[(variant, fusion)]
            overrides = argparse.Namespace(variant=variant, fusion=fusion)
            model_cfg = _model_config_for_dataset(doc, dataset, overrides)
            params, _ = train(dataset, model_cfg, train_cfg)
            report = evaluate(params, model_cfg, dataset.test, class_names=dataset.class_names)
            rows.append((label, variant, fusion, report))
            print(f"{label}  {variant}-{fusion}: mAP {report.map_score:.6g}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "variant", "fusion", *dataset.class_names, "map"])
        for label, variant, fusion, report in rows:
            aps = [
                f"{report.per_class_ap[name]:.6g}" if name in report.per_class_ap else ""
                for name in dataset.class_names
            ]
            writer.writerow([label, variant, fusion, *aps, f"{report.map_score:.6g}"])
    return 0


def _cmd_attention(args) -> int:
    params, model_cfg = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    clips = {clip.clip_id: clip for clip in dataset.test}
    if args.clip is None:
        clip = dataset.test[0]
    elif args.clip in clips:
        clip = clips[args.clip]
    else:
        raise UsageError(f"clip {args.clip!r} not found in the test split")
    dump = dump_attention(params, model_cfg, clip)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump.write_csv(out / "attention.csv")
    print(f"wrote {len(dump.rows)} attention rows for clip {dump.clip_id}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multitrans",
        description="Weakly-supervised multi-sensor event detection experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train a model and write checkpoint + loss CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--fusion", choices=FUSIONS)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train the A/C variant families and compare")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("attention", help="dump attention weights for one clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clip")
    p.set_defaults(func=_cmd_attention)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except MultitransError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
