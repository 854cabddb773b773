"""Command-line entry point: synthesize | train | eval | segment.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric error.
Common flags: --config FILE, --seed N, --out DIR, --set section.key=value
(repeatable; flags win over EVSEG_* environment variables, which win over the
config file).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as config_mod
from .backbones import load_class_names
from .data import load_dataset, synthesize_dataset
from .errors import (
    ConfigError,
    EventParseError,
    EvsegError,
    InvalidArgumentError,
    InvalidInputError,
    NumericError,
)
from .evaluation import ClassMergeMap, assemble_semantic, evaluate
from .events import read_events
from .serialization import canonical_json, save_blobs
from .train import fit, load_checkpoint


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evseg",
                                     description="Event-camera open-vocabulary segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. train.steps=5")

    p = sub.add_parser("synthesize", help="generate the toy-shapes dataset")
    common(p)

    p = sub.add_parser("train", help="train the event branch by distillation")
    common(p)
    p.add_argument("--data", help="training split directory (default <data_dir>/train)")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate the event branch")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="test split directory (default <data_dir>/test)")
    p.add_argument("--classes", help="query class-name file (default dataset classes)")
    p.add_argument("--merge", help="class merge map (YAML)")
    p.add_argument("--report", help="report path (default <out>/report.json)")

    p = sub.add_parser("segment", help="segment a single event stream")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--events", required=True, help="event file (.evt/.evb)")
    p.add_argument("--classes", required=True, help="query class-name file")
    return parser


def _load_config(args) -> config_mod.ExperimentConfig:
    overrides = {}
    for item in args.set:
        key, value = config_mod.parse_override(item)
        overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    return config_mod.load_config(args.config, overrides)


def _cmd_synthesize(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out or cfg.data_dir)
    manifest = synthesize_dataset(out_dir, cfg.synthesize, cfg.seed)
    print(f"wrote {manifest['sequences']}+{manifest['test_sequences']} sequences to {out_dir}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    data_dir = Path(args.data) if args.data else Path(cfg.data_dir) / "train"
    if not data_dir.exists():
        raise ConfigError(f"training data directory {data_dir} does not exist")
    result = fit(cfg, data_dir=data_dir, out_dir=args.out or cfg.out_dir, resume=args.resume)
    last = result.reports[-1].l_final if result.reports else float("nan")
    print(f"checkpoint: {result.checkpoint_path} (final loss {last:.6g})")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint {ckpt_path} does not exist")
    state = load_checkpoint(ckpt_path)
    data_dir = Path(args.data) if args.data else Path(cfg.data_dir) / "test"
    dataset = load_dataset(data_dir)
    vocabulary = load_class_names(args.classes) if args.classes else list(dataset.class_names)
    merge = None
    merge_file = args.merge or cfg.eval.merge_file
    if merge_file:
        merge = ClassMergeMap.from_file(merge_file)
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    overlay_dir = out_dir / "overlays" if cfg.eval.overlays else None
    report = evaluate(state.event_branch.eval_mode(), state.reconstructor, dataset, vocabulary,
                      state.text_encoder, state.head, templates=state.templates, merge=merge,
                      ignore_label=cfg.eval.ignore_label, overlay_dir=overlay_dir)
    report_path = Path(args.report) if args.report else out_dir / "report.json"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(canonical_json(report.as_dict()) + "\n")
    print(f"mIoU {report.miou:.4f}  accuracy {report.accuracy:.4f}  -> {report_path}")
    return 0


def _cmd_segment(args) -> int:
    cfg = _load_config(args)
    state = load_checkpoint(Path(args.checkpoint))
    stream = read_events(args.events)
    vocabulary = load_class_names(args.classes)
    from .backbones import embed_classes
    class_matrix = embed_classes(state.text_encoder, vocabulary, state.templates)
    recon = state.reconstructor.reconstruct(stream)
    x = torch.from_numpy(np.ascontiguousarray(recon)).to(state.class_matrix.dtype)
    with torch.no_grad():
        out = state.event_branch.eval_mode().forward(x.unsqueeze(0).unsqueeze(0))
        segmap = assemble_semantic(out.masks.sample(0), class_matrix, state.head.temperature,
                                   state.head.no_object, vocabulary)
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.events).stem
    label_path = out_dir / f"{stem}_labels.png"
    Image.fromarray(segmap.hard.astype(np.uint8), mode="L").save(label_path)
    soft_path = out_dir / f"{stem}_soft.blob"
    save_blobs(soft_path, {"soft": segmap.soft, "hard": segmap.hard},
               {"vocabulary": list(vocabulary)})
    print(f"wrote {label_path} and {soft_path}")
    return 0


_COMMANDS = {
    "synthesize": _cmd_synthesize,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "segment": _cmd_segment,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (InvalidArgumentError, InvalidInputError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except (OSError, EventParseError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except EvsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
