"""
Command-line interface for protomargin.

Subcommands::

    protomargin generate   write the synthetic corpus and its manifest
    protomargin train      run the training protocol on the train split
    protomargin eval       write the evaluation report for a checkpoint
    protomargin explain    write case reports and, with --gallery, the prototype gallery
    protomargin compare    paired comparison of two checkpoints on one split

Exit status: 0 when every output was written, 2 for configuration or input errors,
1 for runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from protomargin.checkpoint import CheckpointError, load_checkpoint
from protomargin.config import ConfigError, RunConfig, describe_keys, resolve_config, save_config
from protomargin.dataset import (
    MANIFEST_NAME,
    DatasetError,
    load_samples_by_id,
    manifest_hash,
    read_dataset,
    read_image,
    read_training_samples,
    write_dataset,
)
from protomargin.evaluation import (
    build_records,
    compare_records,
    evaluate,
    write_json,
    write_report,
)
from protomargin.explain import case_report, explain_case, prototype_gallery
from protomargin.protonet import ProtoNet
from protomargin.synthgen import MarginClass, generate_corpus
from protomargin.trainer import Trainer, TrainingDivergedError


logger = logging.getLogger("protomargin.cli")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


# ============================================================================
# Helpers
# ============================================================================


def _manifest_path(config: RunConfig) -> Path:
    return Path(config.data.path) / MANIFEST_NAME


def _load_net(path: str | Path) -> ProtoNet:
    return ProtoNet(load_checkpoint(path).params)


def _checkpoint_arg(args: argparse.Namespace, config: RunConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(config.out) / "final.ckpt"


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.data is not None:
        overrides["data.path"] = args.data
    if args.out is not None:
        overrides["data.path" if args.command == "generate" else "out"] = args.out
    for flag, key in (
        ("lambda_f", "train.lambda_f"),
        ("k", "train.k"),
        ("confounder", "synth.confounder_strength"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return overrides


# ============================================================================
# Commands
# ============================================================================


def cmd_generate(config: RunConfig, args: argparse.Namespace) -> int:
    samples = generate_corpus(config.synth, config.seed)
    manifest = write_dataset(
        samples,
        config.data.path,
        ratios=config.data.split_ratios,
        counts=config.data.split_counts,
        fine_annotated=config.synth.fine_annotated,
    )
    per_class = {c.label: sum(s.y_margin == c for s in samples) for c in MarginClass}
    fine = sum(e.has_fine_mask for e in manifest.split("train"))
    splits = manifest.split_counts()
    print(f"wrote {len(samples)} samples to {manifest.root}")
    print("classes: " + ", ".join(f"{k}={v}" for k, v in per_class.items()))
    print("splits: " + ", ".join(f"{k}={v}" for k, v in splits.items()))
    print(f"fine-annotated training samples: {fine}")
    print(f"manifest sha256: {manifest_hash(manifest.path)}")
    return EXIT_OK


def cmd_train(config: RunConfig, args: argparse.Namespace) -> int:
    manifest = _manifest_path(config)
    samples = read_training_samples(manifest, include_val=config.train.train_on_union)
    out = Path(config.out)
    save_config(config, out / "run_config.json")
    result = Trainer(config.train).run(samples, out, dataset_hash=manifest_hash(manifest))
    print(f"trained on {len(samples)} samples; {len(result.cycles)} A-cycles")
    print(f"final checkpoint: {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> int:
    net = _load_net(_checkpoint_arg(args, config))
    samples = read_dataset(_manifest_path(config), args.split)
    result = evaluate(net, samples, config.eval)
    report_path, _ = write_report(result, Path(config.out) / "eval" / args.split, config.eval.tau)
    margin = result.report["margin_auroc"]["average"]["value"]
    print(f"average margin AUROC: {margin}")
    print(f"report: {report_path}")
    return EXIT_OK


def cmd_explain(config: RunConfig, args: argparse.Namespace) -> int:
    net = _load_net(_checkpoint_arg(args, config))
    out = Path(config.out) / "explain"
    manifest = _manifest_path(config)
    provenance_ids = {p.sample_id for p in net.params.provenance if p is not None}
    sources = {
        sample_id: sample.image
        for sample_id, sample in load_samples_by_id(manifest, provenance_ids).items()
    }

    cases: list[tuple[str, Any]] = []
    if args.image:
        cases = [(Path(p).stem, read_image(p)) for p in args.image]
    elif args.split:
        cases = [(s.sample_id, s.image) for s in read_dataset(manifest, args.split)]
    elif not args.gallery:
        raise ValueError("explain needs --image, --split or --gallery")

    for case_id, image in cases:
        explanation = explain_case(net, image, case_id, sources, config.explain.top_n)
        case_report(explanation, out, config.explain)
    if args.gallery:
        gallery = prototype_gallery(net, sources, out, config.explain)
        print(f"gallery: {gallery.path}")
    print(f"wrote {len(cases)} case reports to {out}")
    return EXIT_OK


def cmd_compare(config: RunConfig, args: argparse.Namespace) -> int:
    samples = read_dataset(_manifest_path(config), args.split)
    records_a = build_records(_load_net(args.checkpoint), samples, config.eval.chunk)
    records_b = build_records(_load_net(args.against), samples, config.eval.chunk)
    comparison = {
        "a": str(args.checkpoint),
        "b": str(args.against),
        "split": args.split,
        "differences": compare_records(records_a, records_b, config.eval),
    }
    path = write_json(comparison, Path(config.out) / "compare" / f"{args.split}.json")
    print(f"comparison: {path}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "compare": cmd_compare,
}


# ============================================================================
# Parser
# ============================================================================


def _config_epilog() -> str:
    lines = ["config keys (dotted JSON in --config; default shown):"]
    for key, default, text in describe_keys():
        lines.append(f"  {key} = {default!r}")
        if text:
            lines.append(f"      {text}")
    lines.append("precedence: defaults < --config file < --preset < individual flags")
    lines.append("environment: PROTO_MARGIN_THREADS caps worker threads (default 1)")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat dotted-key JSON config file")
    common.add_argument("--preset", help="named preset: default, protopnet (k=1, lambda_f=0)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--data", help="dataset directory (data.path)")
    common.add_argument("--out", help="output directory (dataset directory for generate)")
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging level (default INFO)",
    )

    parser = argparse.ArgumentParser(
        prog="protomargin",
        description="Prototype-based mass-margin classification on a synthetic corpus.",
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="write the synthetic corpus")
    gen.add_argument("--confounder", type=float, help="confounder glyph probability")

    train = sub.add_parser("train", parents=[common], help="train a model")
    train.add_argument("--lambda-f", dest="lambda_f", type=float, help="fine-annotation weight")
    train.add_argument("--k", type=int, help="top-k pooling count")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", help="checkpoint file (default <out>/final.ckpt)")
    ev.add_argument("--split", default="test", choices=["train", "val", "test"])

    ex = sub.add_parser("explain", parents=[common], help="write explanation reports")
    ex.add_argument("--checkpoint", help="checkpoint file (default <out>/final.ckpt)")
    target = ex.add_mutually_exclusive_group()
    target.add_argument("--image", action="append", help="grayscale image file (repeatable)")
    target.add_argument("--split", choices=["train", "val", "test"], help="explain a whole split")
    ex.add_argument("--gallery", action="store_true", help="also write the prototype gallery")

    cmp = sub.add_parser("compare", parents=[common], help="compare two checkpoints")
    cmp.add_argument("--checkpoint", required=True, help="baseline checkpoint (a)")
    cmp.add_argument("--against", required=True, help="checkpoint compared with a (b)")
    cmp.add_argument("--split", default="test", choices=["train", "val", "test"])
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = resolve_config(args.config, args.preset, _overrides(args))
        return COMMANDS[args.command](config, args)
    except TrainingDivergedError as exc:
        logger.debug("training diverged", exc_info=True)
        where = f" (last checkpoint: {exc.last_checkpoint})" if exc.last_checkpoint else ""
        print(f"protomargin: error: {exc}{where}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, DatasetError, CheckpointError, ValueError) as exc:
        logger.debug("invalid input", exc_info=True)
        print(f"protomargin: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, RuntimeError, FloatingPointError) as exc:
        logger.debug("command failed", exc_info=True)
        print(f"protomargin: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
