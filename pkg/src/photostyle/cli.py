"""Command-line entry point.

Subcommands: validate (dataset integrity), saliency (precompute maps), train,
eval (50-patch test protocol + report files), predict (one image, classes by
descending probability), report (recompute metrics from dumped predictions).

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from photostyle import config as config_mod
from photostyle.config import ConfigError
from photostyle.evaluation import evaluate, load_predictions, predict_image, report_from_predictions
from photostyle.fetch import FetchError
from photostyle.manifest import DatasetManifest, ManifestError, load_manifest
from photostyle.model import CheckpointError, build_model, load_checkpoint
from photostyle.pipeline import load_record_image
from photostyle.report import prediction_lines, render_text, write_report_files
from photostyle.saliency import SaliencyError, center_prior, combine, load_saliency, save_saliency, spectral_residual
from photostyle.taxonomy import TaxonomyError
from photostyle.training import TrainingError, fit
from photostyle.transforms import load_image
from photostyle.validate import validate_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

DATA_ERRORS = (ManifestError, TaxonomyError, FetchError, SaliencyError, FileNotFoundError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="photostyle",
        description="Geometry-aware photographic style classification toolkit.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML/JSON config file")
    common.add_argument(
        "--set",
        metavar="SECTION.KEY=VALUE",
        action="append",
        default=[],
        dest="set_options",
        help="override a single config value (repeatable)",
    )
    common.add_argument("--jobs", type=int, metavar="N", help="worker threads for I/O-bound stages")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("validate", parents=[common], help="check images and saliency maps exist and decode")
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("saliency", parents=[common], help="precompute saliency maps for a manifest")
    p.add_argument("--out", metavar="DIR", help="output directory (default: data.saliency_root)")
    p.set_defaults(handler=cmd_saliency)

    p = sub.add_parser("train", parents=[common], help="fine-tune a model on the manifest's train split")
    p.add_argument("--resume", action="store_true", help="continue from the run directory's last.pt")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="run the averaged-patch test protocol and write reports")
    p.add_argument("--checkpoint", metavar="PATH", help="model checkpoint (default: eval.checkpoint)")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="classify one image, classes by descending probability")
    p.add_argument("image", metavar="IMAGE", help="path to the photograph")
    p.add_argument("--saliency", metavar="PATH", help="precomputed saliency map (derived if omitted)")
    p.add_argument("--checkpoint", metavar="PATH", help="model checkpoint (default: eval.checkpoint)")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("report", parents=[common], help="rebuild report files from dumped predictions")
    p.add_argument("--predictions", metavar="PATH", required=True, help="predictions.jsonl from eval")
    p.add_argument("--out", metavar="DIR", help="output directory (default: eval.out_dir)")
    p.set_defaults(handler=cmd_report)

    return parser


def resolve(args: argparse.Namespace) -> dict:
    sets = list(args.set_options)
    if args.jobs is not None:
        sets.append(f"data.jobs={args.jobs}")
    return config_mod.resolve_config(config_file=args.config, set_options=sets)


def load_dataset(config: dict) -> DatasetManifest:
    manifest_path = config["data"]["manifest"]
    if not manifest_path:
        raise ConfigError("data.manifest is not set (use --config or --set data.manifest=PATH)")
    taxonomy = config_mod.taxonomy_from(config)
    return load_manifest(manifest_path, taxonomy)


def make_map(image: np.ndarray, config: dict) -> np.ndarray:
    """Spectral-residual map, optionally blended with the center prior."""
    section = config["saliency"]
    smap = spectral_residual(
        image,
        working_long_side=section["working_long_side"],
        smooth_sigma=section["smooth_sigma"],
    )
    weight = section["center_prior_weight"]
    if weight and weight > 0:
        prior = center_prior(*smap.shape, sigma_frac=section["center_prior_sigma_frac"])
        smap = combine(smap, prior, weight)
    return smap


def echo_config(config: dict, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        config_mod.serialize_config(config) + "\n", encoding="utf-8"
    )


def cmd_validate(args: argparse.Namespace) -> int:
    config = resolve(args)
    manifest = load_dataset(config)
    report = validate_dataset(
        manifest,
        image_root=config["data"]["image_root"],
        saliency_root=config["data"]["saliency_root"],
        jobs=config["data"]["jobs"],
    )
    print(report.summary())
    for problem in report.problems:
        print(str(problem))
    return EXIT_OK if report.ok else EXIT_DATA


def cmd_saliency(args: argparse.Namespace) -> int:
    config = resolve(args)
    manifest = load_dataset(config)
    out_dir = args.out or config["data"]["saliency_root"]
    if not out_dir:
        raise ConfigError("no output directory: pass --out or set data.saliency_root")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for record in manifest.records:
        image = load_record_image(record, config["data"]["image_root"])
        save_saliency(make_map(image, config), out_dir / f"{record.id}.png")
        count += 1
    print(f"wrote {count} saliency maps to {out_dir}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve(args)
    manifest = load_dataset(config)
    taxonomy = manifest.taxonomy
    model = build_model(config_mod.model_config_from(config, len(taxonomy)))
    train_config = config_mod.train_config_from(config)
    run_dir = Path(config["train"]["checkpoint_dir"])
    echo_config(config, run_dir)
    result = fit(
        model,
        manifest,
        train_config,
        image_root=config["data"]["image_root"],
        saliency_root=config["data"]["saliency_root"],
        checkpoint_dir=run_dir,
        log_path=run_dir / "train_log.jsonl",
        resume=args.resume,
    )
    best = "n/a" if result.best_val_map is None else f"{result.best_val_map:.4f}"
    print(f"trained {result.epochs_run} epochs; best val MAP {best}")
    print(f"checkpoints: {result.best_path}")
    return EXIT_OK


def _checkpoint_path(args: argparse.Namespace, config: dict) -> str:
    path = getattr(args, "checkpoint", None) or config["eval"]["checkpoint"]
    if not path:
        raise ConfigError("no checkpoint: pass --checkpoint or set eval.checkpoint")
    return path


def cmd_eval(args: argparse.Namespace) -> int:
    config = resolve(args)
    manifest = load_dataset(config)
    loaded = load_checkpoint(_checkpoint_path(args, config), taxonomy=manifest.taxonomy)
    eval_config = config_mod.eval_config_from(config)
    report, predictions = evaluate(
        loaded.model,
        manifest,
        eval_config,
        image_root=config["data"]["image_root"],
        saliency_root=config["data"]["saliency_root"],
        config_echo=config,
    )
    out_dir = Path(config["eval"]["out_dir"])
    echo_config(config, out_dir)
    written = write_report_files(
        report, out_dir, predictions=predictions, figures=config["eval"]["figures"]
    )
    print(render_text(report), end="")
    for path in written:
        logger.info("wrote %s", path)
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    config = resolve(args)
    loaded = load_checkpoint(_checkpoint_path(args, config))
    image = load_image(args.image)
    smap = None
    if "saliency" in loaded.model.config.columns:
        smap = load_saliency(args.saliency) if args.saliency else make_map(image, config)
    eval_config = config_mod.eval_config_from(config)
    probs = predict_image(
        loaded.model,
        image,
        smap,
        eval_config.patch_policy,
        patch_size=eval_config.patch_size,
        patch_count=eval_config.patch_count,
        resize_short=eval_config.resize_short,
        rng=np.random.default_rng(eval_config.global_seed),
        whole_map=eval_config.saliency_input == "whole",
        batch_size=eval_config.batch_size,
    )
    for line in prediction_lines(probs, loaded.taxonomy.classes):
        print(line)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    config = resolve(args)
    predictions = load_predictions(args.predictions)
    taxonomy = config_mod.taxonomy_from(config)
    if predictions and len(predictions[0].probabilities) != len(taxonomy):
        raise ManifestError(
            f"predictions have {len(predictions[0].probabilities)} classes but "
            f"taxonomy '{taxonomy.name}' has {len(taxonomy)}"
        )
    report = report_from_predictions(predictions, taxonomy.classes, config)
    out_dir = Path(args.out or config["eval"]["out_dir"])
    write_report_files(report, out_dir, predictions=None, figures=config["eval"]["figures"])
    print(render_text(report), end="")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, CheckpointError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
