"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad config, missing inputs,
unparseable scenes), 2 runtime failure. ``SCENEMIT_LOG`` sets log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, RunConfig, load_config
from .instructions import load_dataset
from .metrics import evaluate, format_report_table
from .scene import generate_fixture_scene, save_scene
from .training import TrainingDiverged

log = logging.getLogger("scenemit")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config, seed=args.seed)
    if getattr(args, "scenes", None):
        cfg.paths["scenes"] = Path(args.scenes)
    return cfg


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise ValidationError(f"{what} not found: {path}")
    return Path(path)


def cmd_fixtures(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        seed = args.seed + i if args.seed is not None else i
        scene, _ = generate_fixture_scene(seed, args.objects, args.points)
        save_scene(scene, out / f"{scene.scene_id}.{args.format}", "ply-ascii" if args.format == "ply" else "json")
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _config(args)
    scenes_dir = _require(cfg.paths["scenes"], "scenes directory")
    out = Path(args.out) if args.out else cfg.paths["ingest"]
    files = pipeline.scene_files(scenes_dir)
    if not files:
        raise ValidationError(f"no .json/.ply scenes in {scenes_dir}")
    result = pipeline.ingest(files, out)
    for err in result.errors:
        log.error("%s: %s", err["file"], err["error"])
    print(f"ingested {len(result.summaries)} scenes, {len(result.errors)} errors -> {out}")
    return EXIT_INVALID if result.errors else EXIT_OK


def cmd_build_dataset(args) -> int:
    cfg = _config(args)
    if args.out:
        cfg.paths["dataset"] = Path(args.out)
    _require(cfg.paths["ingest"] / "summaries.jsonl", "ingest summaries")
    manifest = pipeline.build(cfg)
    print(pipeline.counts_table(manifest))
    if manifest["truncated"]:
        log.warning("quota not met for: %s", ", ".join(manifest["truncated"]))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    _require(cfg.paths["dataset"] / "manifest.json", "dataset manifest")
    out = Path(args.out) if args.out else cfg.paths["checkpoints"]
    info = pipeline.run_train(cfg, out)
    print(json.dumps(info))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    _require(cfg.paths["dataset"] / "manifest.json", "dataset manifest")
    out = Path(args.out) if args.out else cfg.paths["reports"]
    if args.predictions:
        preds = pipeline.read_predictions(_require(Path(args.predictions), "predictions file"))
        manifest, samples = load_dataset(cfg.paths["dataset"])
        split = args.split or cfg.eval["split"]
        chosen = [s for items in samples.values() for s in items if manifest["splits"].get(s.sample_id) == split]
        report = evaluate(preds, chosen)
        if report.unmatched:
            log.warning("%d predictions match no sample: %s", len(report.unmatched), report.unmatched[:5])
        out.mkdir(parents=True, exist_ok=True)
        doc = report.to_dict()
        doc["split"] = split
        (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        (out / "report.txt").write_text(format_report_table({"scenemit": report}))
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else cfg.paths["checkpoints"] / "merged"
        _require(ckpt / "manifest.json", "checkpoint")
        report = pipeline.run_evaluate(cfg, ckpt, args.split, out)
    print(format_report_table({"scenemit": report}))
    return EXIT_OK


def cmd_report(args) -> int:
    for p in args.reports:
        _require(Path(p), "report")
    table = pipeline.combine_reports([Path(p) for p in args.reports])
    if args.out:
        Path(args.out).write_text(table)
    print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenemit", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-fixtures", parents=[common], help="write synthetic cuboid scenes")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--objects", type=int, default=8)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--format", choices=("json", "ply"), default="json")
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("ingest", parents=[common], help="parse scenes and write attribute/box summaries")
    p.add_argument("--scenes", type=Path)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-dataset", parents=[common], help="generate instruction JSONL and manifest")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", parents=[common], help="train adapters and perceiver")
    p.add_argument("--scenes", type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="decode a split and score it")
    p.add_argument("--scenes", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--split", choices=("train", "val"))
    p.add_argument("--predictions", type=Path, help="score an existing predictions JSONL instead of decoding")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="merge report.json files into one table")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("SCENEMIT_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    if args.command == "generate-fixtures" and args.out is None:
        args.out = Path("scenes")
    try:
        return args.func(args)
    except (ConfigError, ValidationError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except TrainingDiverged as exc:
        log.error("training aborted: %s", exc)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
