"""Command line runner: ``cellctx {gen,train,eval,ablate,report}``.

Exit codes: 0 success, 1 usage error (bad flags, bad config, refusing to
overwrite), 2 runtime failure (missing data, diverged training, ...).
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .evaluation import load_detections
from .experiment import (ABLATION_AXES, ConfigError, ExperimentConfig, ablation_csv, ablation_markdown,
                         config_from_dict, dump_json, evaluate_detector, evaluate_records, load_config, parse_axis_values, report_markdown,
                         run_ablation, save_training_outputs, split_scenes, train_run, worker_count,
                         write_eval_outputs)
from .synth import SPLITS, export_dataset, generate_dataset, import_dataset
from .train import load_checkpoint

logger = logging.getLogger("cellctx")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, out_required=False):
    p.add_argument("--config", type=Path, help="JSON or YAML experiment config")
    p.add_argument("--seed", type=int, help="override the seed(s) in the config")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cellctx", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate the synthetic dataset")
    _common(p)

    p = sub.add_parser("train", help="train one detector")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory written by 'gen'")

    p = sub.add_parser("eval", help="evaluate a checkpoint or a detections file")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=SPLITS, help="defaults to eval.split of the config")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path, help="checkpoint.json or a run directory")
    src.add_argument("--detections", type=Path, help="COCO-style detections JSON")

    p = sub.add_parser("ablate", help="sweep one axis over seeds")
    _common(p)
    p.add_argument("--axis", choices=ABLATION_AXES, required=True)
    p.add_argument("--values", help="comma separated values (default: the standard sweep)")
    p.add_argument("--data", type=Path, help="dataset directory (default: generate from the config)")

    p = sub.add_parser("report", help="tabulate report.json files as markdown")
    p.add_argument("reports", nargs="+", type=Path, help="report.json files or directories holding one")
    p.add_argument("--out", type=Path, help="write the table here instead of stdout")
    p.add_argument("--force", action="store_true")
    return ap


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg.with_seed(args.seed), seeds=(args.seed,))
    return cfg


def _out_dir(args, cfg: ExperimentConfig, sub: str) -> Path:
    if args.out is not None:
        return args.out
    if cfg.output_dir:
        return Path(cfg.output_dir) / sub
    raise UsageError("no output directory: pass --out or set output_dir in the config")


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} already exists; pass --force to overwrite")


def _load_scenes(data: Path, splits=None):
    if not (data / "annotations.json").is_file():
        raise FileNotFoundError(f"no dataset at {data} (annotations.json missing); run 'cellctx gen' first")
    return import_dataset(data, splits=splits)


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg, "data")
    seed = args.seed if args.seed is not None else cfg.dataset.seed
    if (out / "annotations.json").exists() or (out / "images").exists():
        _guard(out / "annotations.json", args.force)
        shutil.rmtree(out / "images", ignore_errors=True)
    d = cfg.dataset
    scenes = generate_dataset(cfg.synth, d.n_train, d.n_val, d.n_test, seed=seed)
    export_dataset(scenes, out, cfg.synth, seed)
    print(f"wrote {len(scenes)} images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg, "train")
    _guard(out / "checkpoint.json", args.force)
    scenes = _load_scenes(args.data, splits=("train",))
    if not scenes:
        raise ValueError(f"{args.data}: the train split is empty")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.jsonl", "w") as log:
        res = train_run(cfg, scenes, on_step=lambda rec: log.write(json.dumps(rec, sort_keys=True) + "\n"))
    save_training_outputs(res, cfg, out)
    print(f"checkpoint written to {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.checkpoint is not None:
        ck = args.checkpoint / "checkpoint.json" if args.checkpoint.is_dir() else args.checkpoint
        det, extra = load_checkpoint(ck)
        stored = dict(extra.get("config") or {})
        cfg = load_config(args.config) if args.config else config_from_dict(stored)
        cfg = replace(cfg, detector=det.cfg)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    else:
        det = None
        cfg = _config(args)
    split = args.split or cfg.eval.split
    out = _out_dir(args, cfg, f"eval_{split}")
    _guard(out / "report.json", args.force)
    scenes = split_scenes(_load_scenes(args.data), split)
    if not scenes:
        raise ValueError(f"{args.data}: split '{split}' is missing or empty")
    if det is not None:
        result = evaluate_detector(det, cfg, scenes)
    else:
        result = evaluate_records(load_detections(args.detections), cfg, scenes)
    write_eval_outputs(result, out, extra={"split": split, "n_images": len(scenes)})
    r = result.report
    print(f"AP {100 * r.ap:.1f}  AP50 {100 * r.ap50:.1f}  AP75 {100 * r.ap75:.1f}  -> {out / 'report.json'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg, "ablation")
    values = parse_axis_values(args.axis, args.values)
    _guard(out / f"ablation_{args.axis}.csv", args.force)
    if args.data is not None:
        scenes = _load_scenes(args.data)
    else:
        d = cfg.dataset
        scenes = generate_dataset(cfg.synth, d.n_train, d.n_val, d.n_test, seed=d.seed)
    rows = run_ablation(cfg, scenes, args.axis, values, cfg.seeds, workers=worker_count())
    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablation_{args.axis}.csv").write_text(ablation_csv(rows))
    md = ablation_markdown(rows)
    (out / f"ablation_{args.axis}.md").write_text(md)
    (out / "config_resolved.json").write_text(dump_json({**cfg.to_dict(), "code_version": __version__}))
    print(md, end="")
    failed = sum(r["failures"] for r in rows)
    if failed:
        print(f"{failed} cell(s) failed; see the errors column of the CSV", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    docs = {}
    for p in args.reports:
        path = p / "report.json" if p.is_dir() else p
        doc = json.loads(path.read_text())
        if "eval" not in doc:
            raise ValueError(f"{path}: not an evaluation report")
        docs[str(p)] = doc
    md = report_markdown(docs)
    if args.out is None:
        print(md, end="")
    else:
        _guard(args.out, args.force)
        args.out.write_text(md)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"cellctx {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"cellctx {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
