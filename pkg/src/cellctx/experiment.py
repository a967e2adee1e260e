"""Experiment configuration and the gen / train / eval / ablate pipelines.

A config is one JSON or YAML document with a version number and one flat
section per component::

    version: 1
    dataset:  {n_train: 500, n_val: 100, n_test: 0, seed: 0}
    synth:    {rho: 64.0, delta: 0.08, ...}            # SynthConfig fields
    detector: {strategy: cascade_rram_gram, channels: 32, ...}
    rram:     {c_prime: 16, downsample_op: naive_subsample}
    gram:     {c_double_prime: 16, fpn_level: 1}
    train:    {epochs: 12, lr: 0.01, ...}               # TrainConfig fields
    eval:     {exclude_normal: true, tide: true, split: val}
    seeds:    [0, 1, 2]
    output_dir: runs/cascade          # optional default for --out

Unknown sections or keys raise :class:`ConfigError` naming the key.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .attention import STRATEGIES, GramConfig, RramConfig
from .detector import Detector, DetectorConfig
from .evaluation import (EvalReport, TideReport, coco_ap, save_detections, scenes_to_ground_truth,
                         tide_decompose, write_per_class_csv, write_report)
from .synth import CATEGORY_IDS, LABELS, Scene, SynthConfig
from .train import (TrainConfig, attach_image_head, predict_image_labels, predict_scenes, save_checkpoint,
                    train)

CONFIG_VERSION = 1
ABLATION_AXES = ("downsample_op", "c_prime", "c_double_prime", "fpn_level", "strategy")
DEFAULT_AXIS_VALUES = {
    "downsample_op": ["naive_subsample", "max_pool2", "linear_proj2", "gap"],
    "c_prime": [4, 8, 16, 32],
    "c_double_prime": [4, 8, 16, 32],
    "fpn_level": [1, 2, 3, 4],
    "strategy": [s.value for s in STRATEGIES],
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSection:
    n_train: int = 500
    n_val: int = 100
    n_test: int = 0
    seed: int = 0


@dataclass(frozen=True)
class EvalSection:
    exclude_normal: bool = True
    tide: bool = True
    split: str = "val"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    detector: DetectorConfig = field(default_factory=lambda: DetectorConfig(
        strategy="cascade_rram_gram", rram=RramConfig(c_prime=16), gram=GramConfig(c_double_prime=16)))
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    seeds: tuple = (0, 1, 2)
    output_dir: str | None = None

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, detector=replace(self.detector, seed=seed), train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        det = asdict(self.detector)
        rram, gram = det.pop("rram"), det.pop("gram")
        det["box_stds"] = list(self.detector.box_stds)
        return {"version": CONFIG_VERSION, "dataset": asdict(self.dataset), "synth": asdict(self.synth),
                "detector": det, "rram": rram, "gram": gram, "train": asdict(self.train),
                "eval": asdict(self.eval), "seeds": list(self.seeds), "output_dir": self.output_dir}


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{name}' must be a mapping")
    known = {f.name for f in fields(cls)}
    bad = sorted(set(data) - known)
    if bad:
        raise ConfigError(f"unknown key(s) in section '{name}': {', '.join(bad)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"section '{name}': {e}") from None


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc or {})
    version = doc.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}; expected {CONFIG_VERSION}")
    sections = {"dataset", "synth", "detector", "rram", "gram", "train", "eval", "seeds", "output_dir"}
    bad = sorted(set(doc) - sections)
    if bad:
        raise ConfigError(f"unknown config section(s): {', '.join(bad)}")
    base = ExperimentConfig()
    rram = _section(RramConfig, {**asdict(base.detector.rram), **(doc.get("rram") or {})}, "rram")
    gram = _section(GramConfig, {**asdict(base.detector.gram), **(doc.get("gram") or {})}, "gram")
    det_doc = dict(doc.get("detector") or {})
    for nested in ("rram", "gram"):
        if nested in det_doc:
            raise ConfigError(f"put '{nested}' settings in their own section, not under 'detector'")
    if "box_stds" in det_doc:
        det_doc["box_stds"] = tuple(det_doc["box_stds"])
    det_defaults = {f.name: getattr(base.detector, f.name) for f in fields(DetectorConfig)
                    if f.name not in ("rram", "gram")}
    detector = _section(DetectorConfig, {**det_defaults, **det_doc, "rram": rram, "gram": gram}, "detector")
    seeds = doc.get("seeds", list(base.seeds))
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("'seeds' must be a non-empty list of integers")
    out = doc.get("output_dir")
    if out is not None and not isinstance(out, str):
        raise ConfigError("'output_dir' must be a string")
    return ExperimentConfig(
        dataset=_section(DatasetSection, doc.get("dataset"), "dataset"),
        synth=_section(SynthConfig, doc.get("synth"), "synth"),
        detector=detector,
        train=_section(TrainConfig, doc.get("train"), "train"),
        eval=_section(EvalSection, doc.get("eval"), "eval"),
        seeds=tuple(seeds),
        output_dir=out)


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(doc)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# pipelines

def eval_categories(cfg: ExperimentConfig) -> list[int]:
    names = LABELS[1:] if cfg.eval.exclude_normal else LABELS
    return [CATEGORY_IDS[n] for n in names]


def category_names() -> dict[int, str]:
    return {v: k for k, v in CATEGORY_IDS.items()}


def split_scenes(scenes: list[Scene], split: str) -> list[Scene]:
    return [s for s in scenes if s.split == split]


def train_run(cfg: ExperimentConfig, scenes: list[Scene], on_step=None):
    return train(split_scenes(scenes, "train"), cfg.detector, cfg.train, on_step=on_step)


def finetune_config(cfg: ExperimentConfig) -> TrainConfig:
    """Continued-training schedule: 6 epochs at a tenth of the base rate, x0.1 halfway."""
    return replace(cfg.train, epochs=6, lr=cfg.train.lr / 10, lr_milestones=(0.5,), warmup_iters=0)


def finetune_run(det, cfg: ExperimentConfig, scenes: list[Scene], image_head: bool = True):
    """Continue training a detector; with ``image_head`` a fresh image-level head joins the loss."""
    start = Detector(det.cfg)
    start.load_state_dict(det.state_dict())
    if image_head:
        start = attach_image_head(start)
    return train(split_scenes(scenes, "train"), start.cfg, finetune_config(cfg), detector=start)


@dataclass
class EvalResult:
    report: EvalReport
    tide: TideReport | None
    detections: list
    image_accuracy: float | None = None

    def summary(self) -> dict:
        out = {"ap": self.report.ap, "ap50": self.report.ap50, "ap75": self.report.ap75}
        if self.image_accuracy is not None:
            out["image_accuracy"] = self.image_accuracy
        return out


def evaluate_detector(det, cfg: ExperimentConfig, scenes: list[Scene]) -> EvalResult:
    if not scenes:
        raise ValueError("evaluation split is empty")
    dets = predict_scenes(det, scenes, cfg.train, seed=cfg.train.seed)
    result = evaluate_records(dets, cfg, scenes)
    if det.cfg.image_head:
        pred = predict_image_labels(det, scenes)
        truth = np.array([int(s.is_abnormal) for s in scenes])
        result.image_accuracy = float((pred == truth).mean())
    return result


def evaluate_records(dets: list[dict], cfg: ExperimentConfig, scenes: list[Scene]) -> EvalResult:
    gt = scenes_to_ground_truth(scenes)
    cats = eval_categories(cfg)
    ids = [s.image_id for s in scenes]
    report = coco_ap(dets, gt, categories=cats, image_ids=ids, category_names=category_names())
    tide = tide_decompose(dets, gt, categories=cats) if cfg.eval.tide else None
    return EvalResult(report, tide, dets)


def write_eval_outputs(result: EvalResult, out: Path, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    extra = dict(extra or {})
    if result.image_accuracy is not None:
        extra["image_accuracy"] = result.image_accuracy
    write_report(out / "report.json", result.report, result.tide, extra=extra)
    write_per_class_csv(out / "per_class.csv", result.report)
    save_detections(result.detections, out / "detections.json")


def save_training_outputs(result, cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.detector, out / "checkpoint.json",
                    extra={"code_version": __version__, "config": cfg.to_dict()})
    (out / "config_resolved.json").write_text(dump_json({**cfg.to_dict(), "code_version": __version__}))


# ---------------------------------------------------------------------------
# ablation

def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    det = cfg.detector
    if axis == "downsample_op":
        det = replace(det, rram=replace(det.rram, downsample_op=str(value)))
    elif axis == "c_prime":
        det = replace(det, rram=replace(det.rram, c_prime=int(value)))
    elif axis == "c_double_prime":
        det = replace(det, gram=replace(det.gram, c_double_prime=int(value)))
    elif axis == "fpn_level":
        det = replace(det, gram=replace(det.gram, fpn_level=int(value)))
    elif axis == "strategy":
        det = replace(det, strategy=str(value))
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    return replace(cfg, detector=det)


def parse_axis_values(axis: str, text: str | None) -> list:
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    if not text:
        return list(DEFAULT_AXIS_VALUES[axis])
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if axis in ("c_prime", "c_double_prime", "fpn_level"):
        try:
            return [int(v) for v in vals]
        except ValueError:
            raise ConfigError(f"axis {axis} takes integers, got {text!r}") from None
    return vals


def _ablation_cell(args):
    cfg, scenes, axis, value, seed = args
    try:
        run_cfg = apply_axis(cfg, axis, value).with_seed(seed)
        res = train_run(run_cfg, scenes)
        ev = evaluate_detector(res.detector, run_cfg, split_scenes(scenes, run_cfg.eval.split))
        return {"value": value, "seed": seed, **ev.summary(), "error": None}
    except Exception as e:  # recorded in the table; the sweep continues
        return {"value": value, "seed": seed, "error": f"{type(e).__name__}: {e}"}


def run_ablation(cfg: ExperimentConfig, scenes: list[Scene], axis: str, values: list, seeds,
                 workers: int = 1) -> list[dict]:
    jobs = [(cfg, scenes, axis, v, s) for v in values for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            cells = list(ex.map(_ablation_cell, jobs))
    else:
        cells = [_ablation_cell(j) for j in jobs]
    rows = []
    for v in values:
        mine = [c for c in cells if c["value"] == v]
        ok = [c for c in mine if c["error"] is None]
        row = {"axis": axis, "value": v, "n_seeds": len(ok), "failures": len(mine) - len(ok),
               "errors": "; ".join(c["error"] for c in mine if c["error"])}
        for m in ("ap", "ap50", "ap75"):
            arr = np.array([100 * c[m] for c in ok])
            row[f"{m}_mean"] = float(arr.mean()) if len(arr) else math.nan
            row[f"{m}_std"] = float(arr.std(ddof=0)) if len(arr) else math.nan
        rows.append(row)
    return rows


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    cols = ["axis", "value", "n_seeds", "failures", "ap_mean", "ap_std", "ap50_mean", "ap50_std",
            "ap75_mean", "ap75_std", "errors"]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.2f}" if isinstance(r[k], float) else r[k]) for k in cols})
    return buf.getvalue()


def ablation_markdown(rows: list[dict]) -> str:
    def pm(r, m):
        if r["n_seeds"] == 0:
            return "failed"
        return f"{r[m + '_mean']:.1f} ± {r[m + '_std']:.1f}"
    lines = [f"| {rows[0]['axis'] if rows else 'setting'} | AP | AP50 | AP75 | seeds |",
             "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['value']} | {pm(r, 'ap')} | {pm(r, 'ap50')} | {pm(r, 'ap75')} | {r['n_seeds']} |")
    return "\n".join(lines) + "\n"


def report_markdown(reports: dict[str, dict]) -> str:
    """Markdown table over several report.json documents (values x100)."""
    lines = ["| run | AP | AP50 | AP75 | AP_S | AR | E_Cls | E_Loc | E_Both | E_Dupe | E_Bkg | E_Miss |",
             "|---|---|---|---|---|---|---|---|---|---|---|---|"]

    def f(v):
        return "-" if v is None else f"{100 * v:.1f}"
    for name, doc in reports.items():
        e = doc["eval"]
        t = doc.get("tide") or {}
        lines.append("| " + " | ".join([name, f(e["ap"]), f(e["ap50"]), f(e["ap75"]), f(e["ap_s"]), f(e["ar"])]
                                      + [f(t.get(k)) for k in ("e_cls", "e_loc", "e_both", "e_dupe", "e_bkg",
                                                               "e_miss")]) + " |")
    return "\n".join(lines) + "\n"


def worker_count() -> int:
    raw = os.environ.get("ARTIFACT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"ARTIFACT_THREADS must be an integer, got {raw!r}") from None
