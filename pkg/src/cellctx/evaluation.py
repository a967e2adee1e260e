"""COCO-style AP/AR and TIDE-style error attribution.

Detections and ground truth are plain records::

    {"image_id": int, "category_id": int, "bbox": [x, y, w, h], "score": float}   # detection
    {"image_id": int, "category_id": int, "bbox": [x, y, w, h]}                   # ground truth

Score ties are broken by position in the input detection list (earlier
first), everywhere: in the per-image top-k cap, in greedy matching and in
the precision/recall sweep.
"""
from __future__ import annotations

import csv
import json
import math
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boxes import iou_matrix, xywh_to_xyxy

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"all": (0.0, math.inf), "small": (0.0, 32.0 ** 2),
               "medium": (32.0 ** 2, 96.0 ** 2), "large": (96.0 ** 2, math.inf)}
FG_IOU = 0.5
BG_IOU = 0.1
ERROR_TYPES = ("cls", "loc", "both", "dupe", "bkg", "miss")


def _in_range(area: np.ndarray, rng: tuple[float, float]) -> np.ndarray:
    lo, hi = rng
    # buckets are (lo, hi]; "small" includes zero-area boxes
    return ((area > lo) | (lo == 0.0)) & (area <= hi)


def interpolated_ap(tp: np.ndarray, npos: int) -> float:
    """101-point interpolated AP of a ranked TP/FP sequence.

    ``tp`` is already in rank order.  Returns 0 when ``npos`` is 0.
    """
    if npos <= 0:
        return 0.0
    tp = np.asarray(tp, dtype=bool)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    rc = ctp / npos
    pr = ctp / (ctp + cfp)
    # precision envelope: max over all later cutoffs
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    idx = np.searchsorted(rc, RECALL_POINTS, side="left")
    q = np.where(idx < len(pr), pr[np.minimum(idx, len(pr) - 1)], 0.0)
    return _fmean(q)


def _fmean(values) -> float:
    """Correctly rounded mean, so the result does not depend on summation order."""
    values = np.asarray(values, dtype=np.float64).ravel()
    return math.fsum(values) / len(values)


def _group(records, key_fn):
    out = defaultdict(list)
    for i, r in enumerate(records):
        out[key_fn(r)].append(i)
    return out


def _rank(idx: list[int], scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, ties by index."""
    idx = np.asarray(idx, dtype=np.int64)
    return idx[np.lexsort((idx, -scores[idx]))]


@dataclass
class _Prepared:
    det_boxes: np.ndarray
    det_scores: np.ndarray
    det_area: np.ndarray
    gt_boxes: np.ndarray
    gt_area: np.ndarray
    det_by_ic: dict
    gt_by_ic: dict
    categories: list


def _prepare(detections, ground_truth, categories, max_dets) -> _Prepared:
    db = xywh_to_xyxy([d["bbox"] for d in detections]) if detections else np.zeros((0, 4))
    ds = np.array([float(d["score"]) for d in detections], dtype=np.float64)
    gb = xywh_to_xyxy([g["bbox"] for g in ground_truth]) if ground_truth else np.zeros((0, 4))
    det_by_ic = _group(detections, lambda r: (r["image_id"], r["category_id"]))
    det_by_ic = {k: _rank(v, ds)[:max_dets] for k, v in det_by_ic.items()}
    gt_by_ic = {k: np.asarray(v) for k, v in _group(ground_truth, lambda r: (r["image_id"], r["category_id"])).items()}
    if categories is None:
        categories = sorted({g["category_id"] for g in ground_truth} | {d["category_id"] for d in detections})
    return _Prepared(db, ds, (db[:, 2] - db[:, 0]) * (db[:, 3] - db[:, 1]), gb,
                     (gb[:, 2] - gb[:, 0]) * (gb[:, 3] - gb[:, 1]), det_by_ic, gt_by_ic, list(categories))


def match_image(det_boxes: np.ndarray, gt_boxes: np.ndarray, gt_ignore: np.ndarray, thr: float):
    """Greedy matching of ranked detections to GT at one IoU threshold.

    Each detection takes the unmatched GT of highest IoU (>= thr), preferring
    non-ignored GT.  Returns (matched gt index or -1 per det, det matched to ignored GT).
    """
    nd, ng = len(det_boxes), len(gt_boxes)
    match = np.full(nd, -1, dtype=np.int64)
    ign = np.zeros(nd, dtype=bool)
    if nd == 0 or ng == 0:
        return match, ign
    order = np.argsort(gt_ignore, kind="stable")
    ious = iou_matrix(det_boxes, gt_boxes)
    used = np.zeros(ng, dtype=bool)
    for d in range(nd):
        best, m = min(thr, 1 - 1e-10), -1
        for g in order:
            if used[g]:
                continue
            if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                break
            if ious[d, g] < best:
                continue
            best, m = ious[d, g], g
        if m > -1:
            used[m] = True
            match[d] = m
            ign[d] = gt_ignore[m]
    return match, ign


def _class_curve(p: _Prepared, cat: int, image_ids, thr: float, area_rng):
    """(scores, det indices, tp flags) over non-ignored dets, and npos, for one class."""
    scores, didx, tps = [], [], []
    npos = 0
    for img in image_ids:
        d = p.det_by_ic.get((img, cat), np.zeros(0, dtype=np.int64))
        g = p.gt_by_ic.get((img, cat), np.zeros(0, dtype=np.int64))
        g_ign = ~_in_range(p.gt_area[g], area_rng)
        npos += int((~g_ign).sum())
        match, m_ign = match_image(p.det_boxes[d], p.gt_boxes[g], g_ign, thr)
        d_ign = m_ign | ((match < 0) & ~_in_range(p.det_area[d], area_rng))
        keep = ~d_ign
        scores.append(p.det_scores[d][keep])
        didx.append(d[keep])
        tps.append(match[keep] >= 0)
    if scores:
        scores, didx, tps = np.concatenate(scores), np.concatenate(didx), np.concatenate(tps)
    else:
        scores, didx, tps = np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
    order = np.lexsort((didx, -scores))
    return tps[order], npos


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    ap_s: float | None
    ap_m: float | None
    ap_l: float | None
    ar: float
    per_class: dict = field(default_factory=dict)
    categories: list = field(default_factory=list)
    n_images: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def coco_ap(detections: list[dict], ground_truth: list[dict], categories=None, image_ids=None,
            iou_thresholds=IOU_THRESHOLDS, max_dets: int = 100, category_names: dict | None = None) -> EvalReport:
    """COCO-style AP, AP50, AP75, AP by area bucket and AR@max_dets.

    Classes without ground truth in a bucket are skipped for that bucket;
    a bucket with no valid class reports ``None``.  Per-class entries use
    all areas.
    """
    p = _prepare(detections, ground_truth, categories, max_dets)
    if image_ids is None:
        image_ids = sorted({g["image_id"] for g in ground_truth} | {d["image_id"] for d in detections})
    thr = list(iou_thresholds)
    res = {}
    for bucket, rng in AREA_RANGES.items():
        ap = np.full((len(thr), len(p.categories)), np.nan)
        rec = np.full_like(ap, np.nan)
        for k, cat in enumerate(p.categories):
            for t, th in enumerate(thr):
                tps, npos = _class_curve(p, cat, image_ids, th, rng)
                if npos == 0:
                    continue
                ap[t, k] = interpolated_ap(tps, npos)
                rec[t, k] = tps.sum() / npos
        res[bucket] = (ap, rec)
    ap, rec = res["all"]
    valid = ~np.isnan(ap[0])

    def at(t):
        return _fmean(ap[thr.index(t), valid]) if valid.any() and t in thr else None

    def bucket_ap(name):
        a = res[name][0]
        return _fmean(a[~np.isnan(a)]) if (~np.isnan(a)).any() else None

    names = category_names or {}
    per_class = {}
    for k, cat in enumerate(p.categories):
        if not valid[k]:
            continue
        per_class[str(names.get(cat, cat))] = {
            "category_id": int(cat), "ap": _fmean(ap[:, k]),
            "ap50": float(ap[thr.index(0.5), k]) if 0.5 in thr else None,
            "ap75": float(ap[thr.index(0.75), k]) if 0.75 in thr else None,
            "ar": _fmean(rec[:, k])}
    return EvalReport(
        ap=_fmean(ap[:, valid]) if valid.any() else 0.0,
        ap50=at(0.5) if valid.any() else 0.0,
        ap75=at(0.75) if valid.any() else 0.0,
        ap_s=bucket_ap("small"), ap_m=bucket_ap("medium"), ap_l=bucket_ap("large"),
        ar=_fmean(rec[:, valid]) if valid.any() else 0.0,
        per_class=per_class, categories=[int(c) for c in p.categories], n_images=len(image_ids))


# ---------------------------------------------------------------------------
# TIDE-style attribution

@dataclass
class TideReport:
    ap50: float
    e_cls: float
    e_loc: float
    e_both: float
    e_dupe: float
    e_bkg: float
    e_miss: float
    e_fp: float
    e_fn: float
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TideErrors:
    """Per-detection error type (None for true positives) and missed GT indices."""
    det_type: dict
    det_target: dict
    missed: list
    tp: dict
    gt_used: set


def classify_errors(detections, ground_truth, categories=None, max_dets: int = 100,
                    fg: float = FG_IOU, bg: float = BG_IOU) -> tuple[TideErrors, _Prepared]:
    """Assign every unmatched detection one error type and find missed GT.

    Rules per false positive, in order: loc (same class, bg <= IoU < fg),
    cls (another class, IoU >= fg), dupe (same class, IoU >= fg, GT already
    taken), bkg (IoU < bg with every GT), both (the remainder).  The target
    GT of cls/loc is the highest-IoU GT of the relevant class set.
    """
    p = _prepare(detections, ground_truth, categories, max_dets)
    cats = set(p.categories)
    gt_by_img = defaultdict(list)
    for i, g in enumerate(ground_truth):
        gt_by_img[g["image_id"]].append(i)
    tp, used = {}, set()
    for (img, cat), d in p.det_by_ic.items():
        if cat not in cats:
            continue
        g = p.gt_by_ic.get((img, cat), np.zeros(0, dtype=np.int64))
        match, _ = match_image(p.det_boxes[d], p.gt_boxes[g], np.zeros(len(g), dtype=bool), fg)
        for di, m in zip(d, match):
            tp[int(di)] = m >= 0
            if m >= 0:
                used.add(int(g[m]))
    det_type, det_target = {}, {}
    for di, is_tp in tp.items():
        if is_tp:
            continue
        rec = detections[di]
        g = np.asarray(gt_by_img.get(rec["image_id"], []), dtype=np.int64)
        if len(g) == 0:
            det_type[di] = "bkg"
            continue
        ious = iou_matrix(p.det_boxes[di][None], p.gt_boxes[g])[0]
        same = np.array([ground_truth[j]["category_id"] == rec["category_id"] for j in g])
        iou_same = np.where(same, ious, -1.0)
        iou_other = np.where(~same, ious, -1.0)
        if same.any() and bg <= iou_same.max() < fg:
            det_type[di] = "loc"
            det_target[di] = int(g[iou_same.argmax()])
        elif (~same).any() and iou_other.max() >= fg:
            det_type[di] = "cls"
            det_target[di] = int(g[iou_other.argmax()])
        elif same.any() and iou_same.max() >= fg:
            det_type[di] = "dupe"
        elif ious.max() < bg:
            det_type[di] = "bkg"
        else:
            det_type[di] = "both"
    covered = set(det_target.values())
    missed = [i for i, gr in enumerate(ground_truth)
              if gr["category_id"] in cats and i not in used and i not in covered]
    return TideErrors(det_type, det_target, missed, tp, used), p


def _ap50_from_state(p: _Prepared, ground_truth, cats, entries, npos) -> float:
    """Mean AP50 over classes with GT, from explicit (class, score, index, is_tp) entries."""
    by_cat = defaultdict(list)
    for cat, score, idx, is_tp in entries:
        by_cat[cat].append((-score, idx, is_tp))
    aps = []
    for cat in cats:
        if cat not in npos:
            continue
        rows = sorted(by_cat.get(cat, []))
        aps.append(interpolated_ap(np.array([r[2] for r in rows], dtype=bool), npos[cat]))
    return _fmean(aps) if aps else 0.0


def tide_decompose(detections: list[dict], ground_truth: list[dict], categories=None,
                   max_dets: int = 100) -> TideReport:
    """AP50 change from oracle-fixing each error type.

    Fixes: cls and loc become true positives on their target GT when that GT
    is not yet matched (one detection per GT, best score first), otherwise
    they are removed; dupe, bkg and both are removed; miss removes the missed
    GT from the positives.  E_FP removes every false positive and E_FN
    removes every unmatched GT.
    """
    err, p = classify_errors(detections, ground_truth, categories, max_dets)
    cats = list(p.categories)
    cat_set = set(cats)
    npos0 = defaultdict(int)
    for gr in ground_truth:
        if gr["category_id"] in cat_set:
            npos0[gr["category_id"]] += 1
    npos0 = dict(npos0)

    def run(fix: str | None) -> float:
        entries, npos = [], dict(npos0)
        taken = set(err.gt_used)
        # fixes are applied best-score first so a GT is claimed once
        order = sorted(err.tp, key=lambda d: (-p.det_scores[d], d))
        for d in order:
            cat = detections[d]["category_id"]
            if err.tp[d]:
                entries.append((cat, p.det_scores[d], d, True))
                continue
            kind = err.det_type[d]
            if fix == "fp" or kind == fix and kind in ("dupe", "bkg", "both"):
                continue
            if kind == fix and kind in ("cls", "loc"):
                g = err.det_target[d]
                gcat = ground_truth[g]["category_id"]
                if g not in taken and gcat in cat_set:
                    taken.add(g)
                    entries.append((gcat, p.det_scores[d], d, True))
                continue
            entries.append((cat, p.det_scores[d], d, False))
        if fix == "miss":
            for g in err.missed:
                npos[ground_truth[g]["category_id"]] -= 1
        elif fix == "fn":
            for g, gr in enumerate(ground_truth):
                if gr["category_id"] in cat_set and g not in err.gt_used:
                    npos[gr["category_id"]] -= 1
        return _ap50_from_state(p, ground_truth, cats, entries, npos)

    ap0 = run(None)
    delta = {k: run(k) - ap0 for k in ("cls", "loc", "both", "dupe", "bkg", "miss", "fp", "fn")}
    counts = {k: 0 for k in ERROR_TYPES}
    for t in err.det_type.values():
        counts[t] += 1
    counts["miss"] = len(err.missed)
    return TideReport(ap50=ap0, e_cls=delta["cls"], e_loc=delta["loc"], e_both=delta["both"],
                      e_dupe=delta["dupe"], e_bkg=delta["bkg"], e_miss=delta["miss"],
                      e_fp=delta["fp"], e_fn=delta["fn"], counts=counts)


# ---------------------------------------------------------------------------
# files

def scenes_to_ground_truth(scenes) -> list[dict]:
    out = []
    for s in scenes:
        for b, lab in zip(s.boxes, s.labels):
            x1, y1, x2, y2 = (float(v) for v in b)
            out.append({"image_id": s.image_id, "category_id": int(lab), "bbox": [x1, y1, x2 - x1, y2 - y1]})
    return out


def save_detections(detections: list[dict], path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(detections, indent=1))


def load_detections(path: str | os.PathLike) -> list[dict]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise ValueError(f"{path}: expected a JSON list of detections")
    for i, d in enumerate(data):
        for key in ("image_id", "category_id", "bbox", "score"):
            if key not in d:
                raise ValueError(f"{path}: detection [{i}] lacks '{key}'")
        if len(d["bbox"]) != 4:
            raise ValueError(f"{path}: detection [{i}].bbox must have 4 numbers")
    return data


def write_report(path: str | os.PathLike, report: EvalReport, tide: TideReport | None = None,
                 extra: dict | None = None) -> None:
    doc = {"units": "fraction", "eval": report.to_dict()}
    if tide is not None:
        doc["tide"] = tide.to_dict()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_per_class_csv(path: str | os.PathLike, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "category_id", "AP", "AP50", "AP75", "AR"])
        for name, row in report.per_class.items():
            w.writerow([name, row["category_id"]] + [f"{100 * row[k]:.2f}" for k in ("ap", "ap50", "ap75", "ar")])
