"""Slow, obviously-correct reference implementations used only by the tests."""
from __future__ import annotations

import math

import numpy as np


def matmul_loop(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def _softmax(x):
    e = np.exp(x - max(x))
    return e / e.sum()


def rram_loop(r, w1, w2, w3, w4, tau):
    """Position-wise RRAM: every (n, i, j) attends to all (m, k, l) with k, l even."""
    n_roi, s, _, c = r.shape
    keys = [(m, k, l) for m in range(n_roi) for k in range(0, s, 2) for l in range(0, s, 2)]
    out = np.zeros_like(r)
    for n in range(n_roi):
        for i in range(s):
            for j in range(s):
                q = r[n, i, j] @ w1
                sims = np.array([q @ (r[m, k, l] @ w2) / tau for m, k, l in keys])
                wts = _softmax(sims)
                z = np.zeros(w3.shape[1])
                for w, (m, k, l) in zip(wts, keys):
                    z += w * (r[m, k, l] @ w3)
                out[n, i, j] = z @ w4 + r[n, i, j]
    return out


def gram_loop(r, g, w1, w2, w3, w4, tau):
    """Position-wise GRAM over the even-index positions of the global map g (h x w x C)."""
    n_roi, s, _, c = r.shape
    h, w = g.shape[:2]
    keys = [g[k, l] for k in range(0, h, 2) for l in range(0, w, 2)]
    out = np.zeros_like(r)
    for n in range(n_roi):
        for i in range(s):
            for j in range(s):
                q = r[n, i, j] @ w1
                wts = _softmax(np.array([q @ (key @ w2) / tau for key in keys]))
                hvec = sum(wt * (key @ w3) for wt, key in zip(wts, keys))
                out[n, i, j] = hvec @ w4 + r[n, i, j]
    return out


def bilinear_point(fmap, y, x):
    """Closed-form bilinear interpolation of an H x W x C map at (y, x)."""
    h, w = fmap.shape[:2]
    y = min(max(y, 0.0), h - 1)
    x = min(max(x, 0.0), w - 1)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    dy, dx = y - y0, x - x0
    return ((1 - dy) * (1 - dx) * fmap[y0, x0] + (1 - dy) * dx * fmap[y0, x1]
            + dy * (1 - dx) * fmap[y1, x0] + dy * dx * fmap[y1, x1])


def box_iou(a, b):
    """IoU of two xyxy boxes by direct area arithmetic."""
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _xyxy(bbox):
    x, y, w, h = bbox
    return (x, y, x + w, y + h)


def _greedy_tp(dets, gts, thr):
    """TP flags for ranked detections of one class (all images); fresh greedy matching."""
    used = set()
    flags = []
    for d in dets:
        best, best_iou = None, thr
        for gi, g in enumerate(gts):
            if g["image_id"] != d["image_id"] or gi in used:
                continue
            v = box_iou(_xyxy(d["bbox"]), _xyxy(g["bbox"]))
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = gi, v
        if best is not None:
            used.add(best)
        flags.append(best is not None)
    return flags


def brute_force_ap(dets, gts, thr):
    """Interpolated AP of one class by recomputing precision/recall at every cutoff.

    Detections are ranked by descending score with ties by list position.
    """
    if not gts:
        return None
    ranked = [d for _, d in sorted(enumerate(dets), key=lambda t: (-t[1]["score"], t[0]))]
    points = []
    for k in range(1, len(ranked) + 1):
        flags = _greedy_tp(ranked[:k], gts, thr)
        tp = sum(flags)
        points.append((tp / len(gts), tp / k))
    samples = []
    for r in np.linspace(0, 1, 101):
        cands = [p for rec, p in points if rec >= r]
        samples.append(max(cands) if cands else 0.0)
    return math.fsum(samples) / 101


def brute_force_map(dets, gts, categories, thresholds):
    """Mean over every (threshold, class with GT) pair; sums are correctly rounded."""
    vals = []
    for t in thresholds:
        for c in categories:
            v = brute_force_ap([d for d in dets if d["category_id"] == c],
                               [g for g in gts if g["category_id"] == c], t)
            if v is not None:
                vals.append(v)
    return math.fsum(vals) / len(vals) if vals else 0.0


def tide_reference(dets, gts, categories, fg=0.5, bg=0.1):
    """From-scratch TIDE-style attribution at AP50.

    Returns a dict of AP50 deltas keyed cls/loc/both/dupe/bkg/miss/fp/fn.
    """
    cats = list(categories)
    ranked = sorted(range(len(dets)), key=lambda i: (-dets[i]["score"], i))
    ranked = [i for i in ranked if dets[i]["category_id"] in cats]
    used, is_tp = set(), {}
    for i in ranked:
        d = dets[i]
        best, best_iou = None, fg
        for gi, g in enumerate(gts):
            if g["image_id"] != d["image_id"] or g["category_id"] != d["category_id"] or gi in used:
                continue
            v = box_iou(_xyxy(d["bbox"]), _xyxy(g["bbox"]))
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = gi, v
        is_tp[i] = best is not None
        if best is not None:
            used.add(best)
    kind, target = {}, {}
    for i in ranked:
        if is_tp[i]:
            continue
        d = dets[i]
        same, other, allv = [], [], []
        for gi, g in enumerate(gts):
            if g["image_id"] != d["image_id"]:
                continue
            v = box_iou(_xyxy(d["bbox"]), _xyxy(g["bbox"]))
            allv.append(v)
            (same if g["category_id"] == d["category_id"] else other).append((v, -gi))
        ms = max(same)[0] if same else -1
        mo = max(other)[0] if other else -1
        if same and bg <= ms < fg:
            kind[i], target[i] = "loc", -max(same)[1]
        elif other and mo >= fg:
            kind[i], target[i] = "cls", -max(other)[1]
        elif same and ms >= fg:
            kind[i] = "dupe"
        elif not allv or max(allv) < bg:
            kind[i] = "bkg"
        else:
            kind[i] = "both"
    missed = [gi for gi, g in enumerate(gts)
              if g["category_id"] in cats and gi not in used and gi not in target.values()]

    def ap50(entries, npos):
        vals = []
        for c in cats:
            if npos.get(c, 0) == 0 and c not in npos:
                continue
            rows = sorted((-s, i, t) for cc, s, i, t in entries if cc == c)
            n = npos[c]
            if n <= 0:
                vals.append(0.0)
                continue
            tp = fp = 0
            pts = []
            for _, _, t in rows:
                tp += t
                fp += not t
                pts.append((tp / n, tp / (tp + fp)))
            samples = []
            for r in np.linspace(0, 1, 101):
                cands = [p for rec, p in pts if rec >= r]
                samples.append(max(cands) if cands else 0.0)
            vals.append(math.fsum(samples) / 101)
        return math.fsum(vals) / len(vals) if vals else 0.0

    npos0 = {}
    for g in gts:
        if g["category_id"] in cats:
            npos0[g["category_id"]] = npos0.get(g["category_id"], 0) + 1

    def evaluate(fix):
        entries, taken, npos = [], set(used), dict(npos0)
        for i in ranked:
            d = dets[i]
            if is_tp[i]:
                entries.append((d["category_id"], d["score"], i, True))
            elif fix == "fp":
                pass
            elif kind[i] == fix and fix in ("cls", "loc"):
                g = target[i]
                if g not in taken and gts[g]["category_id"] in cats:
                    taken.add(g)
                    entries.append((gts[g]["category_id"], d["score"], i, True))
            elif kind[i] == fix:
                pass
            else:
                entries.append((d["category_id"], d["score"], i, False))
        if fix == "miss":
            for g in missed:
                npos[gts[g]["category_id"]] -= 1
        if fix == "fn":
            for gi, g in enumerate(gts):
                if g["category_id"] in cats and gi not in used:
                    npos[g["category_id"]] -= 1
        return ap50(entries, npos)

    base = evaluate(None)
    return {k: evaluate(k) - base for k in ("cls", "loc", "both", "dupe", "bkg", "miss", "fp", "fn")}


def relabel(blobs, shift, rho, delta, theta):
    """Independent context labeler: relative rule first, then global rule."""
    labels = []
    for i, b in enumerate(blobs):
        ratio = b.nucleus_radius / b.cytoplasm_radius
        neigh = []
        for j, o in enumerate(blobs):
            if j == i:
                continue
            dist = math.hypot(b.center[0] - o.center[0], b.center[1] - o.center[1])
            if dist <= rho:
                neigh.append(o.nucleus_radius / o.cytoplasm_radius)
        if neigh and ratio - sum(neigh) / len(neigh) > delta:
            labels.append("abnormal_rel")
        elif b.intensity - shift > theta:
            labels.append("abnormal_glob")
        else:
            labels.append("normal")
    return labels
