"""A small two-stage detector hosting the RoI attention modules.

Pipeline: conv backbone with a 4-level top-down pyramid -> proposals (a one-conv RPN
or jittered ground truth) -> bilinear RoI pooling -> attention enhancement
-> double head (FC classifier, conv regressor).  An optional image-level
head classifies the whole image from the finest pyramid level.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import boxes as bx
from .attention import GRAM, RRAM, GramConfig, RoiBatch, RramConfig, Strategy, combine, prepare_global_map
from .nn import Conv2d, LinearMap, Module
from .tensor import (ShapeError, Tensor, bilinear_gather, concat, log_softmax, relu, smooth_l1, softplus,
                     upsample2)

NUM_LEVELS = 4


@dataclass(frozen=True)
class DetectorConfig:
    s: int = 7
    channels: int = 32
    num_classes: int = 3
    strategy: str = "none"
    rram: RramConfig = field(default_factory=RramConfig)
    gram: GramConfig = field(default_factory=GramConfig)
    head_hidden: int = 128
    fpn_top_down: bool = True
    image_head: bool = False
    # loss weights
    rpn_w: float = 1.0
    head_w: float = 2.0
    imgcls_w: float = 0.15
    # anchors and RoI level assignment
    anchor_scale: float = 4.0
    canonical_size: float = 56.0
    # sampling
    rpn_batch: int = 64
    rpn_pos_fraction: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_batch: int = 32
    roi_pos_fraction: float = 0.25
    fg_iou: float = 0.5
    box_stds: tuple = (0.1, 0.1, 0.2, 0.2)
    # proposals and inference
    rpn_nms_iou: float = 0.7
    rpn_top_k: int = 100
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    max_dets: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("s must be >= 1")
        if min(self.rpn_w, self.head_w, self.imgcls_w) < 0:
            raise ValueError("loss weights must be >= 0")
        Strategy(self.strategy)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise KeyError(f"unknown detector config key(s): {', '.join(bad)}")
        if isinstance(d.get("rram"), dict):
            d["rram"] = RramConfig(**d["rram"])
        if isinstance(d.get("gram"), dict):
            d["gram"] = GramConfig(**d["gram"])
        if "box_stds" in d:
            d["box_stds"] = tuple(d["box_stds"])
        return cls(**d)


@dataclass
class Proposal:
    box: np.ndarray
    objectness: float = 1.0


@dataclass
class Detection:
    box: np.ndarray
    class_id: int
    score: float


# ---------------------------------------------------------------------------
# proposals

def gt_jitter_proposals(gt_boxes: np.ndarray, height: int, width: int, rng: np.random.Generator,
                        noise: float = 0.2, n_background: int = 4, copies: int = 1,
                        bg_max_iou: float = 0.3) -> np.ndarray:
    """Ground-truth boxes with each edge moved by up to +-noise of the box size, plus background boxes."""
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    out = []
    for _ in range(copies):
        if len(gt) == 0:
            break
        w = (gt[:, 2] - gt[:, 0])[:, None]
        h = (gt[:, 3] - gt[:, 1])[:, None]
        u = rng.uniform(-noise, noise, size=(len(gt), 4))
        jit = gt + u * np.concatenate([w, h, w, h], axis=1)
        jit = bx.clip_boxes(jit, height, width)
        jit[:, 2] = np.maximum(jit[:, 2], jit[:, 0] + 1.0)
        jit[:, 3] = np.maximum(jit[:, 3], jit[:, 1] + 1.0)
        out.append(jit)
    if len(gt):
        sides = np.sqrt(bx.area(gt))
        lo, hi = 0.8 * sides.min(), 1.2 * sides.max()
    else:
        lo, hi = 0.12 * min(height, width), 0.22 * min(height, width)
    bg = []
    for _ in range(n_background):
        for _ in range(50):
            side = rng.uniform(lo, hi)
            x = rng.uniform(0, width - side)
            y = rng.uniform(0, height - side)
            cand = np.array([[x, y, x + side, y + side]])
            if len(gt) == 0 or bx.iou_matrix(cand, gt).max() < bg_max_iou:
                bg.append(cand[0])
                break
    if bg:
        out.append(np.array(bg))
    return np.concatenate(out, axis=0) if out else np.zeros((0, 4))


def make_anchors(height: int, width: int, anchor_scale: float) -> np.ndarray:
    """One square anchor per pyramid cell, ordered level, row, column."""
    out = []
    for r in range(1, NUM_LEVELS + 1):
        stride = 2 ** (r + 1)
        h, w = math.ceil(height / stride), math.ceil(width / stride)
        cy, cx = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
        half = 0.5 * anchor_scale * stride
        out.append(np.stack([cx - half, cy - half, cx + half, cy + half], axis=-1).reshape(-1, 4))
    return np.concatenate(out, axis=0)


def assign_levels(boxes: np.ndarray, canonical_size: float) -> np.ndarray:
    """Pyramid level per box: clamp(floor(2 + log2(sqrt(wh) / canonical)), 1, 4)."""
    a = np.sqrt(np.maximum(bx.area(boxes), 1e-12))
    return np.clip(np.floor(2 + np.log2(a / canonical_size)), 1, NUM_LEVELS).astype(np.int64)


def roi_sample_coords(box: np.ndarray, s: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Bin-centre sample points (row, col) of an s x s grid in feature-cell coordinates.

    Pixel x maps to cell coordinate x / stride - 0.5 so that cell centres land on integers.
    """
    x1, y1, x2, y2 = box
    t = (np.arange(s) + 0.5) / s
    xs = (x1 + t * (x2 - x1)) / stride - 0.5
    ys = (y1 + t * (y2 - y1)) / stride - 0.5
    return np.meshgrid(ys, xs, indexing="ij")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        return Tensor(0.0)
    lp = log_softmax(logits)
    return -(lp[np.arange(len(labels)), labels].mean())


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    if logits.size == 0:
        return Tensor(0.0)
    return (softplus(logits) - logits * np.asarray(targets, dtype=np.float64)).mean()


class Detector(Module):
    def __init__(self, cfg: DetectorConfig):
        self.cfg = cfg
        # separate streams keep backbone and head weights identical across strategies
        rng, head_rng, attn_rng = (np.random.default_rng([cfg.seed, k]) for k in range(3))
        c = cfg.channels
        self.stem = Conv2d(3, c, 3, rng, stride=2)
        self.blocks = [_Block(Conv2d(c, c, 3, rng, stride=2), Conv2d(c, c, 3, rng)) for _ in range(NUM_LEVELS)]
        if cfg.fpn_top_down:
            fpn_rng = np.random.default_rng([cfg.seed, 4])
            self.lateral = [Conv2d(c, c, 1, fpn_rng) for _ in range(NUM_LEVELS)]
            self.smooth = [Conv2d(c, c, 3, fpn_rng) for _ in range(NUM_LEVELS)]
        self.rpn_conv = Conv2d(c, c, 3, rng)
        self.rpn_obj = Conv2d(c, 1, 1, rng)
        self.rpn_reg = Conv2d(c, 4, 1, rng)
        strategy = Strategy(cfg.strategy)
        self.strategy = strategy
        self.rram = RRAM(c, cfg.rram, attn_rng) if strategy.uses_rram else None
        self.gram = GRAM(c, cfg.gram, attn_rng) if strategy.uses_gram else None
        rng = head_rng
        k = cfg.num_classes
        self.cls_fc1 = LinearMap(cfg.s * cfg.s * c, cfg.head_hidden, rng, bias=True)
        self.cls_fc2 = LinearMap(cfg.head_hidden, k + 1, rng, bias=True)
        self.reg_conv1 = Conv2d(c, c, 3, rng)
        self.reg_conv2 = Conv2d(c, c, 3, rng)
        self.reg_fc = LinearMap(c, 4 * k, rng, bias=True)
        # small initial predictions, as is usual for detector output layers
        for layer, std in ((self.rpn_obj, 0.01), (self.rpn_reg, 0.01), (self.cls_fc2, 0.01), (self.reg_fc, 0.001)):
            layer.weight.data = rng.normal(0.0, std, size=layer.weight.shape)
        if cfg.image_head:
            img_rng = np.random.default_rng([cfg.seed, 3])
            self.img_conv = Conv2d(c, c, 3, img_rng)
            self.img_fc = LinearMap(c, 2, img_rng, bias=True)

    # -- components --------------------------------------------------
    def backbone_forward(self, images) -> list[Tensor]:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.ndim != 4 or x.shape[-1] != 3 or x.shape[1] % 32 or x.shape[2] % 32:
            raise ShapeError(f"images must be B x H x W x 3 with H, W multiples of 32; got {x.shape}")
        x = relu(self.stem(x))
        levels = []
        for block in self.blocks:
            x = block(x)
            levels.append(x)
        if not self.cfg.fpn_top_down:
            return levels
        # top-down pathway: lateral 1x1, add the upsampled coarser level, 3x3 smoothing
        merged = [None] * NUM_LEVELS
        top = None
        for k in reversed(range(NUM_LEVELS)):
            lat = self.lateral[k](levels[k])
            top = lat if top is None else lat + upsample2(top)
            merged[k] = self.smooth[k](top)
        return merged

    def rpn_forward(self, levels: list[Tensor]) -> tuple[Tensor, Tensor]:
        """Objectness logits (B, A) and box deltas (B, A, 4) over all anchors."""
        objs, regs = [], []
        for f in levels:
            t = relu(self.rpn_conv(f))
            b = f.shape[0]
            objs.append(self.rpn_obj(t).reshape(b, -1))
            regs.append(self.rpn_reg(t).reshape(b, -1, 4))
        return concat(objs, axis=1), concat(regs, axis=1)

    def roi_pool(self, levels: list[Tensor], boxes_per_image: list[np.ndarray]) -> list[RoiBatch]:
        s = self.cfg.s
        all_boxes, img_idx = [], []
        for b, boxes in enumerate(boxes_per_image):
            boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
            all_boxes.append(boxes)
            img_idx.append(np.full(len(boxes), b))
        all_boxes = np.concatenate(all_boxes) if all_boxes else np.zeros((0, 4))
        img_idx = np.concatenate(img_idx) if img_idx else np.zeros(0, dtype=np.int64)
        if len(all_boxes) and np.any((all_boxes[:, 2] <= all_boxes[:, 0]) | (all_boxes[:, 3] <= all_boxes[:, 1])):
            raise bx.DegenerateBoxError("roi_pool: degenerate proposal box")
        lv = assign_levels(all_boxes, self.cfg.canonical_size) if len(all_boxes) else np.zeros(0, dtype=np.int64)
        c = levels[0].shape[-1]
        pieces, order = [], []
        for r in range(1, NUM_LEVELS + 1):
            sel = np.flatnonzero(lv == r)
            if len(sel) == 0:
                continue
            stride = 2 ** (r + 1)
            ys = np.empty((len(sel), s, s))
            xs = np.empty((len(sel), s, s))
            for i, k in enumerate(sel):
                ys[i], xs[i] = roi_sample_coords(all_boxes[k], s, stride)
            bidx = np.broadcast_to(img_idx[sel][:, None, None], ys.shape)
            pieces.append(bilinear_gather(levels[r - 1], bidx, ys, xs))
            order.append(sel)
        if pieces:
            feats = concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
            order = np.concatenate(order)
            if not np.array_equal(order, np.arange(len(order))):
                feats = feats[np.argsort(order, kind="stable")]
        else:
            feats = Tensor(np.zeros((0, s, s, c)))
        out, start = [], 0
        for b, boxes in enumerate(boxes_per_image):
            n = len(np.asarray(boxes).reshape(-1, 4))
            out.append(RoiBatch(feats[start:start + n], all_boxes[start:start + n], lv[start:start + n]))
            start += n
        return out

    def enhance(self, rois: list[RoiBatch], levels: list[Tensor]) -> list[RoiBatch]:
        if self.strategy is Strategy.NONE:
            return rois
        out = []
        for b, r in enumerate(rois):
            gmap = None
            if self.gram is not None:
                gmap = prepare_global_map(levels[self.cfg.gram.fpn_level - 1][b], self.cfg.gram)
            out.append(combine(r, gmap, self.rram, self.gram, self.strategy))
        return out

    def double_head_forward(self, features: Tensor) -> tuple[Tensor, Tensor]:
        """Class logits (N, K+1) and class-specific deltas (N, 4K)."""
        n = features.shape[0]
        k = self.cfg.num_classes
        if n == 0:
            return Tensor(np.zeros((0, k + 1))), Tensor(np.zeros((0, 4 * k)))
        h = relu(self.cls_fc1(features.reshape(n, -1)))
        logits = self.cls_fc2(h)
        t = relu(self.reg_conv1(features))
        t = relu(self.reg_conv2(t))
        deltas = self.reg_fc(t.mean(axis=(1, 2)))
        return logits, deltas

    def image_cls_head(self, levels: list[Tensor]) -> Tensor:
        """NILM / ABN logits (B, 2) from the finest pyramid level."""
        if not self.cfg.image_head:
            raise RuntimeError("detector was built without an image head")
        t = relu(self.img_conv(levels[0]))
        return self.img_fc(t.mean(axis=(1, 2)))

    # -- full passes ---------------------------------------------------
    def forward(self, images, proposals: list[np.ndarray]):
        levels = self.backbone_forward(images)
        rois = self.enhance(self.roi_pool(levels, proposals), levels)
        feats = [r.features for r in rois if len(r)]
        feats = concat(feats, axis=0) if feats else Tensor(np.zeros((0, self.cfg.s, self.cfg.s, self.cfg.channels)))
        logits, deltas = self.double_head_forward(feats)
        return levels, rois, logits, deltas

    def losses(self, images, proposals: list[np.ndarray], gt_boxes: list[np.ndarray],
               gt_labels: list[np.ndarray], rng: np.random.Generator,
               image_labels: np.ndarray | None = None) -> dict:
        """Loss components and their weighted ``total`` for one batch.

        Attention sees every proposal of an image; the head losses use a
        sampled subset of at most ``roi_batch`` RoIs per image.
        """
        cfg = self.cfg
        levels, rois, logits, deltas = self.forward(images, proposals)
        b = levels[0].shape[0]
        h, w = levels[0].shape[1] * 4, levels[0].shape[2] * 4
        obj, rdel = self.rpn_forward(levels)
        anchors = make_anchors(h, w, cfg.anchor_scale)
        parts = dict(zip(("rpn_cls", "rpn_reg"), rpn_loss(obj, rdel, anchors, gt_boxes, cfg, rng)))
        rows, labels, props, targets = [], [], [], []
        start = 0
        for i in range(b):
            p = np.asarray(proposals[i], dtype=np.float64).reshape(-1, 4)
            gtb = np.asarray(gt_boxes[i], dtype=np.float64).reshape(-1, 4)
            lab, match = label_proposals(p, gtb, gt_labels[i], cfg.fg_iou)
            keep = sample_indices(lab, cfg.roi_batch, cfg.roi_pos_fraction, rng)
            rows.append(start + keep)
            labels.append(lab[keep])
            props.append(p[keep])
            tgt = np.zeros((len(keep), 4))
            fg = match[keep] >= 0
            tgt[fg] = gtb[match[keep][fg]]
            targets.append(tgt)
            start += len(p)
        rows = np.concatenate(rows).astype(np.int64)
        parts["head_cls"], parts["head_reg"] = head_loss(
            logits[rows], deltas[rows], np.concatenate(props), np.concatenate(labels),
            np.concatenate(targets), cfg.box_stds)
        if cfg.image_head and image_labels is not None:
            parts["imgcls"] = cross_entropy(self.image_cls_head(levels), image_labels)
        parts["total"] = total_loss(parts, cfg)
        return parts


class _Block(Module):
    def __init__(self, down: Conv2d, conv: Conv2d):
        self.down = down
        self.conv = conv

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.conv(relu(self.down(x))))


# ---------------------------------------------------------------------------
# targets and losses

def label_proposals(proposals: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray, fg_iou: float):
    """Class label per proposal (0 = background) and the index of its matched GT (-1 if none)."""
    n = len(proposals)
    if n == 0 or len(gt_boxes) == 0:
        return np.zeros(n, dtype=np.int64), np.full(n, -1, dtype=np.int64)
    ious = bx.iou_matrix(proposals, gt_boxes)
    best = ious.argmax(axis=1)
    fg = ious[np.arange(n), best] >= fg_iou
    labels = np.where(fg, np.asarray(gt_labels)[best], 0).astype(np.int64)
    return labels, np.where(fg, best, -1)


def sample_indices(labels: np.ndarray, batch: int, pos_fraction: float, rng: np.random.Generator,
                   ignore: np.ndarray | None = None) -> np.ndarray:
    pos = np.flatnonzero(labels > 0)
    neg = np.flatnonzero(labels == 0)
    if ignore is not None:
        pos = pos[~ignore[pos]]
        neg = neg[~ignore[neg]]
    n_pos = min(len(pos), int(batch * pos_fraction))
    n_neg = min(len(neg), batch - n_pos)
    if n_pos < len(pos):
        pos = rng.choice(pos, n_pos, replace=False)
    if n_neg < len(neg):
        neg = rng.choice(neg, n_neg, replace=False)
    return np.sort(np.concatenate([pos, neg]).astype(np.int64))


def head_loss(logits: Tensor, deltas: Tensor, proposals: np.ndarray, labels: np.ndarray,
              matched_gt: np.ndarray, box_stds=(0.1, 0.1, 0.2, 0.2)) -> tuple[Tensor, Tensor]:
    """Cross-entropy over all given RoIs; smooth-L1 on class-specific deltas of positives.

    ``matched_gt`` holds the target box per RoI (rows of background RoIs are ignored).
    Both terms are normalised by the number of RoIs.
    """
    n = len(labels)
    if n == 0:
        return Tensor(0.0), Tensor(0.0)
    cls = cross_entropy(logits, labels)
    pos = np.flatnonzero(labels > 0)
    if len(pos) == 0:
        return cls, Tensor(0.0)
    target = bx.encode(proposals[pos], matched_gt[pos]) / np.asarray(box_stds)
    cols = (4 * (labels[pos] - 1))[:, None] + np.arange(4)[None, :]
    pred = deltas[pos[:, None], cols]
    reg = smooth_l1(pred - target, beta=1.0).sum() * (1.0 / n)
    return cls, reg


def rpn_targets(anchors: np.ndarray, gt_boxes: np.ndarray, cfg: DetectorConfig):
    """Anchor labels (1 fg, 0 bg, -1 ignore) and matched GT boxes."""
    a = len(anchors)
    labels = -np.ones(a, dtype=np.int64)
    matched = np.zeros((a, 4))
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, matched
    ious = bx.iou_matrix(anchors, gt_boxes)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(a), best]
    labels[best_iou < cfg.rpn_neg_iou] = 0
    labels[best_iou >= cfg.rpn_pos_iou] = 1
    # every GT keeps its best anchor(s)
    gt_best = ious.max(axis=0)
    for g in range(len(gt_boxes)):
        if gt_best[g] > 0:
            hit = np.flatnonzero(ious[:, g] == gt_best[g])
            labels[hit] = 1
            best[hit] = g
    matched = np.asarray(gt_boxes)[best]
    return labels, matched


def rpn_loss(obj: Tensor, deltas: Tensor, anchors: np.ndarray, gt_boxes_per_image: list[np.ndarray],
             cfg: DetectorConfig, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    b_idx, a_idx, tgt, pos_b, pos_a, pos_t = [], [], [], [], [], []
    for b, gt in enumerate(gt_boxes_per_image):
        labels, matched = rpn_targets(anchors, np.asarray(gt).reshape(-1, 4), cfg)
        keep = sample_indices(np.where(labels < 0, 0, labels), cfg.rpn_batch, cfg.rpn_pos_fraction, rng,
                              ignore=labels < 0)
        b_idx.append(np.full(len(keep), b))
        a_idx.append(keep)
        tgt.append(labels[keep].astype(np.float64))
        p = keep[labels[keep] == 1]
        pos_b.append(np.full(len(p), b))
        pos_a.append(p)
        pos_t.append(bx.encode(anchors[p], matched[p]) if len(p) else np.zeros((0, 4)))
    b_idx, a_idx, tgt = np.concatenate(b_idx), np.concatenate(a_idx), np.concatenate(tgt)
    n = len(a_idx)
    if n == 0:
        return Tensor(0.0), Tensor(0.0)
    cls = bce_with_logits(obj[b_idx, a_idx], tgt)
    pos_b, pos_a, pos_t = np.concatenate(pos_b), np.concatenate(pos_a), np.concatenate(pos_t)
    if len(pos_a) == 0:
        return cls, Tensor(0.0)
    reg = smooth_l1(deltas[pos_b, pos_a] - pos_t, beta=1.0 / 9).sum() * (1.0 / n)
    return cls, reg


def total_loss(parts: dict, cfg: DetectorConfig) -> Tensor:
    total = cfg.rpn_w * (parts["rpn_cls"] + parts["rpn_reg"]) + cfg.head_w * (parts["head_cls"] + parts["head_reg"])
    if "imgcls" in parts:
        total = total + cfg.imgcls_w * parts["imgcls"]
    return total
