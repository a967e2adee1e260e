"""SGD training, inference and checkpoints for :class:`~cellctx.detector.Detector`."""
from __future__ import annotations

import base64
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import boxes as bx
from .detector import Detection, Detector, DetectorConfig, Proposal, gt_jitter_proposals, make_anchors
from .synth import Scene
from .tensor import Tensor, no_grad, sigmoid

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cellctx-checkpoint"
CHECKPOINT_VERSION = 1
PROPOSAL_MODES = ("gt_jitter", "learned_rpn_lite")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_iters: int = 50
    warmup_factor: float = 0.1
    lr_milestones: tuple[float, ...] = (2 / 3, 11 / 12)
    grad_clip: float | None = 10.0
    proposal_mode: str = "gt_jitter"
    jitter_noise: float = 0.2
    n_background: int = 4
    jitter_copies: int = 1
    hflip: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.proposal_mode not in PROPOSAL_MODES:
            raise ValueError(f"proposal_mode must be one of {PROPOSAL_MODES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        object.__setattr__(self, "lr_milestones", tuple(float(m) for m in self.lr_milestones))
        if any(not 0 < m <= 1 for m in self.lr_milestones):
            raise ValueError("lr_milestones are fractions of the run in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise KeyError(f"unknown train config key(s): {', '.join(bad)}")
        return cls(**d)

    def lr_at(self, epoch: int, it: int) -> float:
        """Step schedule: x0.1 at each milestone fraction of the epochs, linear warmup first."""
        lr = self.lr
        for frac in self.lr_milestones:
            if epoch >= math.floor(self.epochs * frac + 1e-9):
                lr *= 0.1
        if it < self.warmup_iters:
            alpha = it / self.warmup_iters
            lr *= self.warmup_factor * (1 - alpha) + alpha
        return lr


class SGD:
    """SGD with momentum; weight decay is added to the gradient (v = mu v + g + wd p)."""

    def __init__(self, params: list[Tensor], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float, clip: float | None = None) -> float:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        scale = clip / norm if clip is not None and norm > clip else 1.0
        for i, (p, g) in enumerate(zip(self.params, grads)):
            d = g * scale + self.weight_decay * p.data
            self.velocity[i] = self.momentum * self.velocity[i] + d
            p.data = p.data - lr * self.velocity[i]
            p.grad = None
        return norm


def image_label(scene: Scene) -> int:
    """1 (ABN) if the scene has any abnormal blob, else 0 (NILM)."""
    return int(scene.is_abnormal)


def eval_proposals(scene: Scene, cfg: TrainConfig, seed: int = 0) -> np.ndarray:
    """Deterministic jittered proposals for evaluating one scene."""
    rng = np.random.default_rng([seed, 7919, scene.image_id])
    return gt_jitter_proposals(scene.boxes, scene.height, scene.width, rng, noise=cfg.jitter_noise,
                               n_background=cfg.n_background, copies=1)


@dataclass
class TrainResult:
    detector: Detector
    log: list[dict]


def train(scenes: list[Scene], det_cfg: DetectorConfig, cfg: TrainConfig,
          on_step: Callable[[dict], None] | None = None, detector: Detector | None = None) -> TrainResult:
    """Train a detector on ``scenes``; deterministic for a given pair of configs.

    A ``detector`` passed in is trained further in place and its own config
    wins over ``det_cfg``.
    """
    if not scenes:
        raise ValueError("training split is empty")
    if detector is not None and detector.cfg != det_cfg:
        raise ValueError("det_cfg does not match the config of the detector passed in")
    det = detector or Detector(det_cfg)
    opt = SGD(det.parameters(), cfg.momentum, cfg.weight_decay)
    n = len(scenes)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    log: list[dict] = []
    it = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        for k in range(steps_per_epoch):
            batch = [scenes[i] for i in order[k * cfg.batch_size:(k + 1) * cfg.batch_size]]
            images = np.stack([s.image for s in batch])
            gtb = [s.boxes for s in batch]
            if cfg.hflip:
                flip = rng.random(len(batch)) < 0.5
                for j in np.flatnonzero(flip):
                    images[j] = images[j, :, ::-1]
                    w = batch[j].width
                    b = gtb[j].copy()
                    b[:, [0, 2]] = w - gtb[j][:, [2, 0]]
                    gtb[j] = b
            gtl = [s.labels for s in batch]
            if cfg.proposal_mode == "gt_jitter":
                props = [gt_jitter_proposals(b, s.height, s.width, rng, noise=cfg.jitter_noise,
                                             n_background=cfg.n_background, copies=cfg.jitter_copies)
                         for b, s in zip(gtb, batch)]
            else:
                with no_grad():
                    props = learned_proposals(det, images)
                props = [np.concatenate([p, b]) for p, b in zip(props, gtb)]
            img_lab = np.array([image_label(s) for s in batch]) if det.cfg.image_head else None
            parts = det.losses(images, props, gtb, gtl, rng, image_labels=img_lab)
            total = parts["total"]
            if not np.isfinite(total.data):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch} step {k}: "
                    + ", ".join(f"{name}={float(v.data):.4g}" for name, v in parts.items()))
            total.backward()
            lr = cfg.lr_at(epoch, it)
            gnorm = opt.step(lr, cfg.grad_clip)
            rec = {"epoch": epoch, "step": it, "lr": lr, "grad_norm": gnorm}
            rec.update({name: float(v.data) for name, v in parts.items()})
            log.append(rec)
            if on_step is not None:
                on_step(rec)
            it += 1
        ep = [r["total"] for r in log if r["epoch"] == epoch]
        logger.info("epoch %d: mean loss %.4f", epoch, float(np.mean(ep)))
    return TrainResult(det, log)


# ---------------------------------------------------------------------------
# inference

def attach_image_head(det: Detector) -> Detector:
    """Copy of a trained detector with a freshly initialised image-level head added."""
    out = Detector(replace(det.cfg, image_head=True))
    state = out.state_dict()
    state.update(det.state_dict())
    out.load_state_dict(state)
    return out


def learned_proposals(det: Detector, images: np.ndarray, top_k: int | None = None,
                      return_scores: bool = False):
    """RPN proposals per image: decode all anchors, NMS, keep top-k by objectness."""
    cfg = det.cfg
    top_k = cfg.rpn_top_k if top_k is None else top_k
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    h, w = images.shape[1:3]
    with no_grad():
        levels = det.backbone_forward(images)
        obj, deltas = det.rpn_forward(levels)
    anchors = make_anchors(h, w, cfg.anchor_scale)
    scores = sigmoid(obj).data
    boxes_out, scores_out = [], []
    for b in range(images.shape[0]):
        boxes = bx.clip_boxes(bx.decode(anchors, deltas.data[b]), h, w)
        ok = ((boxes[:, 2] - boxes[:, 0]) >= 1.0) & ((boxes[:, 3] - boxes[:, 1]) >= 1.0)
        idx = np.flatnonzero(ok)
        keep = idx[bx.nms(boxes[idx], scores[b, idx], cfg.rpn_nms_iou)][:top_k]
        boxes_out.append(boxes[keep])
        scores_out.append(scores[b, keep])
    return (boxes_out, scores_out) if return_scores else boxes_out


def propose(det: Detector, images, mode: str = "learned_rpn_lite", gt_boxes: list | None = None,
            rng: np.random.Generator | None = None, noise: float = 0.2, n_background: int = 4,
            top_k: int | None = None) -> list[list[Proposal]]:
    """Proposals per image, from the RPN or from jittered ground truth."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if mode == "learned_rpn_lite":
        boxes, scores = learned_proposals(det, images, top_k, return_scores=True)
        return [[Proposal(b, float(s)) for b, s in zip(bb, ss)] for bb, ss in zip(boxes, scores)]
    if mode != "gt_jitter":
        raise ValueError(f"unknown proposal mode {mode!r}; expected one of {PROPOSAL_MODES}")
    if gt_boxes is None:
        raise ValueError("gt_jitter proposals need ground-truth boxes")
    rng = rng or np.random.default_rng(0)
    h, w = images.shape[1:3]
    return [[Proposal(b, 1.0) for b in gt_jitter_proposals(g, h, w, rng, noise=noise, n_background=n_background)]
            for g in gt_boxes]


def postprocess(det: Detector, proposals: np.ndarray, logits: np.ndarray, deltas: np.ndarray,
                height: int, width: int) -> list[Detection]:
    cfg = det.cfg
    if len(proposals) == 0:
        return []
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    stds = np.asarray(cfg.box_stds)
    all_boxes, all_scores, all_cls = [], [], []
    for k in range(1, cfg.num_classes + 1):
        sc = probs[:, k]
        keep = np.flatnonzero(sc > cfg.score_thresh)
        if len(keep) == 0:
            continue
        d = deltas[keep, 4 * (k - 1):4 * k] * stds
        boxes = bx.clip_boxes(bx.decode(proposals[keep], d), height, width)
        ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, sc_k = boxes[ok], sc[keep][ok]
        all_boxes.append(boxes)
        all_scores.append(sc_k)
        all_cls.append(np.full(len(boxes), k))
    if not all_boxes:
        return []
    boxes = np.concatenate(all_boxes)
    scores = np.concatenate(all_scores)
    classes = np.concatenate(all_cls)
    keep = bx.batched_nms(boxes, scores, classes, cfg.nms_iou)[:cfg.max_dets]
    return [Detection(boxes[i], int(classes[i]), float(scores[i])) for i in keep]


def infer(det: Detector, images, proposals: list[np.ndarray]) -> list[list[Detection]]:
    """Detections per image for a batch of images with given proposals."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    with no_grad():
        _, _, logits, deltas = det.forward(images, proposals)
    out, start = [], 0
    h, w = images.shape[1:3]
    for p in proposals:
        p = np.asarray(p, dtype=np.float64).reshape(-1, 4)
        n = len(p)
        out.append(postprocess(det, p, logits.data[start:start + n], deltas.data[start:start + n], h, w))
        start += n
    return out


def predict_scenes(det: Detector, scenes: list[Scene], cfg: TrainConfig, seed: int = 0,
                   batch_size: int = 16) -> list[dict]:
    """COCO-style detection records for ``scenes`` using evaluation proposals."""
    records = []
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i:i + batch_size]
        images = np.stack([s.image for s in chunk])
        if cfg.proposal_mode == "gt_jitter":
            props = [eval_proposals(s, cfg, seed) for s in chunk]
        else:
            props = learned_proposals(det, images)
        for s, dets in zip(chunk, infer(det, images, props)):
            for d in dets:
                x1, y1, x2, y2 = (float(v) for v in d.box)
                records.append({"image_id": s.image_id, "category_id": d.class_id,
                                "bbox": [x1, y1, x2 - x1, y2 - y1], "score": d.score})
    return records


def predict_image_labels(det: Detector, scenes: list[Scene], batch_size: int = 16) -> np.ndarray:
    out = []
    for i in range(0, len(scenes), batch_size):
        images = np.stack([s.image for s in scenes[i:i + batch_size]])
        with no_grad():
            logits = det.image_cls_head(det.backbone_forward(images))
        out.append(logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# checkpoints

def _config_to_dict(cfg: DetectorConfig) -> dict:
    d = asdict(cfg)
    d["box_stds"] = list(cfg.box_stds)
    return d


def save_checkpoint(det: Detector, path: str | os.PathLike, extra: dict | None = None) -> None:
    params = {}
    for name, p in det.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        params[name] = {"shape": list(arr.shape), "dtype": "float64",
                        "data": base64.b64encode(arr.tobytes()).decode("ascii")}
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "config": _config_to_dict(det.cfg), "extra": extra or {}, "params": params}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path: str | os.PathLike) -> tuple[Detector, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    det = Detector(DetectorConfig.from_dict(doc["config"]))
    state = {}
    for name, entry in doc["params"].items():
        arr = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8").reshape(entry["shape"])
        state[name] = arr.astype(np.float64)
    det.load_state_dict(state)
    return det, doc.get("extra", {})
