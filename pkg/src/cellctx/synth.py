"""Synthetic cell scenes whose labels can only be decided in context.

A blob is ``abnormal_rel`` when its nucleus/cytoplasm ratio exceeds the mean
ratio of its neighbours (within ``rho`` pixels) by more than ``delta``, and
``abnormal_glob`` when its nucleus intensity minus the image-wide stain shift
exceeds ``theta``.  The relative rule is checked first.  Per-image base ratios
and stain shifts vary widely, so neither quantity can be read off a single
cropped blob.
"""
from __future__ import annotations

import io
import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

GENERATOR_VERSION = "1.0"
LABELS = ("normal", "abnormal_rel", "abnormal_glob")
CATEGORY_IDS = {name: i + 1 for i, name in enumerate(LABELS)}
SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed; the message names the location."""


@dataclass(frozen=True)
class SynthConfig:
    height: int = 128
    width: int = 128
    n_blobs_min: int = 4
    n_blobs_max: int = 8
    cyto_radius_min: float = 9.0
    cyto_radius_max: float = 13.0
    base_ratio_min: float = 0.15
    base_ratio_max: float = 0.65
    ratio_jitter: float = 0.015
    rel_margin_min: float = 0.02
    rel_margin_max: float = 0.08
    glob_margin_min: float = 0.04
    glob_margin_max: float = 0.2
    rho: float = 64.0
    delta: float = 0.08
    theta: float = 0.5
    shift_range: float = 0.2
    image_abnormal_prob: float = 0.6
    rel_prob: float = 0.3
    glob_prob: float = 0.3
    field_amplitude: float = 0.1
    pixel_noise: float = 0.02
    max_overlap: float = 0.3
    max_retries: int = 100

    def __post_init__(self):
        if self.height % 32 or self.width % 32:
            raise ValueError("image height and width must be multiples of 32")
        if self.n_blobs_min < 0 or self.n_blobs_max < self.n_blobs_min:
            raise ValueError("need 0 <= n_blobs_min <= n_blobs_max")
        if self.rel_prob + self.glob_prob > 1:
            raise ValueError("rel_prob + glob_prob must not exceed 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise KeyError(f"unknown dataset config key(s): {', '.join(bad)}")
        return cls(**d)


@dataclass
class CellBlob:
    center: tuple[float, float]          # (x, y) pixels
    cytoplasm_radius: float
    nucleus_radius: float
    intensity: float
    class_label: str = "normal"

    @property
    def ratio(self) -> float:
        return self.nucleus_radius / self.cytoplasm_radius

    @property
    def box(self) -> np.ndarray:
        x, y = self.center
        r = self.cytoplasm_radius
        return np.array([x - r, y - r, x + r, y + r])


@dataclass
class Scene:
    pixels: np.ndarray                   # H x W x 3 uint8
    blobs: list[CellBlob]
    global_shift: float
    split: str = "train"
    image_id: int = 0
    seed: int = 0

    @property
    def image(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def boxes(self) -> np.ndarray:
        return np.array([b.box for b in self.blobs]).reshape(-1, 4)

    @property
    def labels(self) -> np.ndarray:
        """Category ids (1-based) per blob."""
        return np.array([CATEGORY_IDS[b.class_label] for b in self.blobs], dtype=np.int64)

    @property
    def is_abnormal(self) -> bool:
        return any(b.class_label != "normal" for b in self.blobs)


def label_blobs(blobs: list[CellBlob], global_shift: float, cfg: SynthConfig) -> list[str]:
    """The context oracle: class of every blob from its attributes and neighbours."""
    out = []
    for i, b in enumerate(blobs):
        neigh = [o.ratio for j, o in enumerate(blobs)
                 if j != i and math.dist(o.center, b.center) <= cfg.rho]
        if neigh and b.ratio - float(np.mean(neigh)) > cfg.delta:
            out.append("abnormal_rel")
        elif b.intensity - global_shift > cfg.theta:
            out.append("abnormal_glob")
        else:
            out.append("normal")
    return out


def _circle_overlap(r1: float, r2: float, d: float) -> float:
    """Intersection area of two circles over the smaller circle's area."""
    if d >= r1 + r2:
        return 0.0
    small = min(r1, r2)
    if d <= abs(r1 - r2):
        return 1.0
    a1 = r1 * r1 * math.acos((d * d + r1 * r1 - r2 * r2) / (2 * d * r1))
    a2 = r2 * r2 * math.acos((d * d + r2 * r2 - r1 * r1) / (2 * d * r2))
    a3 = 0.5 * math.sqrt(max(0.0, (-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2)))
    return (a1 + a2 - a3) / (math.pi * small * small)


def _smooth_field(rng: np.random.Generator, h: int, w: int, amplitude: float) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(h // 16 + 1, w // 16 + 1))
    fine = ndimage.zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1]), order=3, mode="nearest")
    return amplitude * fine[:h, :w]


def render(blobs: list[CellBlob], global_shift: float, h: int, w: int, cfg: SynthConfig,
           rng: np.random.Generator) -> np.ndarray:
    bg = 0.78 + global_shift + _smooth_field(rng, h, w, cfg.field_amplitude)
    img = bg[..., None] * np.array([1.0, 0.95, 1.0])
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    for b in blobs:
        d = np.hypot(xx - b.center[0], yy - b.center[1])
        cyto = np.clip(b.cytoplasm_radius - d + 0.5, 0.0, 1.0)[..., None]
        img = img * (1 - cyto) + cyto * (bg[..., None] - 0.18) * np.array([0.95, 0.8, 0.95])
        nuc = np.clip(b.nucleus_radius - d + 0.5, 0.0, 1.0)[..., None]
        img = img * (1 - nuc) + nuc * (0.75 - 0.6 * b.intensity) * np.array([0.7, 0.6, 1.0])
    img = img + rng.normal(0.0, cfg.pixel_noise, size=img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_scene(seed: int, H: int | None = None, W: int | None = None, n_blobs: int | None = None,
                   cfg: SynthConfig | None = None, split: str = "train", image_id: int = 0) -> Scene:
    """Generate one scene; ``n_blobs=None`` draws the count from the config range."""
    cfg = cfg or SynthConfig()
    H = cfg.height if H is None else H
    W = cfg.width if W is None else W
    if H % 32 or W % 32:
        raise ValueError(f"image size {H}x{W} must be a multiple of 32")
    rng = np.random.default_rng(seed)
    if n_blobs is None:
        n_blobs = int(rng.integers(cfg.n_blobs_min, cfg.n_blobs_max + 1))
    if n_blobs < 0:
        raise ValueError("n_blobs must be >= 0")
    shift = float(rng.uniform(-cfg.shift_range, cfg.shift_range))
    base = float(rng.uniform(cfg.base_ratio_min, cfg.base_ratio_max))

    targets = ["normal"] * n_blobs
    if n_blobs and rng.random() < cfg.image_abnormal_prob:
        u = rng.random(n_blobs)
        targets = ["abnormal_rel" if x < cfg.rel_prob else
                   "abnormal_glob" if x < cfg.rel_prob + cfg.glob_prob else "normal" for x in u]
        if all(t == "normal" for t in targets):
            k = int(rng.integers(n_blobs))
            targets[k] = ("abnormal_rel" if rng.random() < cfg.rel_prob / (cfg.rel_prob + cfg.glob_prob)
                          else "abnormal_glob")

    placed: list[tuple[tuple[float, float], float, str]] = []
    for target in targets:
        rc = float(rng.uniform(cfg.cyto_radius_min, cfg.cyto_radius_max))
        for _ in range(cfg.max_retries):
            c = (float(rng.uniform(rc, W - rc)), float(rng.uniform(rc, H - rc)))
            if all(_circle_overlap(rc, orc, math.dist(c, oc)) <= cfg.max_overlap for oc, orc, _ in placed):
                placed.append((c, rc, target))
                break
    n = len(placed)
    ratios = base + rng.normal(0.0, cfg.ratio_jitter, size=n)
    rel_margin = rng.uniform(cfg.rel_margin_min, cfg.rel_margin_max, size=n)
    glob_margin = rng.uniform(cfg.glob_margin_min, cfg.glob_margin_max, size=n)
    rel = [i for i, p in enumerate(placed) if p[2] == "abnormal_rel"]
    neigh = [[j for j in range(n) if j != i and math.dist(placed[i][0], placed[j][0]) <= cfg.rho]
             for i in range(n)]
    # rel targets sit delta + margin above their neighbours' mean, which includes other rel targets
    for _ in range(20):
        for i in rel:
            if neigh[i]:
                ratios[i] = ratios[neigh[i]].mean() + cfg.delta + rel_margin[i]
    blobs = []
    for i, (c, rc, target) in enumerate(placed):
        sign = 1.0 if target == "abnormal_glob" else -1.0
        intensity = shift + cfg.theta + sign * glob_margin[i]
        blobs.append(CellBlob(c, rc, float(np.clip(ratios[i], 0.05, 0.95) * rc),
                              float(np.clip(intensity, 0.0, 1.0))))
    for b, lab in zip(blobs, label_blobs(blobs, shift, cfg)):
        b.class_label = lab
    pixels = render(blobs, shift, H, W, cfg, rng)
    return Scene(pixels, blobs, shift, split=split, image_id=image_id, seed=seed)


def scene_seed(base_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(SPLITS.index(split), int(index)))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def generate_split(cfg: SynthConfig, split: str, n: int, base_seed: int, first_id: int = 0) -> list[Scene]:
    return [generate_scene(scene_seed(base_seed, split, i), cfg=cfg, split=split, image_id=first_id + i)
            for i in range(n)]


def generate_dataset(cfg: SynthConfig, n_train: int, n_val: int, n_test: int = 0,
                     seed: int = 0) -> list[Scene]:
    scenes: list[Scene] = []
    for split, n in zip(SPLITS, (n_train, n_val, n_test)):
        scenes.extend(generate_split(cfg, split, n, seed, first_id=len(scenes)))
    return scenes


def expected_class_priors(cfg: SynthConfig) -> dict[str, float]:
    """Expected blob class fractions implied by the generator's target sampling."""
    pr, pg = cfg.rel_prob, cfg.glob_prob
    tot = rel = glob = 0.0
    ns = range(cfg.n_blobs_min, cfg.n_blobs_max + 1)
    for n in ns:
        if n == 0:
            continue
        none_ab = (1 - pr - pg) ** n
        share = pr / (pr + pg) if pr + pg > 0 else 0.0
        rel += cfg.image_abnormal_prob * (n * pr + none_ab * share)
        glob += cfg.image_abnormal_prob * (n * pg + none_ab * (1 - share))
        tot += n
    return {"normal": 1 - (rel + glob) / tot, "abnormal_rel": rel / tot, "abnormal_glob": glob / tot}


# ---------------------------------------------------------------------------
# serialisation

def _png_bytes(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="RGB").save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def image_filename(scene: Scene) -> str:
    return f"images/{scene.split}_{scene.image_id:05d}.png"


def to_coco(scenes: list[Scene]) -> dict:
    images, annotations = [], []
    ann_id = 1
    for s in scenes:
        images.append({"id": s.image_id, "file_name": image_filename(s), "width": s.width,
                       "height": s.height, "split": s.split, "global_shift": s.global_shift,
                       "seed": s.seed})
        for b in s.blobs:
            x1, y1, x2, y2 = b.box.tolist()
            annotations.append({
                "id": ann_id, "image_id": s.image_id, "category_id": CATEGORY_IDS[b.class_label],
                "bbox": [x1, y1, x2 - x1, y2 - y1], "area": (x2 - x1) * (y2 - y1), "iscrowd": 0,
                "attributes": {"center": list(b.center), "cytoplasm_radius": b.cytoplasm_radius,
                               "nucleus_radius": b.nucleus_radius, "intensity": b.intensity},
            })
            ann_id += 1
    categories = [{"id": CATEGORY_IDS[n], "name": n} for n in LABELS]
    return {"images": images, "annotations": annotations, "categories": categories}


def export_dataset(scenes: list[Scene], path: str | os.PathLike, cfg: SynthConfig | None = None,
                   seed: int | None = None) -> None:
    """Write ``images/*.png``, ``annotations.json`` and ``meta.json`` under ``path``."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for s in scenes:
        (root / image_filename(s)).write_bytes(_png_bytes(s.pixels))
    (root / "annotations.json").write_text(json.dumps(to_coco(scenes), indent=1))
    cfg = cfg or SynthConfig()
    meta = {"generator_version": GENERATOR_VERSION, "rho": cfg.rho, "delta": cfg.delta,
            "theta": cfg.theta, "seed": seed, "config": asdict(cfg),
            "splits": {sp: sum(s.split == sp for s in scenes) for sp in SPLITS}}
    (root / "meta.json").write_text(json.dumps(meta, indent=1))


def _require(obj, key, where, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetFormatError(f"{where}: missing key {key!r}")
    val = obj[key]
    if kind is not None and not isinstance(val, kind):
        raise DatasetFormatError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, "
                                 f"got {type(val).__name__}")
    return val


def parse_coco(doc: dict, load_pixels=None) -> list[Scene]:
    """Scenes from a COCO-like dict; ``load_pixels(image_entry)`` supplies image data."""
    images = _require(doc, "images", "annotations.json", list)
    anns = _require(doc, "annotations", "annotations.json", list)
    cats = _require(doc, "categories", "annotations.json", list)
    id_to_name = {}
    for i, c in enumerate(cats):
        cid = _require(c, "id", f"categories[{i}]", int)
        id_to_name[cid] = _require(c, "name", f"categories[{i}]", str)
    scenes: dict[int, Scene] = {}
    for i, im in enumerate(images):
        where = f"images[{i}]"
        iid = _require(im, "id", where, int)
        h = _require(im, "height", where, int)
        w = _require(im, "width", where, int)
        pixels = load_pixels(im) if load_pixels else np.zeros((h, w, 3), dtype=np.uint8)
        if pixels.shape != (h, w, 3):
            raise DatasetFormatError(f"{where}: image data has shape {pixels.shape}, expected {(h, w, 3)}")
        scenes[iid] = Scene(pixels, [], float(im.get("global_shift", 0.0)), split=im.get("split", "train"),
                            image_id=iid, seed=int(im.get("seed", 0)))
    for i, a in enumerate(anns):
        where = f"annotations[{i}]"
        iid = _require(a, "image_id", where, int)
        if iid not in scenes:
            raise DatasetFormatError(f"{where}.image_id: unknown image {iid}")
        cid = _require(a, "category_id", where, int)
        if cid not in id_to_name or id_to_name[cid] not in CATEGORY_IDS:
            raise DatasetFormatError(f"{where}.category_id: unknown category {cid}")
        bbox = _require(a, "bbox", where, list)
        if len(bbox) != 4 or not all(isinstance(v, (int, float)) for v in bbox):
            raise DatasetFormatError(f"{where}.bbox: expected 4 numbers [x, y, w, h]")
        attrs = a.get("attributes")
        if attrs is None:
            x, y, bw, bh = bbox
            r = 0.5 * min(bw, bh)
            blob = CellBlob((x + 0.5 * bw, y + 0.5 * bh), r, 0.5 * r, 0.0, id_to_name[cid])
        else:
            center = _require(attrs, "center", where + ".attributes", list)
            blob = CellBlob((float(center[0]), float(center[1])),
                            float(_require(attrs, "cytoplasm_radius", where + ".attributes")),
                            float(_require(attrs, "nucleus_radius", where + ".attributes")),
                            float(_require(attrs, "intensity", where + ".attributes")),
                            id_to_name[cid])
        scenes[iid].blobs.append(blob)
    return [scenes[k] for k in sorted(scenes)]


def import_dataset(path: str | os.PathLike, splits: tuple[str, ...] | None = None) -> list[Scene]:
    root = Path(path)
    ann_path = root / "annotations.json"
    try:
        doc = json.loads(ann_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{ann_path}: line {e.lineno} column {e.colno}: {e.msg}") from None

    def load(im):
        fp = root / im["file_name"]
        try:
            with Image.open(fp) as img:
                return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
        except (OSError, KeyError) as e:
            raise DatasetFormatError(f"image {im.get('id')}: cannot read {fp}: {e}") from None

    if splits is not None:
        doc = dict(doc)
        keep = {im["id"] for im in doc["images"] if im.get("split") in splits}
        doc["images"] = [im for im in doc["images"] if im["id"] in keep]
        doc["annotations"] = [a for a in doc["annotations"] if a.get("image_id") in keep]
    return parse_coco(doc, load)
