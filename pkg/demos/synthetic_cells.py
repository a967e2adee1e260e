"""Generate a few synthetic scenes, show how labels depend on context, save a contact sheet.

Run: python demos/synthetic_cells.py [out.png]
"""
import sys
from collections import Counter

import numpy as np
from PIL import Image, ImageDraw

from cellctx.synth import SynthConfig, expected_class_priors, generate_dataset, label_blobs

cfg = SynthConfig()
scenes = generate_dataset(cfg, n_train=200, n_val=0, seed=3)

counts = Counter(b.class_label for s in scenes for b in s.blobs)
total = sum(counts.values())
print("observed vs target class frequency")
for name, p in expected_class_priors(cfg).items():
    print(f"  {name:14s} {counts[name] / total:.3f}  {p:.3f}")
# Targets are what the sampler asks for; labels always come from the rule. A rel target
# with no neighbour in range, or whose only references are other rel targets, ends up
# labelled by the other rules, so abnormal_rel runs a little under its target.

# The same blob flips label when its neighbours change. Take an abnormal_rel blob
# and relabel it alone: with no reference cells the relative rule cannot fire.
for s in scenes:
    rel = [b for b in s.blobs if b.class_label == "abnormal_rel"]
    if rel:
        alone = label_blobs([rel[0]], s.global_shift, cfg)[0]
        print(f"image {s.image_id}: blob at {tuple(round(v) for v in rel[0].center)} is abnormal_rel "
              f"among {len(s.blobs)} cells, {alone} on its own")
        break

colours = {"normal": (40, 160, 40), "abnormal_rel": (220, 40, 40), "abnormal_glob": (40, 80, 220)}
tiles = []
for s in scenes[:8]:
    im = Image.fromarray(s.pixels)
    draw = ImageDraw.Draw(im)
    for b in s.blobs:
        draw.rectangle([float(v) for v in b.box], outline=colours[b.class_label])
    tiles.append(np.asarray(im))
sheet = np.concatenate([np.concatenate(tiles[:4], axis=1), np.concatenate(tiles[4:], axis=1)], axis=0)
out = sys.argv[1] if len(sys.argv) > 1 else "synthetic_cells.png"
Image.fromarray(sheet).save(out)
print("contact sheet:", out, "(green normal, red abnormal_rel, blue abnormal_glob)")
