"""Train the baseline and the RRAM -> GRAM cascade on a small synthetic set and compare.

Short schedule, so the numbers are noisy; the acceptance run uses 500 training
images, 12 epochs and three seeds.

Run: python demos/train_compare.py
"""
import logging
from dataclasses import replace

from cellctx.experiment import ExperimentConfig, evaluate_detector, split_scenes, train_run
from cellctx.synth import generate_dataset

logging.basicConfig(level=logging.INFO, format="%(message)s")

base = ExperimentConfig()
base = replace(base, train=replace(base.train, epochs=4))
scenes = generate_dataset(base.synth, n_train=150, n_val=40, seed=0)
val = split_scenes(scenes, "val")

for strategy in ("none", "cascade_rram_gram"):
    cfg = replace(base, detector=replace(base.detector, strategy=strategy))
    res = train_run(cfg, scenes)
    ev = evaluate_detector(res.detector, cfg, val)
    r, t = ev.report, ev.tide
    print(f"\n{strategy}: AP {100 * r.ap:.1f}  AP50 {100 * r.ap50:.1f}  AP75 {100 * r.ap75:.1f}")
    for name, row in r.per_class.items():
        print(f"  {name:14s} AP50 {100 * row['ap50']:.1f}")
    print("  dAP50 if fixed:", "  ".join(f"{k[2:]} {100 * getattr(t, k):.1f}"
                                         for k in ("e_cls", "e_loc", "e_both", "e_dupe", "e_bkg", "e_miss")))
