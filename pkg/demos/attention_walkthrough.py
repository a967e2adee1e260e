"""Walk through RRAM and GRAM on a handful of random RoIs.

Run: python demos/attention_walkthrough.py
"""
import numpy as np

from cellctx.attention import (GRAM, RRAM, GramConfig, RoiBatch, RramConfig, combine, count_similarity_evals,
                               prepare_global_map)
from cellctx.tensor import Tensor

rng = np.random.default_rng(0)
N, s, C = 3, 7, 16

rois = RoiBatch(Tensor(rng.normal(size=(N, s, s, C))))
level1 = Tensor(rng.normal(size=(32, 32, C)))  # one pyramid level, h x w x C

rram = RRAM(C, RramConfig(c_prime=8), rng)
gram = GRAM(C, GramConfig(c_double_prime=8, fpn_level=1), rng)

# every query position sees N * ceil(s/2)^2 keys
print("RRAM keys per query:", count_similarity_evals(rois, rram), "=", N, "x", ((s + 1) // 2) ** 2)

# level 1 is average pooled by 4 (32 -> 8), then every other position is kept (8 -> 4)
gmap = prepare_global_map(level1, gram.cfg)
print("GRAM keys per query:", count_similarity_evals(rois, gram, gmap))

for strategy in ("rram_only", "gram_only", "parallel_sum", "cascade_gram_rram", "cascade_rram_gram"):
    out = combine(rois, gmap, rram, gram, strategy)
    delta = np.abs(out.features.data - rois.features.data).mean()
    print(f"{strategy:20s} mean |change| = {delta:.4f}")

# zero the output projections and the residual makes every strategy an identity
for lin in (rram.phi4, gram.psi4):
    for p in lin.parameters():
        p.data[...] = 0.0
out = combine(rois, gmap, rram, gram, "cascade_rram_gram")
print("identity with zeroed output maps:", np.array_equal(out.features.data, rois.features.data))
