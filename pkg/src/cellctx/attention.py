"""RoI-relationship and global RoI attention.

Both modules enhance pooled RoI features residually::

    R'  = R  + phi4(softmax(phi1(R) phi2(ds(R))^T / tau) phi3(ds(R)))
    R'' = R' + psi4(softmax(psi1(R') psi2(ds(G))^T / tau) psi3(ds(G)))

where ``ds`` keeps every second spatial position (or another downsampling
operator for the RoI branch) and ``G`` is a feature-pyramid map of the
whole image.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .nn import LinearMap, Module, StridedProjection
from .tensor import (DOWNSAMPLE_OPS, ShapeError, Tensor, as_tensor, avg_pool, downsample_fixed,
                     reshape_v, reshape_v_inv, scaled_softmax)


class Strategy(str, enum.Enum):
    NONE = "none"
    RRAM_ONLY = "rram_only"
    GRAM_ONLY = "gram_only"
    PARALLEL_SUM = "parallel_sum"
    CASCADE_GRAM_RRAM = "cascade_gram_rram"
    CASCADE_RRAM_GRAM = "cascade_rram_gram"
    # alternative reading of parallel fusion: full module outputs summed (input counted twice)
    PARALLEL_DOUBLE_RESIDUAL = "parallel_double_residual"

    @property
    def uses_rram(self) -> bool:
        return self not in (Strategy.NONE, Strategy.GRAM_ONLY)

    @property
    def uses_gram(self) -> bool:
        return self not in (Strategy.NONE, Strategy.RRAM_ONLY)


# the six settings compared in the combination ablation
STRATEGIES = tuple(Strategy)[:6]


@dataclass
class RoiBatch:
    features: Tensor                      # N x s x s x C
    boxes: np.ndarray = field(default=None)   # N x 4, (x1, y1, x2, y2) image pixels
    levels: np.ndarray = field(default=None)  # N pyramid levels (1-based)

    def __post_init__(self):
        f = self.features
        if f.ndim != 4 or f.shape[1] != f.shape[2] or f.shape[1] < 1:
            raise ShapeError(f"RoI features must be N x s x s x C, got {f.shape}")
        n = f.shape[0]
        if self.boxes is None:
            self.boxes = np.tile(np.array([0.0, 0.0, 1.0, 1.0]), (n, 1))
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if self.levels is None:
            self.levels = np.ones(n, dtype=np.int64)
        self.levels = np.asarray(self.levels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != n or len(self.levels) != n:
            raise ShapeError("RoiBatch: features, boxes and levels disagree on N")
        if n and np.any((self.boxes[:, 2] <= self.boxes[:, 0]) | (self.boxes[:, 3] <= self.boxes[:, 1])):
            raise ValueError("RoiBatch: boxes must have positive width and height")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def s(self) -> int:
        return self.features.shape[1]

    @property
    def channels(self) -> int:
        return self.features.shape[3]

    def with_features(self, features: Tensor) -> "RoiBatch":
        return RoiBatch(features, self.boxes, self.levels)


@dataclass(frozen=True)
class RramConfig:
    c_prime: int = 128
    downsample_op: str = "naive_subsample"
    bias: bool = False
    zero_init_output: bool = False

    def __post_init__(self):
        if self.c_prime < 1:
            raise ValueError("c_prime must be >= 1")
        if self.downsample_op not in DOWNSAMPLE_OPS:
            raise ValueError(f"downsample_op must be one of {DOWNSAMPLE_OPS}")

    @property
    def tau(self) -> float:
        return float(self.c_prime)


@dataclass(frozen=True)
class GramConfig:
    c_double_prime: int = 128
    fpn_level: int = 1
    extra_downsample_ratio: int | None = None   # None: 4 for level 1, else 1
    bias: bool = False
    zero_init_output: bool = False

    def __post_init__(self):
        if self.c_double_prime < 1:
            raise ValueError("c_double_prime must be >= 1")
        if self.fpn_level not in (1, 2, 3, 4):
            raise ValueError("fpn_level must be in {1, 2, 3, 4}")
        if self.extra_downsample_ratio is not None and self.extra_downsample_ratio < 1:
            raise ValueError("extra_downsample_ratio must be >= 1")

    @property
    def tau(self) -> float:
        return float(self.c_double_prime)

    @property
    def ratio(self) -> int:
        if self.extra_downsample_ratio is not None:
            return self.extra_downsample_ratio
        return 4 if self.fpn_level == 1 else 1


def _projections(c: int, c_mid: int, rng, bias: bool, zero_out: bool):
    return (LinearMap(c, c_mid, rng, bias=bias),
            LinearMap(c, c_mid, rng, bias=bias),
            LinearMap(c, c_mid, rng, bias=bias),
            LinearMap(c_mid, c, rng, bias=bias, init_scheme="zeros" if zero_out else "kaiming"))


def _attend(q: Tensor, k: Tensor, v: Tensor, tau: float):
    attn = scaled_softmax(q @ k.T, tau)
    return attn @ v, attn


def rram_similarity(r_query, r_key, phi1: LinearMap, phi2: LinearMap, tau: float) -> Tensor:
    """Unnormalised similarity phi1(r_q) . phi2(r_k) / tau for two 1 x C features."""
    q = phi1(as_tensor(r_query).reshape(1, -1))
    k = phi2(as_tensor(r_key).reshape(1, -1))
    return (q @ k.T).reshape(()) * (1.0 / tau)


class RRAM(Module):
    """Attention from every RoI position to the downsampled positions of all RoIs."""

    def __init__(self, channels: int, cfg: RramConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.channels = channels
        self.phi1, self.phi2, self.phi3, self.phi4 = _projections(
            channels, cfg.c_prime, rng, cfg.bias, cfg.zero_init_output)
        self.ds = StridedProjection(channels, rng) if cfg.downsample_op == "linear_proj2" else None
        self.last_key_count: int | None = None

    def downsample(self, r: Tensor) -> Tensor:
        if self.ds is not None:
            return self.ds(r)
        return downsample_fixed(r, self.cfg.downsample_op)

    def influence(self, r: Tensor, return_attention: bool = False):
        """Projected influence Z (same shape as ``r``); optionally the N s^2 x N s'^2 weights."""
        if r.shape[-1] != self.channels:
            raise ShapeError(f"RRAM configured for {self.channels} channels, got features {r.shape}")
        rd = self.downsample(r)
        q = self.phi1(reshape_v(r))
        kd = reshape_v(rd)
        agg, attn = _attend(q, self.phi2(kd), self.phi3(kd), self.cfg.tau)
        self.last_key_count = attn.shape[-1]
        z = reshape_v_inv(self.phi4(agg), r.shape)
        return (z, attn) if return_attention else z

    def __call__(self, rois: RoiBatch) -> RoiBatch:
        if len(rois) == 0:
            return rois
        return rois.with_features(rois.features + self.influence(rois.features))


def prepare_global_map(level_map: Tensor, cfg: GramConfig) -> Tensor:
    """Average-pool one pyramid level (h x w x C) by the configured extra ratio."""
    return avg_pool(level_map, cfg.ratio)


class GRAM(Module):
    """Attention from every RoI position to the mod-2 subsampled global feature map."""

    def __init__(self, channels: int, cfg: GramConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.channels = channels
        self.psi1, self.psi2, self.psi3, self.psi4 = _projections(
            channels, cfg.c_double_prime, rng, cfg.bias, cfg.zero_init_output)
        self.last_key_count: int | None = None

    def influence(self, r: Tensor, global_map: Tensor, return_attention: bool = False):
        if global_map.ndim != 3:
            raise ShapeError(f"global map must be h x w x C, got {global_map.shape}")
        h, w, c = global_map.shape
        if h == 0 or w == 0:
            raise ValueError("global map is empty")
        if c != self.channels or r.shape[-1] != self.channels:
            raise ShapeError(f"GRAM configured for {self.channels} channels, got RoIs {r.shape} "
                             f"and global map {global_map.shape}")
        gd = downsample_fixed(global_map, "naive_subsample")
        gd = gd.reshape(-1, c)
        q = self.psi1(reshape_v(r))
        agg, attn = _attend(q, self.psi2(gd), self.psi3(gd), self.cfg.tau)
        self.last_key_count = attn.shape[-1]
        hmap = reshape_v_inv(self.psi4(agg), r.shape)
        return (hmap, attn) if return_attention else hmap

    def __call__(self, rois: RoiBatch, global_map: Tensor) -> RoiBatch:
        if len(rois) == 0:
            return rois
        return rois.with_features(rois.features + self.influence(rois.features, global_map))


def combine(rois: RoiBatch, global_map: Tensor | None, rram: RRAM | None, gram: GRAM | None,
            strategy: Strategy | str) -> RoiBatch:
    """Apply the attention modules to one image's RoIs according to ``strategy``."""
    strategy = Strategy(strategy)
    if strategy is Strategy.NONE or len(rois) == 0:
        return rois
    if strategy.uses_rram and rram is None:
        raise ValueError(f"strategy {strategy.value} needs an RRAM module")
    if strategy.uses_gram and (gram is None or global_map is None):
        raise ValueError(f"strategy {strategy.value} needs a GRAM module and a global map")
    if strategy is Strategy.RRAM_ONLY:
        return rram(rois)
    if strategy is Strategy.GRAM_ONLY:
        return gram(rois, global_map)
    if strategy is Strategy.CASCADE_RRAM_GRAM:
        return gram(rram(rois), global_map)
    if strategy is Strategy.CASCADE_GRAM_RRAM:
        return rram(gram(rois, global_map))
    x = rois.features
    fused = x + rram.influence(x) + gram.influence(x, global_map)
    if strategy is Strategy.PARALLEL_DOUBLE_RESIDUAL:
        fused = fused + x
    return rois.with_features(fused)


def count_similarity_evals(rois: RoiBatch, module: RRAM | GRAM, global_map: Tensor | None = None) -> int:
    """Number of keys each query position is compared against in one forward pass."""
    if isinstance(module, GRAM):
        _, attn = module.influence(rois.features, global_map, return_attention=True)
    else:
        _, attn = module.influence(rois.features, return_attention=True)
    return int(attn.shape[-1])
