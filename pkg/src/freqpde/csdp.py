"""Cross-view, scale-invariant hierarchical depth prediction.

Per level and camera: intrinsics-conditioned channel attention, one
cross-view width-attention block over the rig, adaptive bins (initialized at
the coarsest level, refined by attractors below it), and a fusion of the
categorical and regressed depth estimates.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .geometry import CameraModel
from .tensor import (
    F32,
    WeightSet,
    as_feature_map,
    dense,
    perceptron,
    pixel_perceptron,
    resize_bilinear,
    sigmoid,
    softmax,
)


@dataclass(frozen=True)
class CsdpConfig:
    alpha: float = 300.0
    beta: float = 2.0
    omega: float = 0.5
    mu: float = 0.2
    n_attractors: int = 8
    n_bins: int = 64
    d_min: float = 1.0
    d_max: float = 61.2

    def __post_init__(self):
        if not 0.0 <= self.omega <= 1.0:
            raise ConfigError(f"omega must lie in [0, 1], got {self.omega}")
        if not 0.0 <= self.mu <= 0.5:
            raise ConfigError(f"mask ratio mu must lie in [0, 0.5], got {self.mu}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("alpha and beta must be positive")
        if not self.d_min < self.d_max:
            raise ConfigError(f"depth range must satisfy d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if self.n_attractors < 1 or self.n_bins < 1:
            raise ConfigError("attractor and bin counts must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Channel attention conditioned on intrinsics
# ---------------------------------------------------------------------------


def eca_kernel_size(channels: int) -> int:
    t = math.log2(channels) / 2 + 0.5
    k = 2 * round((t - 1) / 2) + 1
    return max(3, k)


def scaled_intrinsics(cam: CameraModel, zeta: float) -> np.ndarray:
    """Intrinsics of the ζ-times downsampled grid, flattened to 9 values."""
    k = cam.K.copy()
    k[:2] /= zeta
    return k.reshape(-1)


def eca_geometry(channels: int, prefix: str):
    k = eca_kernel_size(channels)
    return dense(f"{prefix}.intr", 9, channels) + [
        (f"{prefix}.conv.weight", (1, 1, k)),
        (f"{prefix}.conv.bias", (1,)),
    ]


def eca_gates(fmap: np.ndarray, cam: CameraModel, zeta: float, weights: WeightSet, prefix: str) -> np.ndarray:
    fmap = as_feature_map(fmap)
    c = fmap.shape[0]
    pooled = fmap.astype(np.float64).mean(axis=(1, 2))
    desc = pooled + perceptron(scaled_intrinsics(cam, zeta), weights, [f"{prefix}.intr"]).astype(np.float64)
    kernel = weights[f"{prefix}.conv.weight"].reshape(-1).astype(np.float64)
    bias = float(weights[f"{prefix}.conv.bias"][0])
    k = kernel.size
    if k % 2 == 0:
        raise ShapeError(f"channel-attention kernel must have odd length, got {k}")
    padded = np.pad(desc, k // 2)
    mixed = np.zeros(c, dtype=np.float64)
    for t in range(k):
        mixed += kernel[t] * padded[t : t + c]
    return sigmoid(mixed + bias)


def eca_condition(
    fmap: np.ndarray, cam: CameraModel, zeta: float, weights: WeightSet, prefix: str = "csdp.eca"
) -> np.ndarray:
    """Re-weight channels by gates in (0, 1) derived from pooled features and ζ-scaled intrinsics."""
    gates = eca_gates(fmap, cam, zeta, weights, prefix)
    return (fmap.astype(np.float64) * gates[:, None, None]).astype(F32)


# ---------------------------------------------------------------------------
# Cross-view width attention
# ---------------------------------------------------------------------------


def cwa_geometry(channels: int, prefix: str):
    geometry = []
    for proj in ("q", "k", "v", "o"):
        geometry += dense(f"{prefix}.{proj}", channels, channels)
    return geometry


def band_columns(width: int, mu: float) -> np.ndarray:
    """Indices of the participating left and right column bands."""
    if not 0.0 <= mu <= 0.5:
        raise ConfigError(f"mask ratio mu must lie in [0, 0.5], got {mu}")
    m = math.floor(mu * width)
    if m == 0:
        return np.zeros(0, dtype=np.intp)
    return np.concatenate([np.arange(m), np.arange(width - m, width)])


def cross_view_width_attention(
    feats: Sequence[np.ndarray], mu: float, weights: WeightSet, prefix: str = "csdp.cwa"
) -> list[np.ndarray]:
    """One single-head width-attention block over the rig at one level.

    For each row, the band columns of every camera form the token set;
    the attention update is added only to those columns.
    """
    feats = [as_feature_map(f, f"camera {j} feature") for j, f in enumerate(feats)]
    if len(feats) < 2:
        raise ShapeError(f"cross-view attention needs at least 2 cameras, got {len(feats)}")
    shape = feats[0].shape
    if any(f.shape != shape for f in feats):
        raise ShapeError("all cameras must share the feature shape at a level")
    c, h, w = shape
    cols = band_columns(w, mu)
    out = [f.copy() for f in feats]
    if cols.size == 0:
        return out

    # tokens: (H, J * 2m, C), camera-major then column order
    tokens = np.concatenate([np.moveaxis(f[:, :, cols], 0, -1) for f in feats], axis=1).astype(np.float64)

    def proj(name, x):
        wt = weights[f"{prefix}.{name}.weight"].astype(np.float64)
        return np.einsum("rtc,oc->rto", x, wt) + weights[f"{prefix}.{name}.bias"].astype(np.float64)

    q, k, v = proj("q", tokens), proj("k", tokens), proj("v", tokens)
    scores = np.einsum("rtc,rsc->rts", q, k) / math.sqrt(c)
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    update = proj("o", np.einsum("rts,rsc->rtc", attn, v))

    n = cols.size
    for j, f in enumerate(feats):
        upd = np.moveaxis(update[:, j * n : (j + 1) * n], -1, 0)  # C×H×n
        out[j][:, :, cols] = (f[:, :, cols].astype(np.float64) + upd).astype(F32)
    return out


# ---------------------------------------------------------------------------
# Bins, attractors and depth heads
# ---------------------------------------------------------------------------


def init_bins(fmap: np.ndarray, d_min: float, d_max: float, weights: WeightSet, prefix: str = "csdp.bins") -> np.ndarray:
    """N_B×H×W bin centers from softmax widths placed cumulatively over the range."""
    logits = pixel_perceptron(fmap, weights, [prefix])
    widths = softmax(logits, axis=0).astype(np.float64)
    widths /= widths.sum(axis=0, keepdims=True)
    edges = np.cumsum(widths, axis=0)
    centers = d_min + (d_max - d_min) * (edges - widths / 2)
    return centers.astype(F32)


def upsample_bins(bins: np.ndarray, height: int, width: int) -> np.ndarray:
    return resize_bilinear(bins, height, width)


def attractor_shift(centers: np.ndarray, attractors: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """Σ_n (p_n − c)/(1 + α|p_n − c|^β) for centers (N_B, ...) and attractors (N, ...)."""
    c = np.asarray(centers, dtype=np.float64)[None]
    p = np.asarray(attractors, dtype=np.float64)[:, None]
    gap = p - c
    return (gap / (1.0 + alpha * np.abs(gap) ** beta)).sum(axis=0)


def predict_attractors(fmap: np.ndarray, cfg: CsdpConfig, weights: WeightSet, prefix: str) -> np.ndarray:
    logits = pixel_perceptron(fmap, weights, [prefix])
    return cfg.d_min + (cfg.d_max - cfg.d_min) * sigmoid(logits)


def refine_with_attractors(bins: np.ndarray, attractors: np.ndarray, cfg: CsdpConfig) -> np.ndarray:
    """Shift same-grid centers toward attractors, clamp to range, re-sort per pixel."""
    refined = bins.astype(np.float64) + attractor_shift(bins, attractors, cfg.alpha, cfg.beta)
    refined = np.clip(refined, cfg.d_min, cfg.d_max)
    return np.sort(refined, axis=0).astype(F32)


def attractor_refine(
    bins_coarse: np.ndarray, fmap: np.ndarray, cfg: CsdpConfig, weights: WeightSet, prefix: str = "csdp.attr"
) -> np.ndarray:
    fmap = as_feature_map(fmap)
    nb, h, w = bins_coarse.shape
    if fmap.shape[1:] != (2 * h, 2 * w):
        raise ShapeError(
            f"attractor refinement needs a {2 * h}×{2 * w} feature for {h}×{w} bins, got {fmap.shape[1:]}"
        )
    up = upsample_bins(bins_coarse, 2 * h, 2 * w)
    return refine_with_attractors(up, predict_attractors(fmap, cfg, weights, prefix), cfg)


def bin_probabilities(fmap: np.ndarray, weights: WeightSet, prefix: str = "csdp.prob") -> np.ndarray:
    return softmax(pixel_perceptron(fmap, weights, [prefix]), axis=0)


def categorical_depth(probs: np.ndarray, bins: np.ndarray) -> np.ndarray:
    if probs.shape != bins.shape:
        raise ShapeError(f"probability field {probs.shape} does not match bins {bins.shape}")
    return np.einsum("khw,khw->hw", probs.astype(np.float64), bins.astype(np.float64))


def regress_depth(fmap: np.ndarray, d_min: float, d_max: float, weights: WeightSet, prefix: str = "csdp.reg") -> np.ndarray:
    logit = pixel_perceptron(fmap, weights, [prefix])[0]
    return d_min + (d_max - d_min) * sigmoid(logit)


def fuse_depth(dc: np.ndarray, dr: np.ndarray, omega: float) -> np.ndarray:
    if dc.shape != dr.shape:
        raise ShapeError(f"categorical depth {dc.shape} and regressed depth {dr.shape} differ")
    if not 0.0 <= omega <= 1.0:
        raise ConfigError(f"omega must lie in [0, 1], got {omega}")
    return omega * dc.astype(np.float64) + (1.0 - omega) * dr.astype(np.float64)


def clip_depth(depth: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    """Round to float32 and clip so every value lies inside [d_min, d_max] exactly."""
    lo, hi = np.float32(d_min), np.float32(d_max)
    if float(lo) < d_min:
        lo = np.nextafter(lo, np.float32(np.inf))
    if float(hi) > d_max:
        hi = np.nextafter(hi, np.float32(-np.inf))
    return np.clip(np.asarray(depth).astype(F32), lo, hi)


# ---------------------------------------------------------------------------
# Full head
# ---------------------------------------------------------------------------


def csdp_geometry(channels: int, n_levels: int, cfg: CsdpConfig):
    geometry = dense("csdp.bins", channels, cfg.n_bins)
    for i in range(n_levels):
        p = f"csdp.l{i}"
        geometry += eca_geometry(channels, f"{p}.eca")
        geometry += cwa_geometry(channels, f"{p}.cwa")
        geometry += dense(f"{p}.prob", channels, cfg.n_bins)
        geometry += dense(f"{p}.reg", channels, 1)
        if i > 0:
            geometry += dense(f"{p}.attr", channels, cfg.n_attractors)
    return geometry


@dataclass(frozen=True)
class LevelOutput:
    bins: list[np.ndarray]
    categorical: list[np.ndarray]
    regressed: list[np.ndarray]
    depth: list[np.ndarray]


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def csdp_forward(
    levels: Sequence[Sequence[np.ndarray]],
    cams: Sequence[CameraModel],
    cfg: CsdpConfig,
    weights: WeightSet,
    factors: Sequence[float],
    threads: int = 1,
    details: bool = False,
):
    """Depth for every level (coarse → fine) and camera.

    ``levels[i][j]`` is camera ``j``'s feature at level ``i``; ``factors[i]``
    is that level's downsampling factor.  Returns ``depth[i][j]`` (H_i×W_i),
    or the per-level :class:`LevelOutput` list when ``details`` is set.
    """
    if len(levels) < 1:
        raise ShapeError("need at least one level")
    if len(factors) != len(levels):
        raise ShapeError(f"{len(levels)} levels but {len(factors)} downsampling factors")
    n_cam = len(cams)
    for i, lvl in enumerate(levels):
        if len(lvl) != n_cam:
            raise ShapeError(f"level {i} holds {len(lvl)} camera features, calibration has {n_cam}")
    for i in range(1, len(levels)):
        _, h, w = as_feature_map(levels[i - 1][0]).shape
        if as_feature_map(levels[i][0]).shape[1:] != (2 * h, 2 * w):
            raise ShapeError(f"level {i} must double the resolution of level {i - 1}")

    outputs: list[LevelOutput] = []
    bins: list[np.ndarray] | None = None
    for i, lvl in enumerate(levels):
        p = f"csdp.l{i}"
        conditioned = _map(
            lambda j: eca_condition(lvl[j], cams[j], factors[i], weights, f"{p}.eca"), range(n_cam), threads
        )
        mixed = cross_view_width_attention(conditioned, cfg.mu, weights, f"{p}.cwa")

        def head(j, bins_prev=bins):
            f = mixed[j]
            if bins_prev is None:
                b = init_bins(f, cfg.d_min, cfg.d_max, weights, "csdp.bins")
            else:
                b = attractor_refine(bins_prev[j], f, cfg, weights, f"{p}.attr")
            dc = categorical_depth(bin_probabilities(f, weights, f"{p}.prob"), b)
            dr = regress_depth(f, cfg.d_min, cfg.d_max, weights, f"{p}.reg")
            d = clip_depth(fuse_depth(dc, dr, cfg.omega), cfg.d_min, cfg.d_max)
            return b, dc, dr, d

        results = _map(head, range(n_cam), threads)
        bins = [r[0] for r in results]
        outputs.append(LevelOutput(*(list(col) for col in zip(*results))))
    if details:
        return outputs
    return [o.depth for o in outputs]
