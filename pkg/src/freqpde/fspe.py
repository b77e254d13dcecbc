"""Frequency-aware top-down pyramid fusion.

A coarse (high-level) map is smoothed by per-pixel predicted low-pass
filters and injected into the LL band of the Haar decomposition of the next
finer map; the inverse transform then restores full resolution without any
interpolation, and the finer map is added back residually.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import F32, WeightSet, as_feature_map, conv, conv2d_3x3, softmax


@dataclass(frozen=True)
class FilterField:
    """K²×H×W per-pixel filter weights; taps are row-major over the K×K window."""

    weights: np.ndarray
    k: int = 3

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ShapeError(f"filter size must be odd and positive, got {self.k}")
        if self.weights.ndim != 3 or self.weights.shape[0] != self.k * self.k:
            raise ShapeError(f"filter field must be {self.k**2}×H×W, got {self.weights.shape}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.weights.shape[1], self.weights.shape[2]


@dataclass(frozen=True)
class WaveletQuad:
    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray

    def __post_init__(self):
        shapes = {b.shape for b in (self.ll, self.lh, self.hl, self.hh)}
        if len(shapes) != 1:
            raise ShapeError(f"wavelet sub-bands disagree in shape: {sorted(shapes)}")
        if self.ll.ndim != 3:
            raise ShapeError(f"wavelet sub-bands must be C×H×W, got {self.ll.shape}")


@dataclass(frozen=True)
class Pyramid:
    """Fused levels ordered coarse → fine with their downsampling factors."""

    levels: list[np.ndarray]
    factors: list[float]

    def __len__(self) -> int:
        return len(self.levels)


def lowpass_geometry(channels: int, k: int = 3, prefix: str = "fspe.lowpass"):
    return conv(prefix, channels, k * k)


def pyramid_geometry(channels: int, n_levels: int, k: int = 3):
    geometry = []
    for i in range(n_levels - 1):
        geometry += lowpass_geometry(channels, k, f"fspe.fuse{i}")
    return geometry


def predict_lowpass_filters(
    s_n: np.ndarray, weights: WeightSet, k: int = 3, prefix: str = "fspe.lowpass"
) -> FilterField:
    s_n = as_feature_map(s_n, "high-level feature")
    kernel, bias = weights[f"{prefix}.weight"], weights[f"{prefix}.bias"]
    if kernel.shape[0] != k * k:
        raise ShapeError(f"filter predictor emits {kernel.shape[0]} channels, need {k * k}")
    logits = conv2d_3x3(s_n, kernel, bias)
    return FilterField(softmax(logits, axis=0), k)


def apply_lowpass(s_n: np.ndarray, field: FilterField) -> np.ndarray:
    s_n = as_feature_map(s_n, "high-level feature")
    if s_n.shape[1:] != field.grid:
        raise ShapeError(f"filter grid {field.grid} does not match feature grid {s_n.shape[1:]}")
    k, r = field.k, field.k // 2
    _, h, w = s_n.shape
    xp = np.pad(s_n.astype(np.float64), ((0, 0), (r, r), (r, r)))
    wts = field.weights.astype(np.float64)
    out = np.zeros(s_n.shape, dtype=np.float64)
    for p in range(k):
        for q in range(k):
            out += wts[p * k + q] * xp[:, p : p + h, q : q + w]
    return out.astype(F32)


def dwt_haar(s: np.ndarray) -> WaveletQuad:
    """Single-level orthonormal 2-D Haar transform; H and W must be even.

    Bands stay float64 so that a round trip rounds only once.
    """
    s = as_feature_map(s)
    _, h, w = s.shape
    if h % 2 or w % 2:
        raise ShapeError(f"Haar DWT requires even spatial extents, got H={h}, W={w}")
    x = s.astype(np.float64)
    a, b = x[:, 0::2, 0::2], x[:, 0::2, 1::2]
    c, d = x[:, 1::2, 0::2], x[:, 1::2, 1::2]
    return WaveletQuad(
        (a + b + c + d) / 2,
        (a + b - c - d) / 2,
        (a - b + c - d) / 2,
        (a - b - c + d) / 2,
    )


def idwt_haar(q: WaveletQuad) -> np.ndarray:
    ll, lh, hl, hh = (band.astype(np.float64) for band in (q.ll, q.lh, q.hl, q.hh))
    ch, h, w = ll.shape
    out = np.empty((ch, 2 * h, 2 * w), dtype=np.float64)
    out[:, 0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[:, 0::2, 1::2] = (ll + lh - hl - hh) / 2
    out[:, 1::2, 0::2] = (ll - lh + hl - hh) / 2
    out[:, 1::2, 1::2] = (ll - lh - hl + hh) / 2
    return out.astype(F32)


def fuse_level(
    s_n: np.ndarray,
    s_prev: np.ndarray,
    weights: WeightSet,
    k: int = 3,
    prefix: str = "fspe.lowpass",
) -> np.ndarray:
    """Fuse coarse ``s_n`` into the finer ``s_prev`` (twice its extent)."""
    s_n = as_feature_map(s_n, "high-level feature")
    s_prev = as_feature_map(s_prev, "low-level feature")
    c, h, w = s_n.shape
    if s_prev.shape != (c, 2 * h, 2 * w):
        raise ShapeError(
            f"low-level feature must be {c}×{2 * h}×{2 * w} for a {c}×{h}×{w} "
            f"high-level feature, got {'×'.join(map(str, s_prev.shape))}"
        )
    smoothed = apply_lowpass(s_n, predict_lowpass_filters(s_n, weights, k, prefix))
    quad = dwt_haar(s_prev)
    ll_new = quad.ll + smoothed
    rebuilt = idwt_haar(WaveletQuad(ll_new, quad.lh, quad.hl, quad.hh))
    return (rebuilt.astype(np.float64) + s_prev).astype(F32)


def build_pyramid(
    levels: list[np.ndarray], weights: WeightSet, finest_factor: float = 4.0, k: int = 3
) -> Pyramid:
    """Top-down fusion of ``levels`` given coarse → fine.

    The coarsest level passes through; level ``i`` is fused with the already
    fused level above it using the weights under ``fspe.fuse{i}``.
    """
    if len(levels) < 2:
        raise ShapeError(f"pyramid needs at least 2 levels, got {len(levels)}")
    levels = [as_feature_map(x, f"level {i}") for i, x in enumerate(levels)]
    for i in range(1, len(levels)):
        c, h, w = levels[i - 1].shape
        if levels[i].shape != (c, 2 * h, 2 * w):
            raise ShapeError(
                f"level {i} has shape {levels[i].shape}; expected {(c, 2 * h, 2 * w)} "
                f"(each finer level doubles H and W with equal channels)"
            )
    fused = [levels[0]]
    for i in range(1, len(levels)):
        fused.append(fuse_level(fused[-1], levels[i], weights, k, f"fspe.fuse{i - 1}"))
    n = len(levels)
    factors = [finest_factor * 2 ** (n - 1 - i) for i in range(n)]
    return Pyramid(fused, factors)
