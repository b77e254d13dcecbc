"""Hybrid depth supervision: sparse metric loss, dense relative loss, gradients.

All reductions run in float64.  The relative term compares the mean-variance
normalized inverse of the prediction with a likewise normalized pseudo map,
which makes it blind to any per-sample scale and shift of inverse depth.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .geometry import SparseDepthTarget

VAR_FLOOR = 1e-12


def _standardize(x: np.ndarray) -> tuple[np.ndarray, float]:
    if x.size < 2:
        raise DegenerateInputError("normalization needs at least 2 pixels")
    mean = x.mean()
    var = np.mean((x - mean) ** 2)
    if not var > VAR_FLOOR:
        raise DegenerateInputError(f"zero variance: field is constant (variance {var:.3g})")
    std = math.sqrt(var)
    return (x - mean) / std, std


def normalize_inv_depth(depth: np.ndarray) -> np.ndarray:
    """(1/D − mean) / std with population variance, computed in float64."""
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise DegenerateInputError("depth must be strictly positive before taking its reciprocal")
    z, _ = _standardize(1.0 / d)
    return z


def normalize_relative(rel: np.ndarray) -> np.ndarray:
    """Mean-variance normalize an already-inverse relative depth map (pseudo labels)."""
    z, _ = _standardize(np.asarray(rel, dtype=np.float64))
    return z


def _target_diffs(pred: np.ndarray, target: SparseDepthTarget) -> np.ndarray:
    if pred.shape != (target.height, target.width):
        raise ShapeError(f"prediction grid {pred.shape} differs from target grid {(target.height, target.width)}")
    if len(target) == 0:
        raise ShapeError("sparse depth target is empty")
    return pred[target.v, target.u].astype(np.float64) - target.depth.astype(np.float64)


def smooth_l1_sparse(pred: np.ndarray, target: SparseDepthTarget) -> float:
    x = _target_diffs(np.asarray(pred), target)
    ax = np.abs(x)
    return float(np.mean(np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)))


def mse_rel(pred_rel: np.ndarray, pseudo_rel: np.ndarray) -> float:
    a = np.asarray(pred_rel, dtype=np.float64)
    b = np.asarray(pseudo_rel, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"relative maps differ in shape: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


@dataclass
class LossReport:
    l_s: float
    l_m: float
    l_depth: float
    lambda_s: float = 1.0
    lambda_m: float = 1.0
    l_samp: float | None = None
    l_reg: float | None = None
    l_total: float | None = None
    lambda_1: float = 1.0
    lambda_2: float = 0.5
    lambda_3: float = 1.0

    def with_total(self, l_samp: float = 0.0, l_reg: float = 0.0, lambda_1=1.0, lambda_2=0.5, lambda_3=1.0) -> "LossReport":
        total = total_loss(self.l_depth, l_samp, l_reg, lambda_1, lambda_2, lambda_3)
        return LossReport(
            self.l_s, self.l_m, self.l_depth, self.lambda_s, self.lambda_m,
            l_samp, l_reg, total, lambda_1, lambda_2, lambda_3,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def hybrid_depth_loss(
    pred: np.ndarray,
    target: SparseDepthTarget | None,
    pseudo_rel: np.ndarray | None,
    lambda_s: float = 1.0,
    lambda_m: float = 1.0,
) -> LossReport:
    """λ_s·smooth-L1 on LiDAR pixels + λ_m·MSE on normalized inverse depth.

    A term whose weight is zero may have its input omitted (``None``).
    ``pseudo_rel`` must already be normalized (see :func:`normalize_relative`).
    """
    pred = np.asarray(pred)
    if target is not None:
        l_s = smooth_l1_sparse(pred, target)
    elif lambda_s != 0:
        raise ShapeError("sparse depth target is required when lambda_s is non-zero")
    else:
        l_s = 0.0
    if lambda_m != 0 or pseudo_rel is not None:
        if pseudo_rel is None:
            raise ShapeError("pseudo relative depth is required when lambda_m is non-zero")
        l_m = mse_rel(normalize_inv_depth(pred), pseudo_rel)
    else:
        l_m = 0.0
    return LossReport(l_s, l_m, lambda_s * l_s + lambda_m * l_m, lambda_s, lambda_m)


def total_loss(l_depth: float, l_samp: float, l_reg: float, lambda_1=1.0, lambda_2=0.5, lambda_3=1.0) -> float:
    terms = (l_depth, l_samp, l_reg, lambda_1, lambda_2, lambda_3)
    if not all(math.isfinite(t) for t in terms):
        raise ValueError(f"loss terms and weights must be finite, got {terms}")
    return lambda_1 * l_depth + lambda_2 * l_samp + lambda_3 * l_reg


def mean_over_levels(reports: Sequence[LossReport]) -> LossReport:
    """Unweighted mean of per-level reports."""
    if not reports:
        raise ShapeError("no per-level loss reports to average")
    n = len(reports)
    first = reports[0]
    return LossReport(
        sum(r.l_s for r in reports) / n,
        sum(r.l_m for r in reports) / n,
        sum(r.l_depth for r in reports) / n,
        first.lambda_s,
        first.lambda_m,
    )


def depth_loss_grad(
    pred: np.ndarray,
    target: SparseDepthTarget | None,
    pseudo_rel: np.ndarray | None,
    lambda_s: float = 1.0,
    lambda_m: float = 1.0,
) -> np.ndarray:
    """Analytic ∂L_depth/∂pred (float64, H×W)."""
    d = np.asarray(pred, dtype=np.float64)
    grad = np.zeros_like(d)
    if lambda_s != 0:
        if target is None:
            raise ShapeError("sparse depth target is required when lambda_s is non-zero")
        x = _target_diffs(d, target)
        g = np.where(np.abs(x) < 1.0, x, np.sign(x)) / len(x)
        np.add.at(grad, (target.v, target.u), lambda_s * g)
    if lambda_m != 0:
        if pseudo_rel is None:
            raise ShapeError("pseudo relative depth is required when lambda_m is non-zero")
        q = np.asarray(pseudo_rel, dtype=np.float64)
        if q.shape != d.shape:
            raise ShapeError(f"relative maps differ in shape: {d.shape} vs {q.shape}")
        if np.any(d <= 0):
            raise DegenerateInputError("depth must be strictly positive before taking its reciprocal")
        r = 1.0 / d
        z, std = _standardize(r)
        g_z = 2.0 * lambda_m * (z - q) / d.size
        # backprop through z = (r - mean r) / std with population std
        g_r = (g_z - g_z.mean() - z * np.mean(g_z * z)) / std
        grad += g_r * (-r * r)
    return grad


def finite_difference_grad(
    pred: np.ndarray,
    target: SparseDepthTarget | None,
    pseudo_rel: np.ndarray | None,
    lambda_s: float = 1.0,
    lambda_m: float = 1.0,
    h: float = 1e-3,
) -> np.ndarray:
    """Central differences of the float64 loss, one pixel at a time."""
    d = np.asarray(pred, dtype=np.float64)

    def loss(x):
        total = 0.0
        if lambda_s != 0:
            diff = x[target.v, target.u] - target.depth.astype(np.float64)
            ad = np.abs(diff)
            total += lambda_s * np.mean(np.where(ad < 1.0, 0.5 * diff * diff, ad - 0.5))
        if lambda_m != 0:
            r = 1.0 / x
            z = (r - r.mean()) / np.sqrt(np.mean((r - r.mean()) ** 2))
            total += lambda_m * np.mean((z - pseudo_rel) ** 2)
        return total

    grad = np.zeros_like(d)
    for idx in np.ndindex(d.shape):
        up, down = d.copy(), d.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (loss(up) - loss(down)) / (2 * h)
    return grad


def grad_check(
    pred: np.ndarray,
    target: SparseDepthTarget | None,
    pseudo_rel: np.ndarray | None,
    lambda_s: float = 1.0,
    lambda_m: float = 1.0,
    h: float = 1e-3,
) -> dict:
    """Compare analytic and finite-difference gradients.

    Relative error per pixel is ``|a − f| / max(|a|, |f|, floor)`` where the
    floor is 1e-3 of the largest gradient magnitude, so pixels whose true
    gradient is essentially zero are judged on an absolute scale.
    """
    a = depth_loss_grad(pred, target, pseudo_rel, lambda_s, lambda_m)
    f = finite_difference_grad(pred, target, pseudo_rel, lambda_s, lambda_m, h)
    scale = max(np.abs(a).max(), np.abs(f).max(), 1e-300)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-3 * scale)
    rel = np.abs(a - f) / denom
    return {
        "max_rel_error": float(rel.max()),
        "max_abs_error": float(np.abs(a - f).max()),
        "step": h,
        "pixels": int(a.size),
    }
