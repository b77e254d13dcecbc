"""Property suite behind ``freqpde selftest``.

Each check draws its own instance from a generator seeded by (seed, index),
so the report is a pure function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .csdp import (
    CsdpConfig,
    attractor_shift,
    categorical_depth,
    cross_view_width_attention,
    csdp_forward,
    csdp_geometry,
    cwa_geometry,
    init_bins,
    refine_with_attractors,
)
from .fspe import (
    FilterField,
    apply_lowpass,
    build_pyramid,
    dwt_haar,
    fuse_level,
    idwt_haar,
    lowpass_geometry,
    predict_lowpass_filters,
    pyramid_geometry,
)
from .geometry import CameraModel, SparseDepthTarget, coverage_stats, lidar_to_sparse_depth, project, sine_embed, unproject
from .pipeline import synth_cameras, synth_cloud
from .supervision import depth_loss_grad, finite_difference_grad, hybrid_depth_loss, normalize_inv_depth, normalize_relative
from .tensor import F32, conv2d_3x3, dense, seeded_init, softmax, tensor_from_bytes, tensor_to_bytes, zero_init


@dataclass(frozen=True)
class PropertyResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng: np.random.Generator) -> CameraModel:
    e = np.eye(4)
    e[:3, :3] = random_rotation(rng)
    e[:3, 3] = rng.uniform(-2, 2, 3)
    w, h = int(rng.integers(64, 1600)), int(rng.integers(64, 900))
    return CameraModel(
        float(rng.uniform(100, 1500)), float(rng.uniform(100, 1500)),
        float(rng.uniform(0, w)), float(rng.uniform(0, h)), w, h, e,
    )


def _wavelet_roundtrip(rng):
    err = 0.0
    for _ in range(10):
        c, h, w = rng.integers(1, 5), 2 * rng.integers(1, 17), 2 * rng.integers(1, 17)
        x = rng.standard_normal((c, h, w)).astype(F32)
        err = max(err, float(np.abs(idwt_haar(dwt_haar(x)) - x).max()))
    return err < 1e-6, f"max round-trip error {err:.2e} < 1e-6"


def _wavelet_energy(rng):
    x = rng.standard_normal((3, 16, 16)).astype(F32)
    q = dwt_haar(x)
    bands = sum(float(np.sum(b.astype(np.float64) ** 2)) for b in (q.ll, q.lh, q.hl, q.hh))
    gap = abs(bands - float(np.sum(x.astype(np.float64) ** 2)))
    return gap < 1e-4 * max(1.0, bands), f"energy gap {gap:.2e}"


def _filter_simplex(rng):
    worst = 0.0
    neg = 0.0
    for s in range(10):
        w = seeded_init(int(rng.integers(1 << 30)), lowpass_geometry(4))
        x = (rng.standard_normal((4, 6, 6)) * 3).astype(F32)
        f = predict_lowpass_filters(x, w).weights.astype(np.float64)
        worst = max(worst, float(np.abs(f.sum(axis=0) - 1).max()))
        neg = min(neg, float(f.min()))
    return worst <= 1e-6 and neg >= 0, f"max |sum-1| {worst:.2e}, min weight {neg:.1e}"


def _lowpass_convex(rng):
    x = rng.standard_normal((3, 8, 8)).astype(F32)
    logits = rng.standard_normal((9, 8, 8))
    field = FilterField(softmax(logits, axis=0))
    y = apply_lowpass(x, field)
    interior_in = np.abs(x).max(axis=(1, 2))
    interior_out = np.abs(y[:, 1:-1, 1:-1]).max(axis=(1, 2))
    ok = bool(np.all(interior_out <= interior_in + 1e-6))
    return ok, "interior max-abs never amplified"


def _fuse_zero_injection(rng):
    s_prev = rng.standard_normal((2, 8, 8)).astype(F32)
    out = fuse_level(np.zeros((2, 4, 4), F32), s_prev, zero_init(lowpass_geometry(2)))
    err = float(np.abs(out - 2 * s_prev).max())
    return err < 1e-6, f"|fuse - 2*S_prev| max {err:.2e}"


def _pyramid_shapes(rng):
    levels = [rng.standard_normal((4, 4 * 2**i, 6 * 2**i)).astype(F32) for i in range(3)]
    pyr = build_pyramid(levels, seeded_init(int(rng.integers(1 << 30)), pyramid_geometry(4, 3)))
    ok = [a.shape for a in pyr.levels] == [a.shape for a in levels]
    return ok, "fused shapes equal input shapes"


def _conv_linear(rng):
    k = rng.standard_normal((3, 2, 3, 3)).astype(F32)
    zero = np.zeros(3, F32)
    x, y = rng.standard_normal((2, 2, 5, 5)).astype(F32)
    a, b = 1.7, -0.6
    lhs = conv2d_3x3(a * x + b * y, k, zero)
    rhs = a * conv2d_3x3(x, k, zero) + b * conv2d_3x3(y, k, zero)
    err = float(np.abs(lhs - rhs).max())
    return err < 1e-5, f"linearity error {err:.2e}"


def _softmax_shift(rng):
    x = rng.standard_normal((5, 7))
    p, q = softmax(x, axis=1), softmax(x + 1000.0, axis=1)
    err = float(np.abs(p.astype(np.float64).sum(axis=1) - 1).max())
    return err <= 1e-6 and np.array_equal(p, q), f"row-sum error {err:.2e}, shift invariant"


def _container_roundtrip(rng):
    x = rng.standard_normal((2, 3, 4)).astype(F32)
    raw = tensor_to_bytes(x)
    ok = tensor_to_bytes(tensor_from_bytes(raw)) == raw
    return ok, "write/read/write is byte-identical"


def _attractor_fixed_point(rng):
    c = rng.uniform(1, 60, (6, 3, 3))
    shift = attractor_shift(c[2:3], np.repeat(c[2:3], 4, axis=0), 300.0, 2.0)
    closed = float(attractor_shift(np.array([1.0]), np.array([1.1]), 300.0, 2.0)[0])
    ok = float(np.abs(shift).max()) == 0.0 and abs(closed - 0.025) < 1e-9
    return ok, f"fixed-point shift 0, single-attractor shift {closed:.12f}"


def _bins_monotone(rng):
    cfg = CsdpConfig(n_bins=16, n_attractors=4)
    f = rng.standard_normal((6, 4, 4)).astype(F32)
    w = seeded_init(int(rng.integers(1 << 30)), dense("b", 6, 16))
    bins = init_bins(f, cfg.d_min, cfg.d_max, w, "b")
    p = rng.uniform(cfg.d_min, cfg.d_max, (4, 4, 4))
    refined = refine_with_attractors(bins, p, cfg)
    ok = all(
        bool(np.all(np.diff(b.astype(np.float64), axis=0) >= 0)) and b.min() >= cfg.d_min and b.max() <= cfg.d_max
        for b in (bins, refined)
    )
    return ok, "bins sorted and in range before and after refinement"


def _categorical_monotone(rng):
    bins = np.sort(rng.uniform(1, 60, (8, 1, 1)), axis=0).astype(F32)
    p = rng.dirichlet(np.ones(8)).reshape(8, 1, 1)
    moved = p.copy()
    delta = min(0.1, float(p[2, 0, 0]))
    moved[2] -= delta
    moved[6] += delta
    ok = float(categorical_depth(moved, bins)[0, 0]) >= float(categorical_depth(p, bins)[0, 0])
    return ok, "mass moved to a larger bin never lowers depth"


def _cwa_bands(rng):
    feats = [rng.standard_normal((4, 3, 10)).astype(F32) for _ in range(3)]
    w = seeded_init(int(rng.integers(1 << 30)), cwa_geometry(4, "a"))
    ident = cross_view_width_attention(feats, 0.0, w, "a")
    out = cross_view_width_attention(feats, 0.2, w, "a")
    ok = all(np.array_equal(a, b) for a, b in zip(ident, feats))
    ok &= all(np.array_equal(o[:, :, 2:8], f[:, :, 2:8]) for o, f in zip(out, feats))
    return ok, "mu=0 identity; interior columns untouched at mu=0.2"


def _depth_range(rng):
    cfg = CsdpConfig(n_bins=16, n_attractors=4)
    cams = synth_cameras(3, 64, 128)
    levels = [[rng.standard_normal((6, 4 * 2**i, 8 * 2**i)).astype(F32) * 4 for _ in cams] for i in range(2)]
    w = seeded_init(int(rng.integers(1 << 30)), csdp_geometry(6, 2, cfg))
    out = csdp_forward(levels, cams, cfg, w, [16.0, 8.0])
    lo = min(float(d.min()) for lvl in out for d in lvl)
    hi = max(float(d.max()) for lvl in out for d in lvl)
    return cfg.d_min <= lo and hi <= cfg.d_max, f"depth within [{lo:.3f}, {hi:.3f}]"


def _camera_roundtrip(rng):
    worst = 0.0
    for _ in range(50):
        cam = random_camera(rng)
        u, v, d = rng.uniform(0, cam.width), rng.uniform(0, cam.height), rng.uniform(0.1, 100)
        pr = project(unproject(u, v, d, cam), cam)
        worst = max(worst, abs(float(pr.u) - u), abs(float(pr.v) - v), abs(float(pr.depth) - d))
    return worst < 1e-4, f"max pixel/depth error {worst:.2e}"


def _behind_camera(rng):
    cam = CameraModel(100, 100, 50, 50, 100, 100)
    pr = project(np.array([0.3, -0.2, -1.0]), cam)
    return not bool(pr.in_front), "point with negative camera z is flagged"


def _sparse_min_merge(rng):
    cam = CameraModel(100, 100, 50, 50, 100, 100)
    pts = np.array([[0, 0, 7.0], [0, 0, 4.0], [0.001, 0, 9.0]])
    t = lidar_to_sparse_depth(pts, cam, 100, 100, 1.0)
    ok = len(t) == 1 and float(t.depth[0]) == 4.0 and (int(t.u[0]), int(t.v[0])) == (50, 50)
    return ok, "collisions keep the nearest depth"


def _coverage_monotone(rng):
    cams = synth_cameras(6, 256, 704)
    cloud = synth_cloud(4000, int(rng.integers(1 << 30)))
    rep = coverage_stats(cloud, cams, [(256, 704), (512, 1408)], [4, 8, 16])
    ok = True
    for res in [(256, 704), (512, 1408)]:
        vals = [rep.get(res, z) for z in (4, 8, 16)]
        ok &= vals[0] <= vals[1] <= vals[2]
    for z in (4, 8, 16):
        ok &= rep.get((512, 1408), z) <= rep.get((256, 704), z)
    return ok, "non-decreasing in zeta, non-increasing in resolution"


def _sine_distinct(rng):
    p = rng.uniform(-50, 50, 3)
    step = rng.standard_normal(3)
    q = p + step / np.linalg.norm(step)
    a, b = sine_embed(p, 24), sine_embed(q, 24)
    ok = not np.allclose(a, b) and float(np.abs(a).max()) <= 1.0
    return ok, "points 1 m apart embed differently; values in [-1, 1]"


def _normalization(rng):
    d = rng.uniform(1, 60, (6, 6))
    z = normalize_inv_depth(d)
    s, t = rng.uniform(0.1, 10), rng.uniform(-1, 1)
    rel = s * (1 / d) + t
    err = float(np.abs(normalize_relative(rel) - z).max())
    ok = abs(z.mean()) < 1e-5 and abs(z.var() - 1) < 1e-4 and err < 1e-5
    return ok, f"mean/var normalized; scale-shift equivalence error {err:.2e}"


def _gradient(rng):
    h, w = 4, 4
    pred = rng.uniform(2, 40, (h, w))
    u, v = np.array([0, 2, 3]), np.array([0, 1, 3])
    gaps = np.array([0.4, -2.5, 1.6])
    target = SparseDepthTarget(u, v, (pred[v, u] + gaps).astype(F32), h, w)
    pseudo = normalize_relative(1 / rng.uniform(2, 40, (h, w)))
    a = depth_loss_grad(pred, target, pseudo)
    f = finite_difference_grad(pred, target, pseudo)
    rel = float((np.abs(a - f) / np.maximum(np.abs(f), 1e-3 * np.abs(f).max())).max())
    return rel < 1e-3, f"max relative error {rel:.2e}"


def _loss_nonneg(rng):
    d = rng.uniform(1, 60, (5, 5))
    t = SparseDepthTarget(np.array([1]), np.array([2]), np.array([d[2, 1]], F32), 5, 5)
    exact = hybrid_depth_loss(d, t, normalize_inv_depth(d))
    noisy = hybrid_depth_loss(d, t, normalize_relative(rng.standard_normal((5, 5))))
    ok = exact.l_depth < 1e-6 and noisy.l_depth > 0
    return ok, f"exact loss {exact.l_depth:.1e}, perturbed loss positive"


PROPERTIES: list[tuple[str, Callable]] = [
    ("wavelet_perfect_reconstruction", _wavelet_roundtrip),
    ("wavelet_energy_preservation", _wavelet_energy),
    ("filter_field_simplex", _filter_simplex),
    ("lowpass_convex_bound", _lowpass_convex),
    ("fuse_zero_injection_doubles", _fuse_zero_injection),
    ("pyramid_shape_preservation", _pyramid_shapes),
    ("conv_linearity", _conv_linear),
    ("softmax_normalized_shift_invariant", _softmax_shift),
    ("container_byte_roundtrip", _container_roundtrip),
    ("attractor_fixed_point_and_closed_form", _attractor_fixed_point),
    ("bin_monotonicity", _bins_monotone),
    ("categorical_depth_monotone", _categorical_monotone),
    ("width_attention_bands", _cwa_bands),
    ("depth_within_range", _depth_range),
    ("camera_roundtrip", _camera_roundtrip),
    ("behind_camera_flag", _behind_camera),
    ("sparse_target_min_merge", _sparse_min_merge),
    ("coverage_monotonicity", _coverage_monotone),
    ("sine_embedding_distinct_bounded", _sine_distinct),
    ("normalization_scale_shift_equivalence", _normalization),
    ("loss_gradient_finite_difference", _gradient),
    ("hybrid_loss_nonnegative_zero_at_optimum", _loss_nonneg),
]


def run_selftest(seed: int = 0) -> list[PropertyResult]:
    results = []
    for i, (name, check) in enumerate(PROPERTIES):
        rng = np.random.default_rng([seed, i])
        try:
            passed, detail = check(rng)
        except Exception as exc:  # a crash is a failed property, not a crashed run
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(PropertyResult(name, bool(passed), detail))
    return results
