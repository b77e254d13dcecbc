"""Acceptance criteria 1-12, each reporting one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (lines are printed even
without ``-s``).
"""

import math
import os
import time

import numpy as np
import pytest

from freqpde.csdp import (
    CsdpConfig,
    attractor_shift,
    categorical_depth,
    cross_view_width_attention,
    csdp_forward,
    csdp_geometry,
    cwa_geometry,
    fuse_depth,
)
from freqpde.fspe import FilterField, apply_lowpass, dwt_haar, idwt_haar, lowpass_geometry, predict_lowpass_filters
from freqpde.geometry import coverage_stats, project, unproject
from freqpde.pipeline import PipelineConfig, run_synthetic_pipeline, synth_cameras, synth_cloud
from freqpde.selftest import random_camera, run_selftest
from freqpde.supervision import SparseDepthTarget, grad_check, normalize_inv_depth, normalize_relative
from freqpde.tensor import seeded_init, softmax


@pytest.fixture
def report(capsys):
    def emit(number, title, passed, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if passed else 'FAIL'} {title}: {detail}")
        assert passed, detail

    return emit


def loop_lowpass(x, wts, k):
    c, h, w = x.shape
    r = k // 2
    out = np.zeros((c, h, w))
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for p in range(-r, r + 1):
                    for q in range(-r, r + 1):
                        if 0 <= i + p < h and 0 <= j + q < w:
                            acc += float(wts[(p + r) * k + (q + r), i, j]) * float(x[ch, i + p, j + q])
                out[ch, i, j] = acc
    return out


def brute_attention(feats, mu, w, prefix):
    c, h, wd = feats[0].shape
    m = math.floor(mu * wd)
    cols = list(range(m)) + list(range(wd - m, wd))
    out = [f.astype(np.float64).copy() for f in feats]

    def lin(name, x):
        return w[f"{prefix}.{name}.weight"].astype(np.float64) @ x + w[f"{prefix}.{name}.bias"]

    for r in range(h):
        toks = [(j, col) for j in range(len(feats)) for col in cols]
        xs = [feats[j][:, r, col].astype(np.float64) for j, col in toks]
        qs, ks, vs = ([lin(n, x) for x in xs] for n in "qkv")
        for t, (j, col) in enumerate(toks):
            scores = [float(qs[t] @ ks[s]) / math.sqrt(c) for s in range(len(toks))]
            mx = max(scores)
            e = [math.exp(s - mx) for s in scores]
            agg = sum((e[s] / sum(e)) * vs[s] for s in range(len(toks)))
            out[j][:, r, col] += lin("o", agg)
    return out


def test_c01_wavelet_roundtrip(report):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        c = int(rng.integers(1, 9))
        h, w = (2 * int(rng.integers(1, 33)) for _ in range(2))
        x = (rng.standard_normal((c, h, w)) * rng.uniform(0.1, 10)).astype(np.float32)
        worst = max(worst, float(np.abs(idwt_haar(dwt_haar(x)).astype(np.float64) - x).max()))
    elapsed = time.perf_counter() - start
    report(1, "wavelet round-trip", worst < 1e-6 and elapsed < 5.0, f"max err {worst:.2e}, {elapsed:.2f}s")


def test_c02_filter_simplex(report):
    rng = np.random.default_rng(2)
    worst_sum, min_tap = 0.0, 1.0
    for seed in range(100):
        x = rng.standard_normal((8, 12, 16)).astype(np.float32) * 4
        f = predict_lowpass_filters(x, seeded_init(seed, lowpass_geometry(8))).weights.astype(np.float64)
        worst_sum = max(worst_sum, float(np.abs(f.sum(axis=0) - 1).max()))
        min_tap = min(min_tap, float(f.min()))
    ok = worst_sum <= 1e-6 and min_tap >= 0
    report(2, "filter-field simplex", ok, f"max |sum-1| {worst_sum:.2e}, min tap {min_tap:.2e}")


def test_c03_lowpass_oracle(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        k = int(rng.choice([3, 5]))
        c, h, w = int(rng.integers(1, 5)), int(rng.integers(2, 10)), int(rng.integers(2, 10))
        x = rng.standard_normal((c, h, w)).astype(np.float32)
        field = FilterField(softmax(rng.standard_normal((k * k, h, w)) * 2, axis=0), k)
        got = apply_lowpass(x, field).astype(np.float64)
        worst = max(worst, float(np.abs(got - loop_lowpass(x, field.weights, k)).max()))
    report(3, "apply_lowpass oracle", worst <= 1e-6, f"max err {worst:.2e}")


def test_c04_attractor_closed_form(report):
    rng = np.random.default_rng(4)
    c = rng.uniform(1, 60, 50)
    fixed = float(np.abs(attractor_shift(c, np.stack([c] * 8), 300.0, 2.0)).max())
    single = float(attractor_shift(np.array([10.0]), np.array([[10.1]]), 300.0, 2.0)[0].item())
    ok = fixed == 0.0 and abs(single - 0.025) <= 1e-9
    report(4, "attractor fixed point and closed form", ok, f"fixed-point |dc| {fixed:.1e}, single {single:.12f}")


def test_c05_depth_contracts(report):
    rng = np.random.default_rng(5)
    worst = 0.0
    midpoint_exact = True
    for _ in range(20):
        nb, h, w = int(rng.integers(2, 17)), int(rng.integers(1, 8)), int(rng.integers(1, 8))
        probs = softmax(rng.standard_normal((nb, h, w)), axis=0)
        bins = np.sort(rng.uniform(1, 61.2, (nb, h, w)), axis=0).astype(np.float32)
        got = categorical_depth(probs, bins)
        oracle = np.zeros((h, w))
        for i in range(h):
            for j in range(w):
                oracle[i, j] = sum(float(probs[b, i, j]) * float(bins[b, i, j]) for b in range(nb))
        worst = max(worst, float(np.abs(got - oracle).max()))
        dc = rng.uniform(1, 61.2, (h, w)).astype(np.float32)
        dr = rng.uniform(1, 61.2, (h, w)).astype(np.float32)
        expect = (dc.astype(np.float64) + dr) / 2
        midpoint_exact &= np.array_equal(fuse_depth(dc, dr, 0.5), expect)
    ok = worst <= 1e-6 and midpoint_exact
    report(5, "categorical expectation and omega midpoint", ok, f"max err {worst:.2e}, midpoint exact {midpoint_exact}")


def test_c06_depth_range(report):
    cfg = CsdpConfig(n_bins=16)
    cams = synth_cameras(3, 64, 128)
    lo, hi = math.inf, -math.inf
    for seed in range(50):
        rng = np.random.default_rng(seed)
        w = seeded_init(seed, csdp_geometry(12, 2, cfg))
        scale = 10.0 ** rng.uniform(-1, 2)
        levels = [[(rng.standard_normal((12, 4 * s, 8 * s)) * scale).astype(np.float32) for _ in cams] for s in (1, 2)]
        for lvl in csdp_forward(levels, cams, cfg, w, [16.0, 8.0]):
            for d in lvl:
                lo, hi = min(lo, float(d.min())), max(hi, float(d.max()))
    ok = lo >= cfg.d_min and hi <= cfg.d_max
    report(6, "depth range", ok, f"observed [{lo:.4f}, {hi:.4f}] within [{cfg.d_min}, {cfg.d_max}]")


def test_c07_cross_view(report):
    rng = np.random.default_rng(7)
    w = seeded_init(7, cwa_geometry(6, "t"))
    feats = [rng.standard_normal((6, 4, 20)).astype(np.float32) for _ in range(3)]
    identity = all(np.array_equal(a, b) for a, b in zip(cross_view_width_attention(feats, 0.0, w, "t"), feats))
    out = cross_view_width_attention(feats, 0.2, w, "t")
    interior = all(np.array_equal(a[:, :, 4:16], b[:, :, 4:16]) for a, b in zip(out, feats))
    pair = feats[:2]
    got = cross_view_width_attention(pair, 0.2, w, "t")
    oracle = brute_attention(pair, 0.2, w, "t")
    err = max(float(np.abs(g - o).max()) for g, o in zip(got, oracle))
    ok = identity and interior and err <= 1e-5
    report(7, "cross-view identity and oracle", ok, f"mu=0 identical {identity}, interior identical {interior}, J=2 err {err:.2e}")


def test_c08_geometry_roundtrip(report):
    rng = np.random.default_rng(8)
    worst_pix = worst_pts = 0.0
    for _ in range(1000):
        cam = random_camera(rng)
        u = rng.uniform(0, cam.width, 16)
        v = rng.uniform(0, cam.height, 16)
        d = rng.uniform(0.5, 80, 16)
        pr = project(unproject(u, v, d, cam), cam)
        worst_pix = max(worst_pix, float(np.abs(np.stack([pr.u - u, pr.v - v, pr.depth - d])).max()))
        pts = unproject(rng.uniform(0, cam.width, 16), rng.uniform(0, cam.height, 16), rng.uniform(0.5, 80, 16), cam)
        pr = project(pts, cam)
        worst_pts = max(worst_pts, float(np.abs(unproject(pr.u, pr.v, pr.depth, cam) - pts).max()))
    ok = worst_pix <= 1e-4 and worst_pts <= 1e-4
    report(8, "projection round-trips", ok, f"pixel-side err {worst_pix:.2e}, point-side err {worst_pts:.2e}")


def test_c09_normalization(report):
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        d = rng.uniform(1, 61.2, (16, 24))
        s, t = 10.0 ** rng.uniform(-3, 3), rng.uniform(-10, 10)
        diff = normalize_inv_depth(d) - normalize_relative(s / d + t)
        worst = max(worst, float(np.abs(diff).max()))
    report(9, "scale/shift normalization equivalence", worst <= 1e-5, f"max err {worst:.2e}")


def test_c10_gradient(report):
    rng = np.random.default_rng(10)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        pred = rng.uniform(2, 40, (8, 8))
        n = int(rng.integers(4, 30))
        flat = rng.choice(64, n, replace=False)
        target = SparseDepthTarget(flat % 8, flat // 8, rng.uniform(2, 40, n).astype(np.float32), 8, 8)
        pseudo = normalize_relative(1.0 / rng.uniform(2, 40, (8, 8)))
        res = grad_check(pred, target, pseudo, rng.uniform(0.1, 2), rng.uniform(0.1, 2))
        worst = max(worst, res["max_rel_error"])
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and elapsed < 10.0
    report(10, "gradient check", ok, f"max rel err {worst:.2e}, {elapsed:.2f}s")


def test_c11_coverage_monotone(report):
    cams = synth_cameras(6, 900, 1600)
    cloud = synth_cloud(30000, 11)
    resolutions = [(112, 200), (224, 400), (448, 800), (896, 1600)]
    zetas = [2.0, 4.0, 8.0, 16.0, 32.0]
    rep = coverage_stats(cloud, cams, resolutions, zetas)
    grid = np.array([[rep.get(r, z) for z in zetas] for r in resolutions])
    in_res = bool(np.all(np.diff(grid, axis=0) <= 0))
    in_zeta = bool(np.all(np.diff(grid, axis=1) >= 0))
    detail = f"res non-increasing {in_res}, zeta non-decreasing {in_zeta}, range [{grid.min():.3f}, {grid.max():.3f}]"
    report(11, "coverage monotonicity", in_res and in_zeta, detail)


def test_c12_determinism(report, monkeypatch):
    lines = []
    for threads in ("1", "4", "8", "1"):
        monkeypatch.setenv("FREQPDE_THREADS", threads)
        lines.append([r.line() for r in run_selftest(0)])
    selftest_same = all(l == lines[0] for l in lines)
    cfg = PipelineConfig()
    timings, digests = [], []
    for threads in (1, 4, 8, 1):
        start = time.perf_counter()
        digests.append(run_synthetic_pipeline(cfg, 64, 176, 12, threads=threads).digest())
        timings.append(time.perf_counter() - start)
    pipeline_same = len(set(digests)) == 1
    ok = selftest_same and pipeline_same and max(timings) < 60.0
    detail = (
        f"selftest identical {selftest_same}, pipeline identical {pipeline_same} "
        f"({digests[0][:12]}), slowest run {max(timings):.2f}s on {os.cpu_count()} cpus"
    )
    report(12, "end-to-end determinism", ok, detail)
