"""``freqpde`` command-line front end.

Every subcommand reads a JSON config (``--config``) and lets flags override
it.  Errors print one line, ``error: <kind>: <message>``, to stderr and exit
with 1 (validation) or 2 (numerical degeneracy).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, FormatError, FreqPDEError, ShapeError
from .geometry import (
    SparseDepthTarget,
    coverage_stats,
    depth_to_pe,
    fuse_features_pe,
    lidar_to_sparse_depth,
    load_calibration,
    load_point_cloud,
    save_calibration,
)
from .pipeline import (
    PipelineConfig,
    csdp_weights,
    fspe_weights,
    pde_weights,
    run_depth,
    run_fspe,
    synth_cameras,
    synth_cloud,
    synth_rig,
    thread_count,
)
from .supervision import grad_check, hybrid_depth_loss, mean_over_levels, normalize_relative
from .tensor import F32, WeightSet, read_tensor, write_tensor

ERROR_KINDS = {
    "ShapeError": "shape",
    "ConfigError": "config",
    "FormatError": "format",
    "DegenerateInputError": "degenerate",
}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _write_json(path: Path, payload: dict) -> None:
    payload = {"version": __version__, **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_manifest(directory: Path) -> dict:
    try:
        return json.loads((directory / "manifest.json").read_text())
    except OSError:
        raise FormatError(f"{directory} has no readable manifest.json") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{directory}/manifest.json is not valid JSON: {exc.msg}") from None


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = dict(
        seed=args.seed,
        init="zeros" if args.zero_weights else None,
        n_levels=getattr(args, "levels", None),
        pe_channels=getattr(args, "channels", None),
        csdp_alpha=getattr(args, "alpha", None),
        csdp_beta=getattr(args, "beta", None),
        csdp_omega=getattr(args, "omega", None),
        csdp_mu=getattr(args, "mu", None),
        csdp_n_bins=getattr(args, "bins", None),
        csdp_n_attractors=getattr(args, "attractors", None),
        csdp_d_min=getattr(args, "d_min", None),
        csdp_d_max=getattr(args, "d_max", None),
        lambda_s=getattr(args, "lambda_s", None),
        lambda_m=getattr(args, "lambda_m", None),
        lambda_1=getattr(args, "lambda_1", None),
        lambda_2=getattr(args, "lambda_2", None),
        lambda_3=getattr(args, "lambda_3", None),
    )
    return cfg.override(**overrides)


def _weights(args, default: WeightSet) -> WeightSet:
    """Seeded weights, with any layers found in ``--weights`` taking precedence."""
    if not getattr(args, "weights", None):
        return default
    loaded = WeightSet.load(args.weights)
    tensors = dict(default.tensors)
    for name, arr in loaded.tensors.items():
        if name in tensors:
            if arr.shape != tensors[name].shape:
                raise ShapeError(f"weight {name!r}: expected shape {tensors[name].shape}, got {arr.shape}")
            tensors[name] = arr
    return WeightSet(tensors, loaded.seed, loaded.scheme)


def _load_levels(paths: list[str]) -> list[np.ndarray]:
    levels = []
    for p in paths:
        t = read_tensor(p)
        if t.ndim == 3:
            t = t[None]
        if t.ndim != 4:
            raise ShapeError(f"{p}: expected C×H×W or J×C×H×W, got shape {t.shape}")
        levels.append(t)
    return levels


def _synth_inputs(dims: list[int], out: Path, finest_factor: float):
    h, w, c, n_levels, n_cam, seed = dims
    rig = synth_rig(h, w, c, n_levels, n_cam, seed)
    cams = synth_cameras(n_cam, int(h * finest_factor), int(w * finest_factor))
    out.mkdir(parents=True, exist_ok=True)
    save_calibration(out / "calib.json", cams)
    return rig, cams


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_fspe(args) -> int:
    out = Path(args.out)
    cfg = _config(args)
    if args.synth:
        rig, _ = _synth_inputs(args.synth, out, args.finest_factor)
    elif args.inputs:
        rig = _load_levels(args.inputs)
    else:
        raise ConfigError("fspe needs --inputs or --synth")
    if len(rig) < 2:
        raise ShapeError("fspe needs at least 2 levels (coarse to fine)")
    for i, lvl in enumerate(rig):
        if lvl.shape[-2] % 2 or lvl.shape[-1] % 2:
            if i > 0:
                raise ShapeError(
                    f"level {i} has odd extent {lvl.shape[-2]}×{lvl.shape[-1]}; "
                    f"Haar DWT requires even-extent inputs"
                )
    channels, n_levels = rig[0].shape[1], len(rig)
    weights = _weights(args, fspe_weights(cfg, channels, n_levels))
    fused = run_fspe(rig, weights, args.finest_factor, cfg.filter_size, thread_count(args.threads))
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, lvl in enumerate(fused):
        name = f"level{i}.fpde"
        write_tensor(out / name, lvl)
        entries.append({"file": name, "shape": list(lvl.shape), "zeta": args.finest_factor * 2 ** (n_levels - 1 - i)})
    _write_json(out / "manifest.json", {"command": "fspe", "seed": cfg.seed, "init": cfg.init, "levels": entries})
    print(f"wrote {len(fused)} levels to {out}")
    return 0


def cmd_depth(args) -> int:
    out = Path(args.out)
    cfg = _config(args)
    if args.synth:
        rig, cams = _synth_inputs(args.synth, out, args.finest_factor)
        n_levels = len(rig)
        pyramid = run_fspe(rig, fspe_weights(cfg, rig[0].shape[1], n_levels), args.finest_factor, cfg.filter_size)
    else:
        if not (args.pyramid and args.calib):
            raise ConfigError("depth needs --pyramid and --calib (or --synth)")
        src = Path(args.pyramid)
        manifest = _read_manifest(src)
        pyramid = _load_levels([str(src / e["file"]) for e in manifest["levels"]])
        cams = load_calibration(args.calib)
    if pyramid[0].shape[0] != len(cams):
        raise ShapeError(f"features hold {pyramid[0].shape[0]} cameras, calibration has {len(cams)}")
    weights = _weights(args, csdp_weights(cfg, pyramid[0].shape[1], len(pyramid)))
    depths = run_depth(pyramid, cams, cfg, weights, thread_count(args.threads))
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, lvl in enumerate(depths):
        for j, d in enumerate(lvl):
            name = f"depth_l{i}_c{j}.fpde"
            write_tensor(out / name, d)
            entries.append({"file": name, "level": i, "camera": j, "shape": list(d.shape)})
    _write_json(
        out / "manifest.json",
        {
            "command": "depth",
            "levels": len(depths),
            "cameras": len(cams),
            "depth_range": [cfg.csdp.d_min, cfg.csdp.d_max],
            "config": cfg.csdp.to_dict(),
            "depths": entries,
        },
    )
    print(f"wrote {len(entries)} depth maps to {out}")
    return 0


def _depth_bundle(directory: Path) -> list[list[np.ndarray]]:
    manifest = _read_manifest(directory)
    n_levels, n_cam = manifest["levels"], manifest["cameras"]
    depths = [[None] * n_cam for _ in range(n_levels)]
    for e in manifest["depths"]:
        depths[e["level"]][e["camera"]] = read_tensor(directory / e["file"])
    return depths


def cmd_pe(args) -> int:
    out = Path(args.out)
    cfg = _config(args)
    if not (args.depth and args.calib):
        raise ConfigError("pe needs --depth and --calib")
    depths = _depth_bundle(Path(args.depth))
    cams = load_calibration(args.calib)
    if len(depths[0]) != len(cams):
        raise ShapeError(f"depth bundle holds {len(depths[0])} cameras, calibration has {len(cams)}")
    features = None
    if args.features and not args.pe_only:
        src = Path(args.features)
        manifest = _read_manifest(src)
        features = _load_levels([str(src / e["file"]) for e in manifest["levels"]])
        c = features[0].shape[1]
        if args.channels is not None and args.channels != c:
            raise ConfigError(f"--channels {args.channels} differs from feature channels {c}")
        cfg = cfg.override(pe_channels=c)
    weights = _weights(args, pde_weights(cfg, cfg.pe_channels))
    out.mkdir(parents=True, exist_ok=True)
    targets = range(len(depths)) if args.all_levels else [len(depths) - 1]
    written = []
    for i in targets:
        tag = f"l{i}_" if args.all_levels else ""
        for j, cam in enumerate(cams):
            pe = depth_to_pe(
                [lvl[j] for lvl in depths[: i + 1]], cam, cfg.pe_channels, weights, cfg.pos_range, cfg.temperature
            )
            write_tensor(out / f"pe_{tag}c{j}.fpde", pe)
            written.append(f"pe_{tag}c{j}.fpde")
            if features is not None:
                f = features[i][j]
                if f.shape != pe.shape:
                    raise ShapeError(f"level {i} features {f.shape} do not match embedding {pe.shape}")
                write_tensor(out / f"f3d_{tag}c{j}.fpde", fuse_features_pe(f, pe))
                written.append(f"f3d_{tag}c{j}.fpde")
    _write_json(out / "manifest.json", {"command": "pe", "channels": cfg.pe_channels, "files": written})
    print(f"wrote {len(written)} files to {out}")
    return 0


def _cloud(args) -> np.ndarray:
    if args.cloud:
        return load_point_cloud(args.cloud)
    if args.synth_cloud:
        return synth_cloud(args.synth_cloud, args.seed or 0)
    raise ConfigError("need --cloud or --synth-cloud")


def _parse_resolutions(values: list[str]) -> list[tuple[int, int]]:
    out = []
    for v in values:
        try:
            h, w = v.lower().split("x")
            out.append((int(h), int(w)))
        except ValueError:
            raise ConfigError(f"resolution must look like HxW, got {v!r}") from None
    return out


def cmd_project(args) -> int:
    out = Path(args.out)
    points = _cloud(args)
    cams = load_calibration(args.calib)
    out.mkdir(parents=True, exist_ok=True)
    counts = []
    for j, cam in enumerate(cams):
        if args.grid:
            gh, gw = args.grid
        else:
            gh, gw = int(cam.height // args.zeta), int(cam.width // args.zeta)
        target = lidar_to_sparse_depth(points, cam, gh, gw, args.zeta)
        target.save(out / f"target_c{j}.json")
        counts.append(len(target))
    resolutions = _parse_resolutions(args.coverage_res) if args.coverage_res else [(cams[0].height, cams[0].width)]
    zetas = args.coverage_zeta or [args.zeta]
    report = coverage_stats(points, cams, resolutions, zetas)
    (out / "coverage.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    _write_json(out / "manifest.json", {"command": "project", "points": int(len(points)), "entries_per_camera": counts})
    print(f"projected {len(points)} points; entries per camera: {counts}")
    return 0


def cmd_coverage(args) -> int:
    points = _cloud(args)
    cams = load_calibration(args.calib)
    report = coverage_stats(points, cams, _parse_resolutions(args.resolutions), args.zetas)
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _random_loss_instance(h: int, w: int, seed: int):
    """Random prediction with sparse targets kept away from the smooth-L1 kink."""
    rng = np.random.default_rng(seed)
    pred = rng.uniform(2.0, 40.0, (h, w)).astype(F32)
    n = max(1, (h * w) // 4)
    cells = rng.choice(h * w, size=n, replace=False)
    cells.sort()
    v, u = np.divmod(cells, w)
    sign = rng.choice([-1.0, 1.0], size=n)
    gap = np.where(rng.random(n) < 0.5, rng.uniform(0.05, 0.9, n), rng.uniform(1.1, 3.0, n))
    depth = np.maximum(pred[v, u] + sign * gap, 0.5).astype(F32)
    target = SparseDepthTarget(u, v, depth, h, w)
    pseudo = 1.0 / rng.uniform(2.0, 40.0, (h, w))
    return pred, target, pseudo


def cmd_loss(args) -> int:
    cfg = _config(args)
    lam_s, lam_m = cfg.lambda_s, cfg.lambda_m
    if args.random:
        h, w = args.random
        pred, target, pseudo = _random_loss_instance(h, w, cfg.seed)
        instances = [(pred, target, normalize_relative(pseudo))]
    else:
        preds = args.pred or []
        if not preds:
            raise ConfigError("loss needs --pred (or --random H W)")
        targets = args.target or []
        pseudos = args.pseudo or []
        if lam_s != 0 and len(targets) != len(preds):
            raise ConfigError(f"{len(preds)} prediction(s) but {len(targets)} sparse target(s)")
        if lam_m != 0 and len(pseudos) != len(preds):
            raise ConfigError(f"lambda_m={lam_m} needs one --pseudo map per prediction; got {len(pseudos)}")
        instances = []
        for k, p in enumerate(preds):
            pred = read_tensor(p)
            if pred.ndim != 2:
                raise ShapeError(f"{p}: prediction must be H×W, got {pred.shape}")
            target = SparseDepthTarget.load(targets[k]) if k < len(targets) else None
            pseudo = None
            if k < len(pseudos):
                if not Path(pseudos[k]).exists():
                    raise FormatError(f"pseudo depth map {pseudos[k]} does not exist")
                pseudo = normalize_relative(read_tensor(pseudos[k]))
            instances.append((pred, target, pseudo))

    reports = [hybrid_depth_loss(p, t, q, lam_s, lam_m) for p, t, q in instances]
    combined = mean_over_levels(reports) if len(reports) > 1 else reports[0]
    final = combined.with_total(args.samp, args.reg, cfg.lambda_1, cfg.lambda_2, cfg.lambda_3)
    payload = {"command": "loss", "loss": final.to_dict(), "reduction": "mean" if len(reports) > 1 else "single"}
    if len(reports) > 1:
        payload["per_level"] = [r.to_dict() for r in reports]
    if args.grad_check:
        checks = [grad_check(p, t, q, lam_s, lam_m) for p, t, q in instances]
        payload["grad_check"] = {
            "max_rel_error": max(c["max_rel_error"] for c in checks),
            "max_abs_error": max(c["max_abs_error"] for c in checks),
            "step": checks[0]["step"],
            "instances": len(checks),
        }
    text = json.dumps({"version": __version__, **payload}, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(args.seed if args.seed is not None else 0)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return 0 if not failed else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON; flags override it")
    p.add_argument("--seed", type=int, help="weight / synthetic-data seed")
    p.add_argument("--zero-weights", action="store_true", help="use all-zero weights instead of seeded init")
    p.add_argument("--weights", help="weight directory written by WeightSet.save (overrides seeded layers)")
    p.add_argument("--threads", type=int, help="parallelism cap (default: $FREQPDE_THREADS or 1)")


def _synth_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--synth", nargs=6, type=int, metavar=("H", "W", "C", "LEVELS", "J", "SEED"),
        help="generate synthetic rig features (H×W is the finest grid) and a matching calibration",
    )
    p.add_argument("--finest-factor", type=float, default=4.0, help="downsampling factor of the finest level")


def _depth_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--omega", type=float)
    p.add_argument("--mu", type=float, help="cross-view mask ratio")
    p.add_argument("--bins", type=int)
    p.add_argument("--attractors", type=int)
    p.add_argument("--d-min", type=float)
    p.add_argument("--d-max", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freqpde", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"freqpde {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fspe", help="frequency-aware pyramid fusion")
    _common(p)
    _synth_flag(p)
    p.add_argument("--inputs", nargs="+", help="level tensors, coarse to fine (C×H×W or J×C×H×W)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fspe)

    p = sub.add_parser("depth", help="hierarchical multi-view depth prediction")
    _common(p)
    _synth_flag(p)
    _depth_flags(p)
    p.add_argument("--pyramid", help="directory written by `fspe`")
    p.add_argument("--calib", help="calibration JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_depth)

    p = sub.add_parser("pe", help="positional depth embedding and feature fusion")
    _common(p)
    p.add_argument("--depth", help="directory written by `depth`")
    p.add_argument("--calib", help="calibration JSON")
    p.add_argument("--features", help="pyramid directory; enables F + PE output")
    p.add_argument("--channels", type=int, help="embedding channels (multiple of 6)")
    p.add_argument("--pe-only", action="store_true", help="write embeddings only")
    p.add_argument("--all-levels", action="store_true", help="embed every level instead of only the finest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pe)

    p = sub.add_parser("project", help="LiDAR to sparse depth targets plus coverage")
    _common(p)
    p.add_argument("--cloud", help="CSV point cloud, one x,y,z per line")
    p.add_argument("--synth-cloud", type=int, metavar="N", help="generate N random points instead")
    p.add_argument("--calib", required=True)
    p.add_argument("--zeta", type=float, default=1.0, help="downsampling factor of the target grid")
    p.add_argument("--grid", nargs=2, type=int, metavar=("H", "W"), help="explicit target grid")
    p.add_argument("--coverage-res", nargs="+", metavar="HxW")
    p.add_argument("--coverage-zeta", nargs="+", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("coverage", help="projected-point coverage over resolutions and factors")
    _common(p)
    p.add_argument("--cloud")
    p.add_argument("--synth-cloud", type=int, metavar="N")
    p.add_argument("--calib", required=True)
    p.add_argument("--resolutions", nargs="+", required=True, metavar="HxW")
    p.add_argument("--zetas", nargs="+", type=float, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("loss", help="hybrid depth loss report")
    _common(p)
    p.add_argument("--pred", action="append", help="H×W depth tensor (repeat once per level)")
    p.add_argument("--target", action="append", help="sparse target JSON (one per --pred)")
    p.add_argument("--pseudo", action="append", help="raw relative depth tensor (one per --pred)")
    p.add_argument("--random", nargs=2, type=int, metavar=("H", "W"), help="use a random instance")
    p.add_argument("--lambda-s", type=float)
    p.add_argument("--lambda-m", type=float)
    p.add_argument("--lambda-1", type=float)
    p.add_argument("--lambda-2", type=float)
    p.add_argument("--lambda-3", type=float)
    p.add_argument("--samp", type=float, default=0.0, help="external sampling loss term")
    p.add_argument("--reg", type=float, default=0.0, help="external box regression loss term")
    p.add_argument("--grad-check", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("selftest", help="run the property suite on generated instances")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FreqPDEError as exc:
        kind = ERROR_KINDS.get(type(exc).__name__, "error")
        msg = " ".join(str(exc).split())
        print(f"error: {kind}: {msg}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
