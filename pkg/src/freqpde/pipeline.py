"""Configuration, synthetic inputs and end-to-end orchestration."""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .csdp import CsdpConfig, csdp_forward, csdp_geometry
from .errors import ConfigError, FormatError
from .fspe import build_pyramid, pyramid_geometry
from .geometry import CameraModel, PositionRange, depth_to_pe, fuse_features_pe, pe_geometry
from .tensor import F32, WeightSet, seeded_init, tensor_to_bytes, zero_init

THREADS_ENV = "FREQPDE_THREADS"


def thread_count(explicit: int | None = None) -> int:
    if explicit is not None:
        return max(1, int(explicit))
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


@dataclass(frozen=True)
class PipelineConfig:
    csdp: CsdpConfig = field(default_factory=CsdpConfig)
    pe_channels: int = 12
    pos_range: PositionRange = field(default_factory=PositionRange)
    temperature: float = 10000.0
    n_levels: int = 3
    n_cameras: int = 6
    filter_size: int = 3
    seed: int = 0
    init: str = "xavier"
    lambda_s: float = 1.0
    lambda_m: float = 1.0
    lambda_1: float = 1.0
    lambda_2: float = 0.5
    lambda_3: float = 1.0

    def __post_init__(self):
        if self.pe_channels < 6 or self.pe_channels % 6:
            raise ConfigError(f"PE channel count must be a positive multiple of 6, got {self.pe_channels}")
        if self.n_levels < 1 or self.n_cameras < 1:
            raise ConfigError("level and camera counts must be >= 1")
        if self.init not in ("xavier", "zeros"):
            raise ConfigError(f"init must be 'xavier' or 'zeros', got {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        d.pop("version", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "csdp" in d:
                d["csdp"] = CsdpConfig(**d["csdp"])
            if "pos_range" in d:
                d["pos_range"] = PositionRange(**{k: tuple(v) for k, v in d["pos_range"].items()})
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise FormatError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"config {path} is not valid JSON: {exc.msg}") from None

    def override(self, **kw) -> "PipelineConfig":
        """Apply non-None overrides; keys prefixed ``csdp_`` go to the depth config."""
        top, sub = {}, {}
        for k, v in kw.items():
            if v is None:
                continue
            if k.startswith("csdp_"):
                sub[k[5:]] = v
            else:
                top[k] = v
        if sub:
            top["csdp"] = replace(self.csdp, **sub)
        return replace(self, **top)


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


def make_weights(cfg: PipelineConfig, geometry) -> WeightSet:
    if cfg.init == "zeros":
        return zero_init(geometry)
    return seeded_init(cfg.seed, geometry)


def fspe_weights(cfg: PipelineConfig, channels: int, n_levels: int) -> WeightSet:
    return make_weights(cfg, pyramid_geometry(channels, n_levels, cfg.filter_size))


def csdp_weights(cfg: PipelineConfig, channels: int, n_levels: int) -> WeightSet:
    return make_weights(cfg, csdp_geometry(channels, n_levels, cfg.csdp))


def pde_weights(cfg: PipelineConfig, channels: int) -> WeightSet:
    return make_weights(cfg, pe_geometry(channels))


# ---------------------------------------------------------------------------
# Synthetic inputs
# ---------------------------------------------------------------------------


def yaw_extrinsic(yaw: float, position=(0.0, 0.0, 1.5)) -> np.ndarray:
    """LiDAR→camera transform for a level camera looking along ``yaw`` (z-up LiDAR)."""
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
    e = np.eye(4)
    e[:3, :3] = rot
    e[:3, 3] = -rot @ np.asarray(position, dtype=np.float64)
    return e


def synth_cameras(n_cameras: int, image_h: int, image_w: int, fov_deg: float = 70.0) -> list[CameraModel]:
    """Circular rig, cameras ordered by yaw so neighbours are physically adjacent."""
    f = image_w / (2 * math.tan(math.radians(fov_deg) / 2))
    return [
        CameraModel(f, f, image_w / 2, image_h / 2, image_w, image_h, yaw_extrinsic(2 * math.pi * j / n_cameras), f"cam{j}")
        for j in range(n_cameras)
    ]


def synth_rig(
    height: int, width: int, channels: int, n_levels: int, n_cameras: int, seed: int
) -> list[np.ndarray]:
    """Random rig features, coarse → fine, each level J×C×H×W; (height, width) is the finest grid."""
    if height % 2 ** (n_levels - 1) or width % 2 ** (n_levels - 1):
        raise ConfigError(
            f"finest grid {height}×{width} must be divisible by {2 ** (n_levels - 1)} so that "
            f"every fused level has the even extents the Haar DWT requires"
        )
    rng = np.random.default_rng(seed)
    levels = []
    for i in range(n_levels):
        f = 2 ** (n_levels - 1 - i)
        levels.append(rng.standard_normal((n_cameras, channels, height // f, width // f)).astype(F32))
    return levels


def synth_cloud(n_points: int, seed: int, max_range: float = 60.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    r = rng.uniform(2.0, max_range, n_points)
    theta = rng.uniform(-math.pi, math.pi, n_points)
    z = rng.uniform(-1.5, 2.5, n_points)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def level_factors(cams: Sequence[CameraModel], level_widths: Sequence[int]) -> list[float]:
    return [cams[0].width / w for w in level_widths]


def run_fspe(
    rig_levels: Sequence[np.ndarray], weights: WeightSet, finest_factor: float, filter_size: int = 3, threads: int = 1
) -> list[np.ndarray]:
    """Fuse each camera's pyramid; inputs and outputs are per-level J×C×H×W stacks."""
    n_cam = rig_levels[0].shape[0]

    def one(j):
        return build_pyramid([lvl[j] for lvl in rig_levels], weights, finest_factor, filter_size).levels

    if threads > 1 and n_cam > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_cam = list(pool.map(one, range(n_cam)))
    else:
        per_cam = [one(j) for j in range(n_cam)]
    return [np.stack([per_cam[j][i] for j in range(n_cam)]) for i in range(len(rig_levels))]


def run_depth(
    pyramid: Sequence[np.ndarray], cams: Sequence[CameraModel], cfg: PipelineConfig, weights: WeightSet, threads: int = 1
) -> list[list[np.ndarray]]:
    factors = level_factors(cams, [lvl.shape[-1] for lvl in pyramid])
    levels = [[lvl[j] for j in range(lvl.shape[0])] for lvl in pyramid]
    return csdp_forward(levels, cams, cfg.csdp, weights, factors, threads=threads)


def run_pe(
    depths: Sequence[Sequence[np.ndarray]],
    cams: Sequence[CameraModel],
    cfg: PipelineConfig,
    weights: WeightSet,
    features: np.ndarray | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray] | None]:
    """PE from all levels of every camera on the finest grid, plus F + PE when features are given."""
    pes, f3d = [], []
    for j, cam in enumerate(cams):
        pe = depth_to_pe(
            [lvl[j] for lvl in depths], cam, cfg.pe_channels, weights, cfg.pos_range, cfg.temperature
        )
        pes.append(pe)
        if features is not None:
            f3d.append(fuse_features_pe(features[j], pe))
    return pes, (f3d if features is not None else None)


@dataclass
class PipelineResult:
    pyramid: list[np.ndarray]
    depths: list[list[np.ndarray]]
    pe: list[np.ndarray]
    f3d: list[np.ndarray]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in self.pyramid:
            h.update(tensor_to_bytes(arr))
        for lvl in self.depths:
            for d in lvl:
                h.update(tensor_to_bytes(d))
        for arr in self.pe + self.f3d:
            h.update(tensor_to_bytes(arr))
        return h.hexdigest()


def run_synthetic_pipeline(
    cfg: PipelineConfig, height: int, width: int, channels: int, threads: int = 1, finest_factor: float = 4.0
) -> PipelineResult:
    """FSPE → CSDP → PDE on synthetic rig features (finest grid ``height×width``)."""
    rig = synth_rig(height, width, channels, cfg.n_levels, cfg.n_cameras, cfg.seed)
    cams = synth_cameras(cfg.n_cameras, int(height * finest_factor), int(width * finest_factor))
    pyramid = run_fspe(rig, fspe_weights(cfg, channels, cfg.n_levels), finest_factor, cfg.filter_size, threads)
    depths = run_depth(pyramid, cams, cfg, csdp_weights(cfg, channels, cfg.n_levels), threads)
    pe_cfg = cfg if cfg.pe_channels == channels else replace(cfg, pe_channels=channels)
    pe, f3d = run_pe(depths, cams, pe_cfg, pde_weights(pe_cfg, channels), pyramid[-1])
    return PipelineResult(pyramid, depths, pe, f3d or [])
