"""Camera geometry, LiDAR projection and the positional depth encoder."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .tensor import F32, WeightSet, as_feature_map, dense, perceptron, resize_bilinear

BEHIND_EPS = 1e-6


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: np.ndarray = field(default_factory=lambda: np.eye(4))
    name: str = ""

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"camera {self.name!r}: focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"camera {self.name!r}: image size must be positive")
        e = np.asarray(self.extrinsic, dtype=np.float64)
        if e.shape != (4, 4):
            raise ConfigError(f"camera {self.name!r}: extrinsic must be 4×4, got {e.shape}")
        rot = e[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-5) or abs(np.linalg.det(rot) - 1) > 1e-5:
            raise ConfigError(f"camera {self.name!r}: extrinsic rotation is not a proper rotation")
        if not np.allclose(e[3], [0, 0, 0, 1], atol=1e-9):
            raise ConfigError(f"camera {self.name!r}: extrinsic bottom row must be (0, 0, 0, 1)")
        object.__setattr__(self, "extrinsic", e)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def cam_to_lidar(self) -> np.ndarray:
        """Rigid inverse of the LiDAR→camera extrinsic."""
        rot, t = self.extrinsic[:3, :3], self.extrinsic[:3, 3]
        inv = np.eye(4)
        inv[:3, :3] = rot.T
        inv[:3, 3] = -rot.T @ t
        return inv

    def scaled(self, sx: float, sy: float) -> "CameraModel":
        """Same camera after resizing the image by (sx, sy)."""
        return CameraModel(
            self.fx * sx,
            self.fy * sy,
            self.cx * sx,
            self.cy * sy,
            max(1, round(self.width * sx)),
            max(1, round(self.height * sy)),
            self.extrinsic,
            self.name,
        )

    def to_dict(self) -> dict:
        d = {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "extrinsic": [float(v) for v in self.extrinsic.reshape(-1)],
        }
        if self.name:
            d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        try:
            ext = np.asarray(d.get("extrinsic", np.eye(4).reshape(-1)), dtype=np.float64)
            if ext.size != 16:
                raise ConfigError("extrinsic must hold 16 row-major numbers")
            return cls(
                float(d["fx"]),
                float(d["fy"]),
                float(d["cx"]),
                float(d["cy"]),
                int(d["width"]),
                int(d["height"]),
                ext.reshape(4, 4),
                str(d.get("name", "")),
            )
        except KeyError as exc:
            raise ConfigError(f"calibration entry is missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad calibration entry: {exc}") from None


def load_calibration(path: str | Path) -> list[CameraModel]:
    """Read cameras from JSON: a list of entries or ``{"cameras": [...]}``."""
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read calibration {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"calibration {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    entries = data.get("cameras") if isinstance(data, dict) else data
    if not isinstance(entries, list) or not entries:
        raise FormatError(f"calibration {path} holds no cameras")
    return [CameraModel.from_dict(e) for e in entries]


def save_calibration(path: str | Path, cams: Sequence[CameraModel]) -> None:
    from . import __version__

    Path(path).write_text(
        json.dumps({"version": __version__, "cameras": [c.to_dict() for c in cams]}, indent=2)
    )


def load_point_cloud(path: str | Path) -> np.ndarray:
    """Parse ``x,y,z`` lines (extra columns ignored, blank lines skipped) into N×3."""
    points = []
    try:
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) < 3:
                    raise FormatError(f"{path}: line {lineno}: expected x,y,z, got {len(row)} field(s)")
                try:
                    xyz = [float(c) for c in row[:3]]
                except ValueError:
                    raise FormatError(f"{path}: line {lineno}: non-numeric coordinate") from None
                if not all(math.isfinite(v) for v in xyz):
                    raise FormatError(f"{path}: line {lineno}: non-finite coordinate")
                points.append(xyz)
    except OSError as exc:
        raise FormatError(f"cannot read point cloud {path}: {exc.strerror}") from None
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


class Projection(NamedTuple):
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    in_front: np.ndarray


def unproject(u, v, d, cam: CameraModel) -> np.ndarray:
    """Pixel coordinates plus metric depth to LiDAR-frame points (..., 3)."""
    u, v, d = np.broadcast_arrays(
        np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64), np.asarray(d, dtype=np.float64)
    )
    if np.any(d <= 0):
        raise ShapeError("unproject requires strictly positive depth")
    q = np.stack([d * (u - cam.cx) / cam.fx, d * (v - cam.cy) / cam.fy, d], axis=-1)
    m = cam.cam_to_lidar
    return np.einsum("ij,...j->...i", m[:3, :3], q) + m[:3, 3]


def project(points, cam: CameraModel) -> Projection:
    """LiDAR-frame points (..., 3) to pixels; ``in_front`` is False behind the camera.

    Behind-camera entries have NaN pixel coordinates.
    """
    p = np.asarray(points, dtype=np.float64)
    e = cam.extrinsic
    q = np.einsum("ij,...j->...i", e[:3, :3], p) + e[:3, 3]
    z = q[..., 2]
    in_front = z > BEHIND_EPS
    safe = np.where(in_front, z, 1.0)
    u = np.where(in_front, cam.fx * q[..., 0] / safe + cam.cx, np.nan)
    v = np.where(in_front, cam.fy * q[..., 1] / safe + cam.cy, np.nan)
    return Projection(u, v, z, in_front)


@dataclass(frozen=True)
class SparseDepthTarget:
    """Sparse metric depth labels on an H×W grid, sorted by (v, u)."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        if not (len(self.u) == len(self.v) == len(self.depth)):
            raise ShapeError("sparse target columns differ in length")
        if len(self.u):
            if self.u.min() < 0 or self.u.max() >= self.width or self.v.min() < 0 or self.v.max() >= self.height:
                raise ShapeError(f"sparse target pixel outside the {self.height}×{self.width} grid")
            if self.depth.min() <= 0:
                raise ShapeError("sparse target depths must be positive")
            cells = self.v.astype(np.int64) * self.width + self.u
            if len(np.unique(cells)) != len(cells):
                raise ShapeError("sparse target has more than one entry for a pixel")

    def __len__(self) -> int:
        return len(self.u)

    def dense(self, fill: float = 0.0) -> np.ndarray:
        out = np.full((self.height, self.width), fill, dtype=F32)
        out[self.v, self.u] = self.depth
        return out

    def to_dict(self) -> dict:
        from . import __version__

        return {
            "version": __version__,
            "height": self.height,
            "width": self.width,
            "entries": [[int(a), int(b), float(c)] for a, b, c in zip(self.u, self.v, self.depth)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SparseDepthTarget":
        try:
            entries = np.asarray(d["entries"], dtype=np.float64).reshape(-1, 3)
            return cls(
                entries[:, 0].astype(np.int64),
                entries[:, 1].astype(np.int64),
                entries[:, 2].astype(F32),
                int(d["height"]),
                int(d["width"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed sparse depth target: {exc}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "SparseDepthTarget":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise FormatError(f"cannot read sparse target {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"sparse target {path} is not valid JSON: {exc.msg}") from None


def _cells(points: np.ndarray, cam: CameraModel, height: int, width: int, scale_u: float, scale_v: float):
    """Project and bin points; returns (u_cell, v_cell, depth) of surviving points."""
    proj = project(points.reshape(-1, 3), cam)
    keep = proj.in_front
    u = np.floor(proj.u[keep] * scale_u)
    v = np.floor(proj.v[keep] * scale_v)
    d = proj.depth[keep]
    inside = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    return u[inside].astype(np.int64), v[inside].astype(np.int64), d[inside]


def lidar_to_sparse_depth(points, cam: CameraModel, height: int, width: int, zeta: float) -> SparseDepthTarget:
    """Project a cloud onto the ``height×width`` grid at downsampling ``zeta``.

    Points behind the camera or off-grid are dropped; colliding points keep
    the nearest depth.
    """
    if zeta < 1:
        raise ConfigError(f"downsampling factor must be >= 1, got {zeta}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    u, v, d = _cells(pts, cam, height, width, 1.0 / zeta, 1.0 / zeta)
    if len(d) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return SparseDepthTarget(empty, empty.copy(), np.zeros(0, dtype=F32), height, width)
    cell = v * width + u
    order = np.lexsort((d, cell))
    cell, u, v, d = cell[order], u[order], v[order], d[order]
    first = np.ones(len(cell), dtype=bool)
    first[1:] = cell[1:] != cell[:-1]
    return SparseDepthTarget(u[first], v[first], d[first].astype(F32), height, width)


@dataclass(frozen=True)
class CoverageReport:
    """Covered-cell fraction keyed by ((image height, image width), zeta)."""

    entries: dict[tuple[tuple[int, int], float], float]

    def get(self, resolution: tuple[int, int], zeta: float) -> float:
        return self.entries[(tuple(resolution), float(zeta))]

    def to_dict(self) -> dict:
        from . import __version__

        return {
            "version": __version__,
            "coverage": [
                {"height": r[0], "width": r[1], "zeta": z, "grid": _grid_for(r, z), "coverage": c}
                for (r, z), c in self.entries.items()
            ],
        }


def _grid_for(resolution: tuple[int, int], zeta: float) -> list[int]:
    return [max(1, int(resolution[0] // zeta)), max(1, int(resolution[1] // zeta))]


def coverage_stats(
    points, cams: Sequence[CameraModel], resolutions: Sequence[tuple[int, int]], zetas: Sequence[float]
) -> CoverageReport:
    """Fraction of feature-grid cells hit by at least one projected point.

    Each camera image is resized to ``resolution`` (height, width) and divided
    into cells of ``zeta`` pixels; the fraction is averaged over cameras.
    """
    if not cams or not resolutions or not zetas:
        raise ConfigError("coverage needs at least one camera, resolution and factor")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    entries = {}
    for res in resolutions:
        res = (int(res[0]), int(res[1]))
        for zeta in zetas:
            gh, gw = _grid_for(res, zeta)
            fractions = []
            for cam in cams:
                # one combined factor per axis keeps power-of-two nesting exact
                u, v, _ = _cells(pts, cam, gh, gw, res[1] / cam.width / zeta, res[0] / cam.height / zeta)
                hit = np.unique(v * gw + u).size
                fractions.append(hit / (gh * gw))
            entries[(res, float(zeta))] = float(np.mean(fractions))
    return CoverageReport(entries)


# ---------------------------------------------------------------------------
# Positional depth encoder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PositionRange:
    x: tuple[float, float] = (-61.2, 61.2)
    y: tuple[float, float] = (-61.2, 61.2)
    z: tuple[float, float] = (-10.0, 10.0)

    def lows(self) -> np.ndarray:
        return np.array([self.x[0], self.y[0], self.z[0]])

    def spans(self) -> np.ndarray:
        return np.array([self.x[1] - self.x[0], self.y[1] - self.y[0], self.z[1] - self.z[0]])

    def normalize(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.lows()) / self.spans()


def sine_embed(
    points, channels: int, pos_range: PositionRange = PositionRange(), temperature: float = 10000.0
) -> np.ndarray:
    """DETR-style sine embedding of 3-D points, (..., 3) -> (..., channels).

    Each coordinate is normalized into [0, 1], scaled by 2π and expanded into
    channels/3 interleaved (sin, cos) values at frequencies
    ``temperature ** (2i / (channels / 3))``; blocks are ordered x, y, z.
    """
    if channels < 6 or channels % 6:
        raise ConfigError(f"embedding channels must be a positive multiple of 6, got {channels}")
    per_axis = channels // 3
    norm = pos_range.normalize(points) * (2 * math.pi)
    i = np.arange(per_axis) // 2
    dim_t = float(temperature) ** (2.0 * i / per_axis)
    phase = norm[..., :, None] / dim_t  # (..., 3, per_axis)
    out = np.where(np.arange(per_axis) % 2 == 0, np.sin(phase), np.cos(phase))
    return out.reshape(*out.shape[:-2], channels)


def pe_geometry(channels: int, prefix: str = "pde.mix"):
    return dense(f"{prefix}0", channels, channels) + dense(f"{prefix}1", channels, channels)


def fuse_depth_levels(depth_levels: Sequence[np.ndarray]) -> np.ndarray:
    """Resize every level to the finest grid and take the arithmetic mean."""
    if not depth_levels:
        raise ShapeError("need at least one depth level")
    maps = [np.asarray(d, dtype=F32) for d in depth_levels]
    for d in maps:
        if d.ndim != 2:
            raise ShapeError(f"depth maps must be H×W, got {d.shape}")
    h, w = max((d.shape for d in maps), key=lambda s: s[0] * s[1])
    if len(maps) == 1:
        return maps[0]
    acc = np.zeros((h, w), dtype=np.float64)
    for d in maps:
        acc += resize_bilinear(d, h, w)
    return (acc / len(maps)).astype(F32)


def pixel_centers(height: int, width: int, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Native-image coordinates of grid cell centers, ((u+0.5)ζ, (v+0.5)ζ)."""
    zu, zv = cam.width / width, cam.height / height
    vv, uu = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return (uu + 0.5) * zu, (vv + 0.5) * zv


def depth_to_pe(
    depth_levels: Sequence[np.ndarray],
    cam: CameraModel,
    channels: int,
    weights: WeightSet,
    pos_range: PositionRange = PositionRange(),
    temperature: float = 10000.0,
    prefix: str = "pde.mix",
) -> np.ndarray:
    """C×H×W positional embedding on the finest provided depth grid."""
    if channels % 6:
        raise ConfigError(f"embedding channels must be a multiple of 6, got {channels}")
    depth = fuse_depth_levels(depth_levels)
    h, w = depth.shape
    u, v = pixel_centers(h, w, cam)
    pts = unproject(u, v, depth.astype(np.float64), cam)
    emb = sine_embed(pts, channels, pos_range, temperature)
    mixed = perceptron(emb, weights, [f"{prefix}0", f"{prefix}1"])
    return np.ascontiguousarray(np.moveaxis(mixed, -1, 0))


def fuse_features_pe(fmap: np.ndarray, pe: np.ndarray) -> np.ndarray:
    fmap = as_feature_map(fmap)
    pe = as_feature_map(pe, "positional embedding")
    if fmap.shape != pe.shape:
        raise ShapeError(f"feature shape {fmap.shape} differs from embedding shape {pe.shape}")
    return (fmap.astype(np.float64) + pe).astype(F32)
