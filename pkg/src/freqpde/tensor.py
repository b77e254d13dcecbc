"""Deterministic array substrate.

Tensors are plain ``numpy.ndarray`` objects holding ``float32`` data.  Every
operation here accumulates in ``float64`` and rounds once on output, and all
contractions go through ``np.einsum`` (never BLAS) so the reduction order per
output element is fixed and results do not depend on the thread count.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ShapeError

F32 = np.float32

MAGIC = b"FPDE"
CONTAINER_VERSION = 1
DTYPE_F32 = 0


def as_tensor(x, ndim: int | None = None, name: str = "tensor") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=F32)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name}: expected rank {ndim}, got shape {arr.shape}")
    return arr


def as_feature_map(x, name: str = "feature map") -> np.ndarray:
    """Validate a C×H×W feature map and return it as contiguous float32."""
    arr = as_tensor(x, 3, name)
    if min(arr.shape) < 1:
        raise ShapeError(f"{name}: all extents must be >= 1, got {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Elementwise / reduction kernels
# ---------------------------------------------------------------------------


def conv2d_3x3(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1, zero-padded 3×3 convolution (cross-correlation) on C×H×W."""
    x = as_feature_map(x, "conv input")
    kernel = np.asarray(kernel)
    bias = np.asarray(bias)
    c_in, h, w = x.shape
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv kernel must be C_out×C_in×3×3, got {kernel.shape}")
    if kernel.shape[1] != c_in:
        raise ShapeError(
            f"conv kernel expects {kernel.shape[1]} input channels, input has {c_in}"
        )
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv bias must have shape ({kernel.shape[0]},), got {bias.shape}")

    xp = np.pad(x.astype(np.float64), ((0, 0), (1, 1), (1, 1)))
    k64 = kernel.astype(np.float64)
    out = np.zeros((kernel.shape[0], h, w), dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            out += np.einsum("oc,chw->ohw", k64[:, :, dy, dx], xp[:, dy : dy + h, dx : dx + w])
    out += bias.astype(np.float64)[:, None, None]
    return out.astype(F32)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=axis, keepdims=True)).astype(F32)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split branches so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel bilinear resize over the last two axes, edges clamped.

    Every output is a convex combination of input samples, so per-pixel
    orderings along leading axes survive the resize.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.astype(F32)

    def taps(n_in: int, n_out: int):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = taps(h, out_h)
    x0, x1, wx = taps(w, out_w)
    rows = x[..., y0, :] * (1.0 - wy)[:, None] + x[..., y1, :] * wy[:, None]
    out = rows[..., x0] * (1.0 - wx) + rows[..., x1] * wx
    return out.astype(F32)


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

Geometry = Sequence[tuple[str, tuple[int, ...]]]


def dense(name: str, n_in: int, n_out: int) -> list[tuple[str, tuple[int, ...]]]:
    """Geometry entries for one affine layer ``name``: weight (out, in) and bias."""
    return [(f"{name}.weight", (n_out, n_in)), (f"{name}.bias", (n_out,))]


def conv(name: str, c_in: int, c_out: int, k: int = 3) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{name}.weight", (c_out, c_in, k, k)), (f"{name}.bias", (c_out,))]


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    receptive = math.prod(shape[2:])
    return shape[1] * receptive, shape[0] * receptive


@dataclass(frozen=True)
class WeightSet:
    tensors: dict[str, np.ndarray]
    seed: int | None = None
    scheme: str = "file"
    meta: dict = field(default_factory=dict, compare=False)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise ShapeError(f"weight set has no layer {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def check(self, geometry: Geometry) -> None:
        for name, shape in geometry:
            got = self[name].shape
            if got != tuple(shape):
                raise ShapeError(f"weight {name!r}: expected shape {tuple(shape)}, got {got}")

    def merged(self, other: "WeightSet") -> "WeightSet":
        clash = set(self.tensors) & set(other.tensors)
        if clash:
            raise ShapeError(f"duplicate weight names: {sorted(clash)}")
        return WeightSet({**self.tensors, **other.tensors}, self.seed, self.scheme)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        header = json.dumps({"seed": self.seed, "scheme": self.scheme, "names": self.names()})
        buf.write(header.encode())
        for name in self.tensors:
            buf.write(tensor_to_bytes(self.tensors[name]))
        return buf.getvalue()

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {"version": CONTAINER_VERSION, "seed": self.seed, "scheme": self.scheme, "layers": {}}
        for i, (name, arr) in enumerate(self.tensors.items()):
            fname = f"w{i:03d}.fpde"
            write_tensor(directory / fname, arr)
            index["layers"][name] = fname
        (directory / "weights.json").write_text(json.dumps(index, indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> "WeightSet":
        directory = Path(directory)
        try:
            index = json.loads((directory / "weights.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read weight index in {directory}: {exc}") from None
        tensors = {name: read_tensor(directory / f) for name, f in index["layers"].items()}
        return cls(tensors, index.get("seed"), index.get("scheme", "file"))


def seeded_init(seed: int, geometry: Geometry) -> WeightSet:
    """Xavier-uniform weights, zero biases; drawn in geometry order from one stream."""
    names = [n for n, _ in geometry]
    if len(set(names)) != len(names):
        raise ShapeError("weight geometry contains duplicate names")
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in geometry:
        shape = tuple(int(s) for s in shape)
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=F32)
            continue
        fan_in, fan_out = _fans(shape)
        a = math.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-a, a, size=shape).astype(F32)
    return WeightSet(tensors, seed, "xavier_uniform")


def zero_init(geometry: Geometry) -> WeightSet:
    names = [n for n, _ in geometry]
    if len(set(names)) != len(names):
        raise ShapeError("weight geometry contains duplicate names")
    return WeightSet({n: np.zeros(tuple(s), dtype=F32) for n, s in geometry}, None, "zeros")


def perceptron(
    x: np.ndarray,
    weights: WeightSet,
    layers: Sequence[str],
    output_activation: str | None = None,
) -> np.ndarray:
    """Affine chain with ReLU between layers; ``x`` is ``(..., n_in)``."""
    h = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(layers):
        w = weights[f"{layer}.weight"].astype(np.float64)
        b = weights[f"{layer}.bias"].astype(np.float64)
        if h.shape[-1] != w.shape[1]:
            raise ShapeError(
                f"layer {layer!r} expects input length {w.shape[1]}, got {h.shape[-1]}"
            )
        h = np.einsum("...i,oi->...o", h, w) + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    if output_activation == "sigmoid":
        h = sigmoid(h)
    elif output_activation == "softplus":
        h = np.logaddexp(0.0, h)
    elif output_activation is not None:
        raise ValueError(f"unknown output activation {output_activation!r}")
    return h.astype(F32)


def pixel_perceptron(
    fmap: np.ndarray, weights: WeightSet, layers: Sequence[str], output_activation: str | None = None
) -> np.ndarray:
    """Apply a perceptron independently at every pixel of a C×H×W map."""
    fmap = as_feature_map(fmap)
    out = perceptron(np.moveaxis(fmap, 0, -1), weights, layers, output_activation)
    return np.ascontiguousarray(np.moveaxis(out, -1, 0))


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------


def tensor_to_bytes(x: np.ndarray) -> bytes:
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise FormatError("refusing to serialize non-finite values")
    if any(s < 1 for s in arr.shape):
        raise FormatError(f"tensor extents must be positive, got {arr.shape}")
    header = MAGIC + struct.pack("<IBB", CONTAINER_VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise FormatError("not a tensor container (bad magic)")
    version, dtype, rank = struct.unpack_from("<IBB", raw, 4)
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    offset = 10 + 4 * rank
    if len(raw) < offset:
        raise FormatError("truncated tensor header")
    shape = struct.unpack_from(f"<{rank}I", raw, 10)
    if any(s < 1 for s in shape):
        raise FormatError(f"tensor extents must be positive, got {shape}")
    count = math.prod(shape)
    if len(raw) != offset + 4 * count:
        raise FormatError(
            f"payload holds {(len(raw) - offset) / 4:g} values, shape {shape} needs {count}"
        )
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise FormatError("tensor payload contains NaN or Inf")
    return arr.astype(F32)


def write_tensor(path: str | Path, x: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(x))


def read_tensor(path: str | Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return tensor_from_bytes(raw)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def stack(maps: Iterable[np.ndarray]) -> np.ndarray:
    return np.stack([as_tensor(m) for m in maps])
