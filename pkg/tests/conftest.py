import numpy as np
import pytest

from freqpde.geometry import CameraModel


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng, width=None, height=None):
    e = np.eye(4)
    e[:3, :3] = random_rotation(rng)
    e[:3, 3] = rng.uniform(-2, 2, 3)
    w = width or int(rng.integers(64, 1600))
    h = height or int(rng.integers(64, 900))
    return CameraModel(
        float(rng.uniform(100, 1500)), float(rng.uniform(100, 1500)),
        float(rng.uniform(0, w)), float(rng.uniform(0, h)), w, h, e,
    )


def loop_conv3x3(x, k, b):
    """Nested-loop zero-padded 3×3 cross-correlation."""
    c_in, h, w = x.shape
    out = np.zeros((k.shape[0], h, w))
    for o in range(k.shape[0]):
        for i in range(h):
            for j in range(w):
                acc = float(b[o])
                for c in range(c_in):
                    for dy in range(3):
                        for dx in range(3):
                            y, xx = i + dy - 1, j + dx - 1
                            if 0 <= y < h and 0 <= xx < w:
                                acc += float(k[o, c, dy, dx]) * float(x[c, y, xx])
                out[o, i, j] = acc
    return out
