"""Voxel radiance field: storage, sampling, optimizer updates, disk format.

The 3D scene parameters are two raw (unconstrained) grids. Activated density
is softplus(raw_density) and activated color is sigmoid(raw_color); activation
is applied *before* trilinear interpolation, so interpolation is linear in the
activated values and exact at grid nodes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

MAGIC = b"JLAB"
FORMAT_VERSION = 1

DEFAULT_BBOX = (-1.0, 1.0, -1.0, 1.0, -1.0, 1.0)


class FieldFormatError(Exception):
    """Field file has bad magic bytes, version, or header."""


class FieldTruncationError(FieldFormatError):
    """Field file payload is shorter than the header promises."""


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    # inverse of log(1+e^x); y must be > 0
    return np.log(np.expm1(y))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class VoxelField:
    """N^3 grid of raw density/color values over an axis-aligned cube.

    Arrays are indexed [ix, iy, iz]; node i sits at the center of cell i.
    """

    resolution: int
    raw_density: np.ndarray  # (N, N, N) float64
    raw_color: np.ndarray    # (N, N, N, 3) float64
    bbox: tuple = DEFAULT_BBOX

    def __post_init__(self):
        n = self.resolution
        if self.raw_density.shape != (n, n, n):
            raise ValueError(f"raw_density shape {self.raw_density.shape} != {(n, n, n)}")
        if self.raw_color.shape != (n, n, n, 3):
            raise ValueError(f"raw_color shape {self.raw_color.shape} != {(n, n, n, 3)}")
        if not (np.isfinite(self.raw_density).all() and np.isfinite(self.raw_color).all()):
            raise ValueError("field contains non-finite values")

    def density_grid(self) -> np.ndarray:
        return softplus(self.raw_density)

    def color_grid(self) -> np.ndarray:
        return sigmoid(self.raw_color)

    def copy(self) -> "VoxelField":
        return VoxelField(self.resolution, self.raw_density.copy(),
                          self.raw_color.copy(), self.bbox)

    def allclose(self, other: "VoxelField") -> bool:
        return (self.resolution == other.resolution
                and np.array_equal(self.raw_density, other.raw_density)
                and np.array_equal(self.raw_color, other.raw_color))


@dataclass
class FieldGradient:
    d_raw_density: np.ndarray  # (N, N, N)
    d_raw_color: np.ndarray    # (N, N, N, 3)

    @staticmethod
    def zeros(n: int) -> "FieldGradient":
        return FieldGradient(np.zeros((n, n, n)), np.zeros((n, n, n, 3)))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.d_raw_density).all()
                    and np.isfinite(self.d_raw_color).all())


@dataclass
class OptimizerState:
    """Adam-style moment accumulators for ascent on the field parameters."""

    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step_count: int = 0
    m_density: np.ndarray | None = None
    v_density: np.ndarray | None = None
    m_color: np.ndarray | None = None
    v_color: np.ndarray | None = None

    def _init_moments(self, fld: VoxelField):
        n = fld.resolution
        if self.m_density is None:
            self.m_density = np.zeros((n, n, n))
            self.v_density = np.zeros((n, n, n))
            self.m_color = np.zeros((n, n, n, 3))
            self.v_color = np.zeros((n, n, n, 3))


def new_field(resolution: int, init_mode: str = "constant", seed: int = 0,
              bbox: tuple = DEFAULT_BBOX) -> VoxelField:
    """Create a field with activated density 0.01 and color 0.5 everywhere.

    seeded_noise mode adds uniform [-0.1, 0.1] noise to the raw values,
    deterministically from the seed.
    """
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    if init_mode not in ("constant", "seeded_noise"):
        raise ValueError(f"unknown init_mode {init_mode!r}")
    n = resolution
    raw_density = np.full((n, n, n), softplus_inv(0.01))
    raw_color = np.zeros((n, n, n, 3))  # sigmoid(0) = 0.5
    if init_mode == "seeded_noise":
        rng = np.random.default_rng(seed)
        raw_density = raw_density + rng.uniform(-0.1, 0.1, size=raw_density.shape)
        raw_color = raw_color + rng.uniform(-0.1, 0.1, size=raw_color.shape)
    # keep values exactly representable in the f32 file format
    raw_density = raw_density.astype(np.float32).astype(np.float64)
    raw_color = raw_color.astype(np.float32).astype(np.float64)
    return VoxelField(n, raw_density, raw_color, bbox)


def _grid_coords(fld: VoxelField, points: np.ndarray):
    """Map world points to continuous grid coordinates (node units)."""
    n = fld.resolution
    b = fld.bbox
    lo = np.array([b[0], b[2], b[4]])
    hi = np.array([b[1], b[3], b[5]])
    size = hi - lo
    # node i at center of cell i: world = lo + (i + 0.5) * size / n
    return (points - lo) / size * n - 0.5


def trilinear_weights(fld: VoxelField, points: np.ndarray):
    """8-corner indices and weights for each point, plus an inside-bbox mask.

    Returns (idx0, frac, inside): idx0 integer lower-corner index (M, 3),
    frac (M, 3) in [0, 1], inside (M,) bool. Coordinates are clamped to the
    node range, so the outer half-cell band extrapolates as a constant.
    """
    n = fld.resolution
    b = fld.bbox
    lo = np.array([b[0], b[2], b[4]])
    hi = np.array([b[1], b[3], b[5]])
    inside = np.all((points >= lo) & (points <= hi), axis=-1)
    g = _grid_coords(fld, points)
    g = np.clip(g, 0.0, n - 1.0)
    idx0 = np.minimum(g.astype(np.int64), n - 2)
    frac = g - idx0
    return idx0, frac, inside


_CORNERS = np.array([[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)])


def interp_trilinear(grid: np.ndarray, idx0: np.ndarray, frac: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of grid (N,N,N) or (N,N,N,C) at given corners."""
    out = 0.0
    for dx, dy, dz in _CORNERS:
        w = (np.where(dx, frac[:, 0], 1 - frac[:, 0])
             * np.where(dy, frac[:, 1], 1 - frac[:, 1])
             * np.where(dz, frac[:, 2], 1 - frac[:, 2]))
        vals = grid[idx0[:, 0] + dx, idx0[:, 1] + dy, idx0[:, 2] + dz]
        if vals.ndim > 1:
            w = w[:, None]
        out = out + w * vals
    return out


def sample_field(fld: VoxelField, point) -> tuple:
    """Sample (density, color) at a world point. Outside the bbox: (0, zeros)."""
    p = np.asarray(point, dtype=np.float64).reshape(1, 3)
    if not np.isfinite(p).all():
        raise ValueError("non-finite sample point")
    idx0, frac, inside = trilinear_weights(fld, p)
    if not inside[0]:
        return 0.0, np.zeros(3)
    dens = float(interp_trilinear(fld.density_grid(), idx0, frac)[0])
    col = interp_trilinear(fld.color_grid(), idx0, frac)[0]
    return dens, col


def apply_update(fld: VoxelField, grad: FieldGradient,
                 opt: OptimizerState) -> tuple[VoxelField, OptimizerState]:
    """Adam-style gradient *ascent* step. Returns a new field and state."""
    n = fld.resolution
    if grad.d_raw_density.shape != (n, n, n) or grad.d_raw_color.shape != (n, n, n, 3):
        raise ValueError("gradient shape does not match field")
    if not grad.is_finite():
        raise ValueError("non-finite gradient rejected; field unchanged")
    opt._init_moments(fld)
    t = opt.step_count + 1
    b1, b2 = opt.beta1, opt.beta2

    def adam(m, v, g):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        return m, v, mhat / (np.sqrt(vhat) + opt.eps)

    md, vd, step_d = adam(opt.m_density, opt.v_density, grad.d_raw_density)
    mc, vc, step_c = adam(opt.m_color, opt.v_color, grad.d_raw_color)
    new_opt = OptimizerState(opt.lr, b1, b2, opt.eps, t, md, vd, mc, vc)
    new_fld = VoxelField(n,
                         fld.raw_density + opt.lr * step_d,
                         fld.raw_color + opt.lr * step_c,
                         fld.bbox)
    return new_fld, new_opt


def save_field(fld: VoxelField, path) -> None:
    """Write the binary field format: JLAB magic, version, resolution, bbox,
    then raw density and raw color as little-endian f32 in x-fastest order."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, fld.resolution))
        f.write(struct.pack("<6d", *fld.bbox))
        f.write(fld.raw_density.astype("<f4").ravel(order="F").tobytes())
        f.write(fld.raw_color[..., 0].astype("<f4").ravel(order="F").tobytes())
        f.write(fld.raw_color[..., 1].astype("<f4").ravel(order="F").tobytes())
        f.write(fld.raw_color[..., 2].astype("<f4").ravel(order="F").tobytes())


def load_field(path) -> VoxelField:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise FieldFormatError(f"bad magic bytes {data[:4]!r}")
    try:
        version, n = struct.unpack_from("<HI", data, 4)
    except struct.error as e:
        raise FieldTruncationError("truncated header") from e
    if version != FORMAT_VERSION:
        raise FieldFormatError(f"unsupported version {version}")
    off = 4 + 6
    if len(data) < off + 48:
        raise FieldTruncationError("truncated bbox")
    bbox = struct.unpack_from("<6d", data, off)
    off += 48
    count = n * n * n
    need = off + 4 * count * 4
    if len(data) < need:
        raise FieldTruncationError(
            f"payload truncated: have {len(data)} bytes, need {need}")

    def take(k):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f4", count=k, offset=off).astype(np.float64)
        off += 4 * k
        return arr

    raw_density = take(count).reshape((n, n, n), order="F")
    raw_color = np.stack([take(count).reshape((n, n, n), order="F")
                          for _ in range(3)], axis=-1)
    return VoxelField(n, raw_density, raw_color, bbox)
