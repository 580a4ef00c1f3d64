"""
Grids and scalar fields on R^2 x S^1.

Everything downstream (lifting, metrics, eikonal solves, backtracking) works on
scalar fields sampled on a regular grid over positions (x, y) and orientations
theta.  Conventions, fixed once and for all:

  * arrays have shape (nx, ny, ntheta), C-order, x fastest-varying axis first;
  * x is the image column, y the image row (so image row == +y), both in
    pixels with unit spacing;
  * theta_k = k * htheta with htheta = 2*pi/ntheta, periodic wrap between
    k = ntheta - 1 and k = 0.

All solver math happens in these grid units; anisotropy between the spatial
and angular axes is carried by the metric matrices, never by the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from PIL import Image, ImageDraw

TWO_PI = 2.0 * np.pi


class DomainError(ValueError):
    """A queried point lies outside the spatial extent of a field."""


def canonical_theta(theta):
    """Map angles to the canonical representative in [0, 2*pi).  Idempotent."""
    return np.mod(theta, TWO_PI)


class PointM2(NamedTuple):
    """A continuous point (x, y, theta) in pixels and radians."""

    x: float
    y: float
    theta: float

    def canonical(self) -> "PointM2":
        return PointM2(self.x, self.y, float(canonical_theta(self.theta)))


@dataclass(frozen=True)
class GridM2:
    """Regular grid over R^2 x S^1 with unit pixel spacing.

    Parameters
    ----------
    nx, ny : int
        Number of samples along x (columns) and y (rows).
    ntheta : int
        Number of orientation samples; the angular spacing is 2*pi/ntheta so
        the periodic boundary conditions close up exactly.
    x0, y0 : float
        Origin offset in pixels, metadata for export only.
    """

    nx: int
    ny: int
    ntheta: int
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2 or self.ntheta < 1:
            raise ValueError(f"grid too small: {self.nx} x {self.ny} x {self.ntheta}")

    @property
    def htheta(self) -> float:
        return TWO_PI / self.ntheta

    @property
    def shape(self) -> tuple:
        return (self.nx, self.ny, self.ntheta)

    @property
    def thetas(self) -> np.ndarray:
        return np.arange(self.ntheta) * self.htheta

    def nearest_voxel(self, p) -> tuple:
        """Snap a continuous point to the nearest voxel index (ix, iy, ik)."""
        x, y, theta = p
        ix = int(round(x))
        iy = int(round(y))
        if not (0 <= ix < self.nx and 0 <= iy < self.ny):
            raise DomainError(f"point {p} outside grid {self.nx} x {self.ny}")
        ik = int(round(canonical_theta(theta) / self.htheta)) % self.ntheta
        return ix, iy, ik

    def voxel_point(self, idx) -> PointM2:
        ix, iy, ik = idx
        return PointM2(float(ix), float(iy), ik * self.htheta)


@dataclass
class LiftedField:
    """A scalar field sampled on a GridM2.

    ``values`` must be finite everywhere; the single permitted exception is
    the +inf sentinel in distance maps before acceptance.
    """

    grid: GridM2
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"field shape {self.values.shape} does not match grid {self.grid.shape}"
            )

    @classmethod
    def full(cls, grid: GridM2, fill: float) -> "LiftedField":
        return cls(grid, np.full(grid.shape, fill, dtype=np.float64))

    def copy(self) -> "LiftedField":
        return LiftedField(self.grid, self.values.copy())


def _interp_weights(grid: GridM2, pts: np.ndarray):
    """Corner indices and weights of trilinear interpolation, periodic in theta.

    ``pts`` has shape (..., 3).  Raises DomainError for spatial coordinates
    outside the grid extent (beyond a 1e-9 clamping tolerance).
    """
    pts = np.asarray(pts, dtype=np.float64)
    x, y, th = pts[..., 0], pts[..., 1], pts[..., 2]
    tol = 1e-9
    if np.any(x < -tol) or np.any(x > grid.nx - 1 + tol) or \
       np.any(y < -tol) or np.any(y > grid.ny - 1 + tol):
        raise DomainError("interpolation point outside spatial domain")
    x = np.clip(x, 0.0, grid.nx - 1.0)
    y = np.clip(y, 0.0, grid.ny - 1.0)
    k = np.mod(th, TWO_PI) / grid.htheta

    ix = np.minimum(np.floor(x).astype(np.int64), grid.nx - 2)
    iy = np.minimum(np.floor(y).astype(np.int64), grid.ny - 2)
    ik = np.floor(k).astype(np.int64) % grid.ntheta
    fx, fy, fk = x - ix, y - iy, k - np.floor(k)
    ik1 = (ik + 1) % grid.ntheta
    return (ix, iy, ik, ik1), (fx, fy, fk)


def interpolate(fld: LiftedField, p, *more_values):
    """Trilinear interpolation of one or several fields at point(s) ``p``.

    Periodic in theta, exact at grid nodes.  ``p`` is a PointM2, a length-3
    sequence, or an array of shape (..., 3).  Extra positional arguments are
    value arrays on the same grid, interpolated with the shared weights; the
    return is then a tuple.
    """
    arrays = (fld.values,) + more_values
    out = interp_values(fld.grid, p, *arrays)
    return out if len(arrays) > 1 else out[0]


def interp_values(grid: GridM2, p, *arrays):
    """Interpolate several value arrays on a shared grid with shared weights."""
    (ix, iy, ik, ik1), (fx, fy, fk) = _interp_weights(grid, np.asarray(p, dtype=np.float64))
    out = []
    for v in arrays:
        c000 = v[ix, iy, ik]
        c100 = v[ix + 1, iy, ik]
        c010 = v[ix, iy + 1, ik]
        c110 = v[ix + 1, iy + 1, ik]
        c001 = v[ix, iy, ik1]
        c101 = v[ix + 1, iy, ik1]
        c011 = v[ix, iy + 1, ik1]
        c111 = v[ix + 1, iy + 1, ik1]
        c00 = c000 * (1 - fx) + c100 * fx
        c10 = c010 * (1 - fx) + c110 * fx
        c01 = c001 * (1 - fx) + c101 * fx
        c11 = c011 * (1 - fx) + c111 * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out.append(c0 * (1 - fk) + c1 * fk)
    return tuple(out)


def gradient_fixed(fld: LiftedField, index=None):
    """Gradient (d/dx, d/dy, d/dtheta) of a lifted field in the fixed frame.

    Second-order central differences; one-sided at the spatial boundary,
    wrap-around in theta.  The theta derivative is per radian.

    With ``index=None`` returns an array of shape (nx, ny, ntheta, 3); with a
    voxel index returns the covector at that voxel.
    """
    v = fld.values
    g = np.empty(v.shape + (3,), dtype=np.float64)
    g[..., 0] = _axis_derivative(v, 0)
    g[..., 1] = _axis_derivative(v, 1)
    g[..., 2] = _axis_derivative_periodic(v, 2) / fld.grid.htheta
    if index is None:
        return g
    ix, iy, ik = index
    return g[ix, iy, ik]


def _axis_derivative(v, axis):
    """Central differences with one-sided clamped boundaries, unit spacing."""
    d = np.empty_like(v)
    sl = [slice(None)] * v.ndim

    def ax(s):
        sl2 = list(sl)
        sl2[axis] = s
        return tuple(sl2)

    d[ax(slice(1, -1))] = 0.5 * (v[ax(slice(2, None))] - v[ax(slice(0, -2))])
    d[ax(0)] = v[ax(1)] - v[ax(0)]
    d[ax(-1)] = v[ax(-1)] - v[ax(-2)]
    return d


def _axis_derivative_periodic(v, axis):
    """Central differences with periodic wrap, unit spacing."""
    return 0.5 * (np.roll(v, -1, axis=axis) - np.roll(v, 1, axis=axis))


# ---------------------------------------------------------------------------
# image and field I/O
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Load an 8- or 16-bit grayscale image as a float array in [0, 1].

    The returned array has shape (nx, ny) with values[x, y]; x is the image
    column and y the image row.
    """
    try:
        img = Image.open(path)
    except OSError as e:
        raise OSError(f"cannot read image {path}: {e}") from e
    if img.mode in ("L", "P"):
        arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    elif img.mode in ("I", "I;16", "I;16B", "I;16L"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
    elif img.mode in ("RGB", "RGBA"):
        arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    elif img.mode == "F":
        arr = np.asarray(img, dtype=np.float64)
    else:
        raise ValueError(f"unsupported image mode {img.mode!r} in {path}")
    return np.ascontiguousarray(arr.T)


def save_image(arr: np.ndarray, path, bit_depth: int = 8):
    """Save a float array in [0, 1], shape (nx, ny), as a grayscale image."""
    a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0).T
    if bit_depth == 8:
        Image.fromarray(np.round(a * 255.0).astype(np.uint8), mode="L").save(path)
    elif bit_depth == 16:
        Image.fromarray(np.round(a * 65535.0).astype(np.uint16)).save(path)
    else:
        raise ValueError(f"unsupported bit depth {bit_depth}")


def save_overlay(image: np.ndarray, path, polylines=(), markers=()):
    """Rasterize tracking output onto a grayscale image and save it as PNG.

    Parameters
    ----------
    image : (nx, ny) float array in [0, 1]
    polylines : iterable of (points, color)
        ``points`` is an (n, 2) array of spatial (x, y) samples.
    markers : iterable of ((x, y), color)
        Seed / bifurcation / tip style point markers.
    """
    base = np.clip(image, 0.0, 1.0).T
    rgb = Image.fromarray(np.round(base * 255.0).astype(np.uint8), mode="L").convert("RGB")
    draw = ImageDraw.Draw(rgb)
    for pts, color in polylines:
        pts = np.asarray(pts, dtype=np.float64)
        xy = [(float(px), float(py)) for px, py in pts[:, :2]]
        if len(xy) >= 2:
            draw.line(xy, fill=color, width=1)
    for (px, py), color in markers:
        r = 2
        draw.ellipse([px - r, py - r, px + r, py + r], fill=color)
    rgb.save(path)


_RAW_MAGIC = "M2FIELD"


def save_field_raw(fld: LiftedField, path):
    """Dump a field as little-endian float32 with a plain-text header.

    Header line: ``M2FIELD nx ny ntheta x0 y0`` followed by newline, then the
    raw values in C-order (x, y, theta).  The fixed layout makes dumps
    bit-reproducible across runs.
    """
    g = fld.grid
    header = f"{_RAW_MAGIC} {g.nx} {g.ny} {g.ntheta} {g.x0:.17g} {g.y0:.17g}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(fld.values.astype("<f4").tobytes(order="C"))


def load_field_raw(path) -> LiftedField:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if not header or header[0] != _RAW_MAGIC:
            raise ValueError(f"{path} is not a raw field dump")
        nx, ny, ntheta = int(header[1]), int(header[2]), int(header[3])
        x0, y0 = float(header[4]), float(header[5])
        data = np.frombuffer(f.read(), dtype="<f4").astype(np.float64)
    grid = GridM2(nx, ny, ntheta, x0, y0)
    if data.size != nx * ny * ntheta:
        raise ValueError(f"raw field size mismatch in {path}")
    return LiftedField(grid, data.reshape(grid.shape))


def save_polyline_csv(path, t, points):
    """Write a lifted polyline as CSV rows (t, x, y, theta)."""
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w") as f:
        f.write("t,x,y,theta\n")
        for ti, (px, py, pth) in zip(np.asarray(t, dtype=np.float64), pts):
            f.write(f"{ti:.12g},{px:.12g},{py:.12g},{pth:.12g}\n")


def load_polyline_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:4]
