"""Lifted curves: the common container for tracked and integrated paths."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class Geodesic:
    """An ordered polyline of continuous (x, y, theta) points.

    ``t`` increases strictly over [0, 1] (or [0, T] for shot curves); theta is
    unwrapped so consecutive samples never jump by 2*pi.  ``momentum`` holds
    the gauge components of the momentum covector along the curve when the
    producer recorded them.  ``length`` is the distance-map value at the
    start point for backtracked curves.
    """

    t: np.ndarray
    points: np.ndarray = field(repr=False)
    momentum: Optional[np.ndarray] = field(default=None, repr=False)
    length: float = 0.0
    reached: bool = True
    note: str = ""

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("points must have shape (n, 3)")
        if self.t.shape[0] != self.points.shape[0]:
            raise ValueError("t and points disagree in length")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def spatial(self) -> np.ndarray:
        """The (x, y) projection of the curve."""
        return self.points[:, :2]


def unwrap_theta(theta: np.ndarray) -> np.ndarray:
    """Remove 2*pi jumps from a sampled angle sequence."""
    return np.unwrap(np.asarray(theta, dtype=np.float64))


def reversed_curve(geo: Geodesic) -> Geodesic:
    """The same polyline traversed the other way.

    Backtracked curves run from the query point down to the source; the
    optimal-control traversal (relevant for asymmetric length functionals)
    is the reverse.
    """
    t = geo.t[-1] - geo.t[::-1]
    mom = None if geo.momentum is None else geo.momentum[::-1].copy()
    return Geodesic(t=t, points=geo.points[::-1].copy(), momentum=mom,
                    length=geo.length, reached=geo.reached, note=geo.note)


def spatial_hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between the spatial projections of two curves."""
    pa = np.asarray(a, dtype=np.float64)[:, :2]
    pb = np.asarray(b, dtype=np.float64)[:, :2]
    d = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def rasterize_spatial(points: np.ndarray, shape, step: float = 0.25) -> np.ndarray:
    """Pixel set covered by the spatial projection of a polyline.

    The polyline is resampled at sub-pixel ``step`` before rounding, so thin
    diagonal segments do not skip pixels.  Returns an (m, 2) integer array of
    unique in-bounds pixels.
    """
    pts = np.asarray(points, dtype=np.float64)[:, :2]
    if len(pts) == 0:
        return np.empty((0, 2), dtype=np.int64)
    if len(pts) == 1:
        dense = pts
    else:
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        total = s[-1]
        if total == 0.0:
            dense = pts[:1]
        else:
            si = np.arange(0.0, total + step, step)
            dense = np.column_stack([np.interp(si, s, pts[:, 0]), np.interp(si, s, pts[:, 1])])
    pix = np.round(dense).astype(np.int64)
    keep = (pix[:, 0] >= 0) & (pix[:, 0] < shape[0]) & (pix[:, 1] >= 0) & (pix[:, 1] < shape[1])
    pix = pix[keep]
    if len(pix) == 0:
        return np.empty((0, 2), dtype=np.int64)
    return np.unique(pix, axis=0)
