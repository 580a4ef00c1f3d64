"""
Single-pass anisotropic fast marching on the lifted grid.

Solves the discretized eikonal system: at every voxel the upwind operator
built from the Selling stencils equals 1, with W = 0 at the sources.  The
scheme is degenerate elliptic and causal (it only sees the positive part of
the finite differences), so one monotone sweep over the domain computes the
unique solution: pop the smallest trial value, freeze it, update the voxels
whose stencil reads it.

The tracking domain excludes a one-voxel spatial margin; stencil arms that
poke outside see +inf neighbors (walls).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .grid import GridM2, LiftedField
from .stencil import StencilField

FAR, TRIAL, ACCEPTED, OUTSIDE = K.FAR, K.TRIAL, K.ACCEPTED, K.OUTSIDE


@dataclass
class DistanceMap:
    """Result of a fast-marching sweep.

    W holds +inf at voxels never reached (or outside the domain), the voxel
    state its Far/Trial/Accepted/Outside label, and ``order`` the acceptance
    rank (-1 where not accepted).  Immutable by convention once returned.
    """

    grid: GridM2
    W: np.ndarray = field(repr=False)
    state: np.ndarray = field(repr=False)
    order: np.ndarray = field(repr=False)
    sources: np.ndarray = field(repr=False)
    n_accepted: int = 0

    def field(self) -> LiftedField:
        return LiftedField(self.grid, self.W)

    def value_at_voxel(self, idx) -> float:
        return float(self.W[idx])


def domain_mask(grid: GridM2, margin: int = 1) -> np.ndarray:
    """Boolean inside-domain mask; the spatial margin is excluded."""
    inside = np.zeros(grid.shape, dtype=bool)
    inside[margin:grid.nx - margin, margin:grid.ny - margin, :] = True
    return inside


def _flat_sources(grid: GridM2, sources, inside, values=None):
    flat = []
    for s in sources:
        if len(s) != 3:
            raise ValueError(f"source {s} is not a voxel index")
        ix, iy, ik = int(s[0]), int(s[1]), int(s[2]) % grid.ntheta
        if not (0 <= ix < grid.nx and 0 <= iy < grid.ny):
            raise ValueError(f"source {s} outside the grid")
        if not inside[ix, iy, ik]:
            raise ValueError(f"source {s} lies outside the tracking domain")
        flat.append((ix * grid.ny + iy) * grid.ntheta + ik)
    if not flat:
        raise ValueError("empty source set")
    flat = np.asarray(flat, dtype=np.int64)
    if values is None:
        vals = np.zeros(len(flat), dtype=np.float64)
    else:
        vals = np.asarray(values, dtype=np.float64)
        if vals.shape != (len(flat),):
            raise ValueError("source_values length mismatch")
    # deduplicate, keeping the smallest value per voxel
    ordr = np.lexsort((vals, flat))
    flat, vals = flat[ordr], vals[ordr]
    keep = np.concatenate([[True], flat[1:] != flat[:-1]])
    return flat[keep], vals[keep]


def fast_march(sources: Sequence, stencils: StencilField,
               stop_voxels: Optional[Sequence] = None,
               value_cap: float = np.inf,
               margin: Optional[int] = None,
               source_values: Optional[np.ndarray] = None,
               stop_slack: float = 0.1) -> DistanceMap:
    """Causal sweep from one or several source voxels.

    Parameters
    ----------
    sources : sequence of voxel indices (ix, iy, ik)
        Multi-source runs produce the distance to the nearest source.
    stencils : StencilField
    stop_voxels : optional sequence of voxel indices
        Early termination once all of them are accepted (plus a relative
        ``stop_slack`` margin of front value, so backtracking from the stop
        voxels starts inside a fully accepted neighborhood).
    value_cap : float
        Early termination once the front passes this distance value.
    margin : optional int
        Spatial margin excluded from the tracking domain; defaults to the
        stencil field's margin.
    source_values : optional array, same length as ``sources``
        Initial values (default all zero).  Lets callers seed an exact ball
        around a point source, which removes most of the near-field
        discretization error; see :func:`seed_ball`.

    Returns a DistanceMap; acceptance happens in nondecreasing value order
    with ties broken towards the lowest flat voxel index.
    """
    g = stencils.grid
    N = g.nx * g.ny * g.ntheta
    if margin is None:
        margin = stencils.margin
    inside = domain_mask(g, margin)
    src, svals = _flat_sources(g, sources, inside, source_values)

    W = np.full(N, np.inf, dtype=np.float64)
    state = np.where(inside.reshape(N), FAR, OUTSIDE).astype(np.uint8)
    order = np.full(N, -1, dtype=np.int64)

    stop_mask = np.zeros(N, dtype=bool)
    n_stop = 0
    if stop_voxels is not None:
        stops, _ = _flat_sources(g, stop_voxels, inside)
        stop_mask[stops] = True
        n_stop = len(stops)

    ptr, idx = stencils.reverse_adjacency()
    n_acc = K._fast_march(W, state, order, stencils.lam, stencils.eoff, stencils.mu,
                          stencils.foff, ptr, idx, src, svals, stop_mask, n_stop,
                          stop_slack, value_cap, g.nx, g.ny, g.ntheta)
    return DistanceMap(g, W.reshape(g.shape), state.reshape(g.shape),
                       order.reshape(g.shape), src, n_accepted=int(n_acc))


def seed_ball(metric, center_voxel, radius: float, max_reach: int = 6):
    """Sources and exact initial values on a metric ball around a voxel.

    Evaluates the quasi-norm of the metric at the center on every offset
    within the ball (frozen coefficients) and returns (voxels, values) for
    :func:`fast_march`.  ``radius`` is in distance units.

    Frozen coefficients are only first-order accurate when the metric varies
    (on the lifted domain the co-frame always rotates with theta), so the
    index reach is capped at ``max_reach`` voxels per axis; use this for
    point-source factorization, not for covering large regions.
    """
    g = metric.grid
    cx, cy, ck = center_voxel
    Gc = metric.G[cx, cy, ck]
    wc = metric.wfwd[cx, cy, ck]
    lam_min = float(np.linalg.eigvalsh(Gc)[0])
    reach = min(int(np.ceil(radius / np.sqrt(lam_min))) + 1, max_reach)
    kreach = min(reach, g.ntheta // 2)
    vox, vals = [], []
    for dx in range(-reach, reach + 1):
        for dy in range(-reach, reach + 1):
            for dk in range(-kreach, kreach + 1):
                d = np.array([dx, dy, dk], dtype=np.float64)
                f2 = d @ Gc @ d + min(0.0, wc @ d) ** 2
                val = np.sqrt(f2)
                if val <= radius:
                    ix, iy, ik = cx + dx, cy + dy, (ck + dk) % g.ntheta
                    if 0 <= ix < g.nx and 0 <= iy < g.ny:
                        vox.append((ix, iy, ik))
                        vals.append(val)
    return vox, np.asarray(vals, dtype=np.float64)


def scheme_residual(dist: DistanceMap, stencils: StencilField):
    """|F W - 1| at accepted voxels whose full stencil is accepted and interior.

    Sources are excluded (the boundary condition holds there instead of the
    PDE).  Returns (max residual, count of checked voxels).
    """
    g = stencils.grid
    N = g.nx * g.ny * g.ntheta
    val, valid = K._scheme_values(dist.W.reshape(N), dist.state.reshape(N),
                                  stencils.lam, stencils.eoff, stencils.mu,
                                  stencils.foff, g.nx, g.ny, g.ntheta)
    valid[dist.sources] = False
    if not np.any(valid):
        return 0.0, 0
    resid = np.abs(val[valid] - 1.0)
    return float(resid.max()), int(valid.sum())
