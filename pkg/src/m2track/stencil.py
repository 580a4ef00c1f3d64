"""
Causal finite-difference stencils from Selling decompositions.

A symmetric positive definite matrix D decomposes as a nonnegative
combination of rank-one terms on integer offsets (obtuse superbase
reduction), and the squared positive part of a linear form eta is sandwiched
by a similar one-sided combination.  Together they turn the dual quasi-norm
at each voxel into an adaptive upwind stencil whose offsets live on the
index lattice, which is what makes single-pass fast marching applicable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .grid import GridM2
from .metric import DualMetricField

_ITMAX = 1000


class StencilError(RuntimeError):
    """Decomposition failure (ill-conditioned input or aliasing offsets)."""


def selling_decompose(D: np.ndarray):
    """Selling decomposition of one SPD 3x3 matrix.

    Returns (weights, offsets): a (6,) nonnegative array and (6, 3) integer
    offsets with D = sum_i w_i e_i e_i^T exactly (some weights may be zero).
    """
    D = np.asarray(D, dtype=np.float64)
    tol = 1e-12 * np.trace(D)
    w, e, ok = K._selling3(D, tol, _ITMAX)
    if not ok:
        raise StencilError("superbase reduction did not terminate; matrix too ill-conditioned")
    return w, e


def halfline_decompose(eta: np.ndarray, eps_rel: float):
    """One-sided decomposition of <., eta>_+^2 with relaxation eps_rel.

    Returns (weights, offsets) with zero-weight entries dropped and every
    offset oriented so <f_j, eta> >= 0.  eta = 0 gives empty arrays.
    """
    if not (0.0 < eps_rel < 1.0):
        raise ValueError("eps_rel must lie in (0, 1)")
    eta = np.asarray(eta, dtype=np.float64)
    w, f, ok = K._halfline3(eta, eps_rel, _ITMAX)
    if not ok:
        raise StencilError("superbase reduction did not terminate on the one-sided part")
    keep = w > 0.0
    return w[keep], f[keep]


@dataclass
class StencilField:
    """Per-voxel stencils over a grid, flat voxel indexing.

    lam/eoff hold the symmetric part (weights, integer offsets), mu/foff the
    one-sided part.  Scheme units: the decomposed matrices already carry the
    cost scaling, so the discretized operator is compared against 1.
    Voxels in the spatial margin carry empty stencils; they are outside the
    tracking domain.
    """

    grid: GridM2
    lam: np.ndarray = field(repr=False)
    eoff: np.ndarray = field(repr=False)
    mu: np.ndarray = field(repr=False)
    foff: np.ndarray = field(repr=False)
    max_radius: float = 0.0
    margin: int = 1
    n_clipped: int = 0
    _rev: Optional[tuple] = field(default=None, repr=False)

    @property
    def nvox(self) -> int:
        return self.lam.shape[0]

    def reverse_adjacency(self):
        """CSR (ptr, idx) of voxels whose stencil reads a given voxel; cached."""
        if self._rev is None:
            g = self.grid
            self._rev = K._reverse_adjacency(self.lam, self.eoff, self.mu, self.foff,
                                             g.nx, g.ny, g.ntheta)
        return self._rev


def stencil_cache_key(dual: DualMetricField, eps_rel: float, margin: int = 1) -> str:
    """Content hash identifying a stencil build (for cache files)."""
    import hashlib
    h = hashlib.sha256()
    g = dual.grid
    h.update(f"{g.nx},{g.ny},{g.ntheta},{eps_rel},{margin}".encode())
    h.update(dual.D.tobytes())
    h.update(dual.eta.tobytes())
    h.update(dual.cost.tobytes())
    return h.hexdigest()


def save_stencils(st: StencilField, path, key: str = ""):
    """Binary stencil cache (npz); ``key`` ties it to its dual field."""
    np.savez_compressed(path, key=np.bytes_(key.encode()), lam=st.lam, eoff=st.eoff,
                        mu=st.mu, foff=st.foff, max_radius=st.max_radius,
                        margin=st.margin, n_clipped=st.n_clipped,
                        dims=np.array([st.grid.nx, st.grid.ny, st.grid.ntheta]))


def load_stencils(path, expect_key: str = "") -> StencilField:
    """Load a stencil cache; a mismatched content key raises StencilError."""
    with np.load(path) as z:
        key = bytes(z["key"]).decode()
        if expect_key and key != expect_key:
            raise StencilError("stencil cache does not match the dual field")
        nx, ny, ntheta = (int(v) for v in z["dims"])
        return StencilField(GridM2(nx, ny, ntheta), z["lam"].copy(), z["eoff"].copy(),
                            z["mu"].copy(), z["foff"].copy(),
                            max_radius=float(z["max_radius"]), margin=int(z["margin"]),
                            n_clipped=int(z["n_clipped"]))


def build_stencils(dual: DualMetricField, eps_rel: float = 0.1,
                   margin: int = 1, alias: str = "error") -> StencilField:
    """Decompose a dual-coefficient field into causal stencils.

    The cost scaling is folded in here: the symmetric part decomposes
    D / C^2 and the one-sided part eta / C, so the fast-marching update
    solves the scheme against the constant right-hand side 1.

    Voxels in the spatial ``margin`` are outside the tracking domain: they
    get empty stencils (their one-sided image derivatives are unreliable and
    the solver never updates them anyway).

    Offsets reaching further than half the orientation circle
    (|theta offset| > ntheta / 2) mean the angular grid is too coarse for
    the local anisotropy.  With ``alias='error'`` such a voxel raises
    StencilError; with ``alias='clip'`` the voxel's coefficients are blended
    towards isotropy (and the one-sided relaxation enlarged) just enough for
    its offsets to fit, and the number of adjusted voxels is reported on the
    result.  Strongly data-driven metrics on coarse orientation grids need
    the latter.
    """
    if alias not in ("error", "clip"):
        raise ValueError("alias must be 'error' or 'clip'")
    g = dual.grid
    N = g.nx * g.ny * g.ntheta
    C = dual.cost.reshape(N)
    D = (dual.D.reshape(N, 3, 3) / C[:, None, None] ** 2).copy()
    eta = (dual.eta.reshape(N, 3) / C[:, None]).copy()
    lam, eoff, mu, foff, status = K._build_stencils(D, eta, eps_rel, _ITMAX)

    inside = np.zeros(g.shape, dtype=bool)
    inside[margin:g.nx - margin, margin:g.ny - margin, :] = True
    outside = ~inside.reshape(N)
    lam[outside] = 0.0
    mu[outside] = 0.0
    eoff[outside] = 0
    foff[outside] = 0

    status[outside] = 0
    if np.any(status != 0):
        bad = int(np.argmax(status != 0))
        raise StencilError(f"Selling reduction failed at voxel {np.unravel_index(bad, g.shape)}")

    # zero-weight entries are inert placeholders; never count their offsets
    eoff[lam <= 0.0] = 0
    foff[mu <= 0.0] = 0

    khalf = g.ntheta // 2
    kmax_e = np.abs(eoff[:, :, 2]).max(axis=1)
    kmax_f = np.abs(foff[:, :, 2]).max(axis=1)
    offenders = np.where((kmax_e > khalf) | (kmax_f > khalf))[0]
    if len(offenders) and alias == "error":
        kmax = int(max(kmax_e.max(), kmax_f.max()))
        raise StencilError(
            f"stencil theta offset {kmax} exceeds ntheta/2 = {khalf} at "
            f"{len(offenders)} voxels; the orientation sampling is too coarse "
            "for the requested anisotropy (alias='clip' blunts those voxels)")
    for p in offenders:
        lam[p], eoff[p] = _clip_symmetric(D[p], khalf)
        mu[p], foff[p] = _clip_oneside(eta[p], eps_rel, khalf)
    if len(offenders):
        eoff[lam <= 0.0] = 0
        foff[mu <= 0.0] = 0

    rad_e = np.sqrt((eoff.astype(np.float64) ** 2).sum(axis=2)).max(initial=0.0)
    rad_f = np.sqrt((foff.astype(np.float64) ** 2).sum(axis=2)).max(initial=0.0)
    return StencilField(g, lam, eoff, mu, foff,
                        max_radius=float(max(rad_e, rad_f)), margin=margin,
                        n_clipped=len(offenders))


def _clip_symmetric(D, khalf):
    """Smallest isotropy blend of D whose Selling offsets fit the theta band."""
    iso = np.eye(3) * (np.trace(D) / 3.0)

    def attempt(t):
        Dt = (1.0 - t) * D + t * iso
        w, e, ok = K._selling3(Dt, 1e-12 * np.trace(Dt), _ITMAX)
        fits = ok and np.abs(e[:, 2]).max() <= khalf
        return fits, w, e

    lo, hi = 0.0, 1.0
    fits, w, e = attempt(1.0)
    for _ in range(20):
        mid = 0.5 * (lo + hi)
        f2, w2, e2 = attempt(mid)
        if f2:
            hi, (w, e) = mid, (w2, e2)
        else:
            lo = mid
    return w, e.astype(np.int16)


def _clip_oneside(eta, eps_rel, khalf):
    """Enlarge the one-sided relaxation until its offsets fit the theta band."""
    er = eps_rel
    for _ in range(30):
        w, f, ok = K._halfline3(eta, min(er, 0.999), _ITMAX)
        if ok and (len(f) == 0 or np.abs(f[:, 2]).max() <= khalf):
            return w, f.astype(np.int16)
        er *= 1.5
    # last resort: drop the one-sided part at this voxel
    return np.zeros(6), np.zeros((6, 3), dtype=np.int16)
