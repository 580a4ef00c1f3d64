"""
Differential geometry on the lifted domain.

Provides the moving frames used throughout: the left-invariant frame
A1 = (cos t, sin t, 0), A2 = (-sin t, cos t, 0), A3 = (0, 0, 1) and
grid-sampled data-driven frames, plus Gaussian derivatives, the (asymmetric)
Hessian field of a score with its dual norm, numerically computed structure
functions of a frame, momentum-transport residuals, and exponential-curve
integration.

Frame vector and covector components here are always in the fixed coordinate
frame (d/dx, d/dy, d/dtheta), x and y in pixels and theta in radians.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .curves import Geodesic, unwrap_theta
from .grid import GridM2, LiftedField, interp_values, canonical_theta


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------

class LeftInvariantFrame:
    """The analytic left-invariant frame, evaluable at arbitrary points.

    ``alphas`` optionally attaches constant metric eigenvalues so the frame
    can stand in for a gauge frame of a uniform metric.
    """

    def __init__(self, alphas=None):
        self.alphas = None if alphas is None else np.asarray(alphas, dtype=np.float64)

    @staticmethod
    def vectors_at(pts):
        pts = np.asarray(pts, dtype=np.float64)
        th = pts[..., 2]
        c, s = np.cos(th), np.sin(th)
        z = np.zeros_like(c)
        one = np.ones_like(c)
        return np.stack([
            np.stack([c, s, z], axis=-1),
            np.stack([-s, c, z], axis=-1),
            np.stack([z, z, one], axis=-1),
        ], axis=-2)

    # for an orthonormal-in-the-group sense frame the covector components
    # coincide with the vector components
    covectors_at = vectors_at

    def alphas_at(self, pts):
        if self.alphas is None:
            raise ValueError("frame carries no metric eigenvalues")
        pts = np.asarray(pts, dtype=np.float64)
        return np.broadcast_to(self.alphas, pts.shape[:-1] + (3,)).copy()


@dataclass
class SampledFrame:
    """A per-voxel frame with dual co-frame, components in fixed coordinates.

    vecs[..., i, :] are the components of the i-th frame vector field,
    covecs[..., i, :] those of the dual covector field, so that
    <covecs[i], vecs[j]> = delta_ij at every voxel.  ``alphas`` holds the
    metric eigenvalues when the frame diagonalizes a metric.
    """

    grid: GridM2
    vecs: np.ndarray = field(repr=False)
    covecs: np.ndarray = field(repr=False)
    alphas: Optional[np.ndarray] = field(default=None, repr=False)

    def vectors_at(self, pts):
        comps = [self.vecs[..., i, j] for i in range(3) for j in range(3)]
        flat = interp_values(self.grid, pts, *comps)
        out = np.stack(flat, axis=-1)
        return out.reshape(out.shape[:-1] + (3, 3))

    def covectors_at(self, pts):
        comps = [self.covecs[..., i, j] for i in range(3) for j in range(3)]
        flat = interp_values(self.grid, pts, *comps)
        out = np.stack(flat, axis=-1)
        return out.reshape(out.shape[:-1] + (3, 3))

    def alphas_at(self, pts):
        if self.alphas is None:
            raise ValueError("frame carries no metric eigenvalues")
        flat = interp_values(self.grid, pts, *(self.alphas[..., i] for i in range(3)))
        return np.stack(flat, axis=-1)

    def duality_defect(self) -> float:
        """max |<omega^i, A_j> - delta_ij| over all voxels."""
        pair = np.einsum("...im,...jm->...ij", self.covecs, self.vecs)
        return float(np.abs(pair - np.eye(3)).max())


def left_invariant_frame(grid: GridM2, alphas=None) -> SampledFrame:
    """Sample the left-invariant frame on a grid."""
    th = grid.thetas
    c, s = np.cos(th), np.sin(th)
    z = np.zeros_like(c)
    one = np.ones_like(c)
    vec = np.stack([
        np.stack([c, s, z], axis=-1),
        np.stack([-s, c, z], axis=-1),
        np.stack([z, z, one], axis=-1),
    ], axis=-2)  # (ntheta, 3, 3)
    vecs = np.broadcast_to(vec, (grid.nx, grid.ny, grid.ntheta, 3, 3)).copy()
    al = None
    if alphas is not None:
        al = np.broadcast_to(np.asarray(alphas, dtype=np.float64),
                             (grid.nx, grid.ny, grid.ntheta, 3)).copy()
    return SampledFrame(grid, vecs, vecs.copy(), al)


# ---------------------------------------------------------------------------
# Gaussian derivatives
# ---------------------------------------------------------------------------

def _smooth(values: np.ndarray, grid: GridM2, sigma_s: float, sigma_a: float) -> np.ndarray:
    out = values
    if sigma_s > 0:
        out = ndimage.gaussian_filter1d(out, sigma_s, axis=0, mode="nearest", truncate=4.0)
        out = ndimage.gaussian_filter1d(out, sigma_s, axis=1, mode="nearest", truncate=4.0)
    if sigma_a > 0:
        out = ndimage.gaussian_filter1d(out, sigma_a / grid.htheta, axis=2, mode="wrap",
                                        truncate=4.0)
    return out


def _diff1(v, axis, periodic):
    if periodic:
        return 0.5 * (np.roll(v, -1, axis=axis) - np.roll(v, 1, axis=axis))
    d = np.empty_like(v)
    sl = [slice(None)] * v.ndim

    def ax(s):
        t = list(sl)
        t[axis] = s
        return tuple(t)

    d[ax(slice(1, -1))] = 0.5 * (v[ax(slice(2, None))] - v[ax(slice(0, -2))])
    d[ax(0)] = v[ax(1)] - v[ax(0)]
    d[ax(-1)] = v[ax(-1)] - v[ax(-2)]
    return d


def _diff2(v, axis, periodic):
    if periodic:
        return np.roll(v, -1, axis=axis) - 2.0 * v + np.roll(v, 1, axis=axis)
    d = np.empty_like(v)
    sl = [slice(None)] * v.ndim

    def ax(s):
        t = list(sl)
        t[axis] = s
        return tuple(t)

    d[ax(slice(1, -1))] = v[ax(slice(2, None))] - 2.0 * v[ax(slice(1, -1))] + v[ax(slice(0, -2))]
    d[ax(0)] = d[ax(1)]
    d[ax(-1)] = d[ax(-2)]
    return d


def gaussian_derivative(fld: LiftedField, order, sigma_s: float = 0.0,
                        sigma_a: float = 0.0) -> LiftedField:
    """Gaussian-regularized derivative of a lifted field.

    Parameters
    ----------
    order : (ox, oy, ot)
        Derivative multi-index; total order at most 2.  Central differences
        are exact on quadratics in the interior.
    sigma_s, sigma_a : float
        Smoothing scales, pixels for x/y and radians for theta.  Zero means
        no smoothing along those axes.

    The theta axis is periodic; derivatives are per radian.
    """
    ox, oy, ot = order
    if min(ox, oy, ot) < 0 or ox + oy + ot > 2:
        raise ValueError(f"unsupported derivative order {order}")
    v = _smooth(fld.values, fld.grid, sigma_s, sigma_a)
    for axis, n in ((0, ox), (1, oy), (2, ot)):
        periodic = axis == 2
        if n == 2:
            v = _diff2(v, axis, periodic)
        elif n == 1:
            v = _diff1(v, axis, periodic)
    v = v / fld.grid.htheta ** ot
    return LiftedField(fld.grid, v)


# ---------------------------------------------------------------------------
# Hessian of a score
# ---------------------------------------------------------------------------

@dataclass
class HessianField:
    """Per-voxel 3x3 Hessian of a score in fixed coordinates (not symmetric).

    The torsion of the underlying connection puts first-order corrections in
    the mixed x-theta and y-theta slots:

        [ Uxx   Uxy   Uxt + Uy ]
        [ Uxy   Uyy   Uyt - Ux ]
        [ Uxt   Uyt   Utt      ]

    The dual norm of a row contraction is taken with weights
    M_xi = diag(1/xi, 1/xi, 1).
    """

    grid: GridM2
    H: np.ndarray = field(repr=False)
    xi: float = 0.1

    def dual_norm_sq(self, pdot) -> np.ndarray:
        """|| M_xi H^T pdot ||^2 per voxel, for one fixed tangent ``pdot``."""
        m = np.array([1.0 / self.xi, 1.0 / self.xi, 1.0])
        v = np.einsum("...ab,a->...b", self.H, np.asarray(pdot, dtype=np.float64)) * m
        return np.sum(v * v, axis=-1)

    def quadratic_form(self):
        """The symmetric matrix N with pdot^T N pdot = dual_norm_sq(pdot),
        and its per-voxel largest eigenvalue (max over Euclidean-unit pdot)."""
        m2 = np.array([1.0 / self.xi ** 2, 1.0 / self.xi ** 2, 1.0])
        N = np.einsum("...ab,b,...cb->...ac", self.H, m2, self.H)
        nmax = np.linalg.eigvalsh(N)[..., -1]
        return N, nmax


def hessian_field(score: LiftedField, xi: float, sigma_s: float = 1.0,
                  sigma_a: float = 0.0) -> HessianField:
    """Build the Hessian field of a score from Gaussian derivatives."""
    if xi <= 0:
        raise ValueError("xi must be positive")
    d = {}
    for name, order in (("x", (1, 0, 0)), ("y", (0, 1, 0)),
                        ("xx", (2, 0, 0)), ("xy", (1, 1, 0)), ("yy", (0, 2, 0)),
                        ("xt", (1, 0, 1)), ("yt", (0, 1, 1)), ("tt", (0, 0, 2))):
        d[name] = gaussian_derivative(score, order, sigma_s, sigma_a).values
    H = np.empty(score.grid.shape + (3, 3), dtype=np.float64)
    H[..., 0, 0] = d["xx"]
    H[..., 0, 1] = d["xy"]
    H[..., 0, 2] = d["xt"] + d["y"]
    H[..., 1, 0] = d["xy"]
    H[..., 1, 1] = d["yy"]
    H[..., 1, 2] = d["yt"] - d["x"]
    H[..., 2, 0] = d["xt"]
    H[..., 2, 1] = d["yt"]
    H[..., 2, 2] = d["tt"]
    return HessianField(score.grid, H, xi)


# ---------------------------------------------------------------------------
# structure functions
# ---------------------------------------------------------------------------

@dataclass
class StructureFunctions:
    """Per-voxel frame commutator coefficients c[..., i, j, k].

    [A_i, A_j] = sum_k c_ijk A_k with c antisymmetric in (i, j) by
    construction.  For the left-invariant frame these reduce (up to the
    discretization of the theta derivative) to the group's structure
    constants: c_312 = 1, c_321 = -1.
    """

    grid: GridM2
    c: np.ndarray = field(repr=False)

    def at(self, pts):
        comps = [self.c[..., i, j, k] for i in range(3) for j in range(3) for k in range(3)]
        flat = interp_values(self.grid, pts, *comps)
        out = np.stack(flat, axis=-1)
        return out.reshape(out.shape[:-1] + (3, 3, 3))


def structure_functions(frame: SampledFrame) -> StructureFunctions:
    """Commutators of the frame fields by central finite differences.

    The bracket's fixed-coordinate components are A_i(A_j components) minus
    A_j(A_i components); directional derivatives contract the frame with
    axis-wise derivatives of the component grids.
    """
    g = frame.grid
    vec = frame.vecs
    # dvec[a, i, m] = d/d(axis a) of component m of frame vector i
    dvec = np.empty((3,) + vec.shape, dtype=np.float64)
    for m in range(3):
        for i in range(3):
            v = vec[..., i, m]
            dvec[0, ..., i, m] = _diff1(v, 0, False)
            dvec[1, ..., i, m] = _diff1(v, 1, False)
            dvec[2, ..., i, m] = _diff1(v, 2, True) / g.htheta

    c = np.zeros(vec.shape[:-2] + (3, 3, 3), dtype=np.float64)
    for i, j in ((0, 1), (0, 2), (1, 2)):
        bracket = np.zeros(vec.shape[:-2] + (3,), dtype=np.float64)
        for a in range(3):
            bracket += vec[..., i, a, None] * dvec[a][..., j, :]
            bracket -= vec[..., j, a, None] * dvec[a][..., i, :]
        cij = np.einsum("...km,...m->...k", frame.covecs, bracket)
        c[..., i, j, :] = cij
        c[..., j, i, :] = -cij
    return StructureFunctions(g, c)


# ---------------------------------------------------------------------------
# momentum transport residual
# ---------------------------------------------------------------------------

def parallel_momentum_residual(geo: Geodesic, gauge, struct: StructureFunctions,
                               trim: float = 0.1):
    """Residual of the momentum half of the geodesic Hamiltonian system.

    Along a shortest curve the gauge momentum components satisfy
    lam_i' = sum_jk c_jik lam_k lam^j with lam^j = lam_j / alpha_j, the
    derivative taken in the canonical (unit-momentum) time.  Backtracked
    curves run over t in [0, 1] and carry unit-scale momentum, so their
    parameter is rescaled by the curve length before differentiating.

    Returns (residual (n,3), max residual norm over the trimmed interior,
    max momentum norm).
    """
    if geo.momentum is None:
        raise ValueError("geodesic carries no momentum record")
    if geo.n < 3:
        raise ValueError("geodesic shorter than 3 samples")
    lam = geo.momentum
    # canonical time = metric arclength, recovered segment-wise from the
    # gauge eigen-structure: ds^2 = sum_i alpha_i <omega^i, dgamma>^2
    mid = 0.5 * (geo.points[1:] + geo.points[:-1])
    om = gauge.covectors_at(mid)
    al_mid = gauge.alphas_at(mid)
    seg = geo.points[1:] - geo.points[:-1]
    comp = np.einsum("nim,nm->ni", om, seg)
    ds = np.sqrt(np.maximum(np.sum(al_mid * comp ** 2, axis=1), 1e-300))
    t = np.concatenate([[0.0], np.cumsum(ds)])
    lam_dot = np.gradient(lam, t, axis=0)
    alph = gauge.alphas_at(geo.points)
    lam_up = lam / alph
    cijk = struct.at(geo.points)
    # r_i = lam_i' - c_jik lam_k lam^j
    drift = np.einsum("njik,nk,nj->ni", cijk, lam, lam_up)
    resid = lam_dot - drift
    n = geo.n
    lo, hi = int(np.ceil(trim * n)), n - int(np.ceil(trim * n))
    lo, hi = min(lo, n - 1), max(hi, lo + 1)
    r_norm = np.linalg.norm(resid[lo:hi], axis=1)
    lam_norm = np.linalg.norm(lam[lo:hi], axis=1)
    return resid, float(r_norm.max()), float(lam_norm.max())


# ---------------------------------------------------------------------------
# exponential curves
# ---------------------------------------------------------------------------

def straight_curve(p0, coeffs, frame, T: float = 1.0, dt: float = 1e-3,
                   bounds=None) -> Geodesic:
    """Integrate a curve with constant gauge components of its velocity.

    RK4 integration of gamma' = sum_i c^i A_i(gamma).  ``frame`` is any
    object with ``vectors_at``; ``bounds`` optionally restricts (x, y) to
    [0, nx-1] x [0, ny-1], truncating the curve (flagged in ``note``) when
    it exits.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    p = np.array([p0[0], p0[1], p0[2]], dtype=np.float64)

    def vel(q):
        return c @ frame.vectors_at(q)

    n_steps = int(round(T / dt))
    pts = np.empty((n_steps + 1, 3), dtype=np.float64)
    pts[0] = p
    note = ""
    m = 0
    for m in range(1, n_steps + 1):
        try:
            k1 = vel(p)
            k2 = vel(p + 0.5 * dt * k1)
            k3 = vel(p + 0.5 * dt * k2)
            k4 = vel(p + dt * k3)
        except Exception:
            note = "exited domain"
            m -= 1
            break
        p = p + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if bounds is not None and not (0 <= p[0] <= bounds[0] - 1 and 0 <= p[1] <= bounds[1] - 1):
            note = "exited domain"
            m -= 1
            break
        pts[m] = p
    pts = pts[:m + 1]
    pts[:, 2] = unwrap_theta(pts[:, 2])
    t = np.linspace(0.0, dt * m, m + 1)
    return Geodesic(t=t, points=pts, reached=(note == ""), note=note)


def gauge_components_of_velocity(geo: Geodesic, frame) -> np.ndarray:
    """<omega^i, dgamma/dt> along a sampled curve, by centered differences."""
    vel = np.gradient(geo.points, geo.t, axis=0)
    om = frame.covectors_at(geo.points)
    return np.einsum("nim,nm->ni", om, vel)
