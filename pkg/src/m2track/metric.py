"""
Metric tensor fields on the lifted domain and their Finsler duals.

The model is an anisotropic Reeds-Shepp style quasi-norm: a symmetric
positive definite matrix per voxel plus a one-sided "no reverse gear" term
driven by a forward covector,

    F(p, v)^2 = <v, G(p) v> + <w_fwd(p), v>_-^2 ,

with the cost already folded into G and w_fwd.  The data-driven variant adds
a normalized quadratic form built from the Hessian of the orientation score,
so the cheapest direction bends along the lifted line structures.

Unit convention: all matrices and covectors here live in *index* coordinates
(x, y in pixels, theta in grid steps), i.e. the theta components carry the
appropriate powers of htheta.  That keeps the finite-difference offsets of
the solver on the integer lattice.  Frames exported for differential
geometry are converted back to physical components.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .diffgeo import HessianField, SampledFrame
from .grid import GridM2, LiftedField


@dataclass
class ModelParams:
    """Parameters of the tracking metric.

    xi : bending stiffness, sqrt(g11); default xi^2 = 0.01.
    zeta : spatial anisotropy (sideways cost ratio); sub-Riemannian as
        zeta -> 0, default 0.1.
    eps : reverse-gear relaxation in (0, 1]; eps = 1 is the symmetric model,
        small eps forbids backward motion, default 0.1.
    lam : weight of the data-driven second-order term, >= 0.
    g33 : angular weight, default 1.
    """

    xi: float = 0.1
    zeta: float = 0.1
    eps: float = 1.0
    lam: float = 0.0
    g33: float = 1.0

    def __post_init__(self):
        if self.xi <= 0 or self.g33 <= 0:
            raise ValueError("xi and g33 must be positive")
        if self.zeta <= 0:
            raise ValueError("zeta must be positive")
        if not (0.0 < self.eps <= 1.0):
            raise ValueError("eps must lie in (0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")

    @property
    def forward_gain(self) -> float:
        """sqrt(eps^-2 - 1); zero in the symmetric model."""
        return np.sqrt(max(self.eps ** -2 - 1.0, 0.0))

    @property
    def eps_tilde(self) -> float:
        """Relaxation scale of the one-sided term: eps_tilde^-2 = (eps^-2 - 1) xi^2."""
        g = self.forward_gain * self.xi
        return np.inf if g == 0.0 else 1.0 / g


@dataclass
class MetricField:
    """Per-voxel SPD matrix G and forward covector w_fwd, index coordinates.

    ``cost`` is the per-voxel cost C in [delta, 1] already included in G and
    w_fwd (quadratically resp. linearly).
    """

    grid: GridM2
    G: np.ndarray = field(repr=False)
    wfwd: np.ndarray = field(repr=False)
    cost: np.ndarray = field(repr=False)

    def finsler_sq(self, vdot_idx: np.ndarray) -> np.ndarray:
        """F^2 of one index-coordinate tangent per voxel (broadcast over the grid)."""
        q = np.einsum("...a,...ab,...b->...", vdot_idx, self.G, vdot_idx)
        neg = np.minimum(np.einsum("...a,...a->...", self.wfwd, vdot_idx), 0.0)
        return q + neg * neg


def coframe_index_units(grid: GridM2):
    """Left-invariant co-frame in index coordinates, per theta sample.

    Returns (ntheta, 3, 3) with rows omega^1, omega^2, omega^3; the theta
    component of omega^3 is htheta so that offsets pair with the index
    lattice.
    """
    th = grid.thetas
    c, s = np.cos(th), np.sin(th)
    z = np.zeros_like(c)
    om = np.stack([
        np.stack([c, s, z], axis=-1),
        np.stack([-s, c, z], axis=-1),
        np.stack([z, z, np.full_like(c, grid.htheta)], axis=-1),
    ], axis=-2)
    return om


def base_metric(cost: LiftedField, params: ModelParams) -> MetricField:
    """The (cost-scaled) left-invariant Reeds-Shepp metric.

    G = C^2 (xi^2 w1 w1^T + (xi/zeta)^2 w2 w2^T + g33 w3 w3^T) and the
    forward covector C * sqrt(eps^-2 - 1) * xi * w1, all in index units.
    """
    g = cost.grid
    om = coframe_index_units(g)
    gg = (params.xi ** 2 * np.einsum("ka,kb->kab", om[:, 0], om[:, 0])
          + (params.xi / params.zeta) ** 2 * np.einsum("ka,kb->kab", om[:, 1], om[:, 1])
          + params.g33 * np.einsum("ka,kb->kab", om[:, 2], om[:, 2]))
    C = cost.values
    G = C[..., None, None] ** 2 * gg  # broadcast over (nx, ny, ntheta)
    w = params.forward_gain * params.xi * C[..., None] * om[None, None, :, 0, :]
    return MetricField(g, np.ascontiguousarray(G), np.ascontiguousarray(w), C.copy())


def data_driven_metric(base: MetricField, hess: HessianField, params: ModelParams,
                       guard: float = 1e-8) -> MetricField:
    """Add the normalized second-order score term to a base metric.

    The added quadratic form is lam * C^2 * N / nmax where N realizes the
    dual-norm square of the Hessian row contraction and nmax is its largest
    eigenvalue (the maximum over Euclidean-unit tangents).  Voxels where the
    score is flat (nmax below guard * global max) get no data term, keeping
    the coercivity bound of the base metric intact.

    The forward covector is not modified here; rebuild it from the gauge
    frame via :func:`forward_covector` when asymmetry is wanted.
    """
    if params.lam == 0.0:
        return MetricField(base.grid, base.G.copy(), base.wfwd.copy(), base.cost.copy())
    N, nmax = hess.quadratic_form()
    tau = guard * float(nmax.max())
    if tau == 0.0:  # flat score: no data term anywhere
        return MetricField(base.grid, base.G.copy(), base.wfwd.copy(), base.cost.copy())
    scale = np.where(nmax > tau, params.lam * base.cost ** 2 / np.maximum(nmax, tau), 0.0)
    # physical -> index units: theta rows/cols pick up htheta
    s = np.array([1.0, 1.0, base.grid.htheta])
    N_idx = N * s[:, None] * s[None, :]
    G = base.G + scale[..., None, None] * N_idx
    return MetricField(base.grid, G, base.wfwd.copy(), base.cost.copy())


# ---------------------------------------------------------------------------
# gauge frame by diagonalization
# ---------------------------------------------------------------------------

@dataclass
class GaugeFrame:
    """Orthonormal (in index coordinates) eigenframe of a metric field.

    ``covecs_idx[..., i, :]`` is the i-th eigencovector, ``alphas[..., i]``
    its eigenvalue; labeled so that i = 0 is the cheapest direction (aligned
    with the forward axis), i = 2 the most angular one, with a positively
    oriented triple.  In index coordinates vectors and covectors coincide.
    """

    grid: GridM2
    alphas: np.ndarray = field(repr=False)
    covecs_idx: np.ndarray = field(repr=False)

    def reconstruct(self) -> np.ndarray:
        return np.einsum("...i,...ia,...ib->...ab", self.alphas, self.covecs_idx,
                         self.covecs_idx)

    def to_frame(self) -> SampledFrame:
        """Physical-components frame with metric eigenvalues attached."""
        s = np.array([1.0, 1.0, self.grid.htheta])
        vecs = self.covecs_idx * s  # A_phys = S A_idx
        covecs = self.covecs_idx / s  # omega_phys = S^-1 omega_idx
        return SampledFrame(self.grid, np.ascontiguousarray(vecs),
                            np.ascontiguousarray(covecs), self.alphas.copy())


def _orient_subspace(v_ref, v1, v2):
    """Projection of a reference direction onto span{v1, v2}, normalized.

    Used to break eigenvector ties deterministically; falls back to v1 where
    the reference is orthogonal to the subspace.
    """
    c1 = np.einsum("...a,...a->...", v_ref, v1)
    c2 = np.einsum("...a,...a->...", v_ref, v2)
    proj = c1[..., None] * v1 + c2[..., None] * v2
    nrm = np.linalg.norm(proj, axis=-1, keepdims=True)
    ok = nrm[..., 0] > 1e-12
    out = np.where(ok[..., None], proj / np.where(nrm > 0, nrm, 1.0), v1)
    return out


def diagonalize(mf: MetricField, tie_tol: float = 1e-9) -> GaugeFrame:
    """Eigendecomposition of the metric into the gauge frame.

    Labeling is by alignment with the left-invariant reference directions:
    omega^3 is the eigencovector most aligned with the angular axis (sign
    fixed upward), omega^1 the remaining one most aligned with A1 (sign
    fixed so <omega^1, A1> >= 0), and omega^2 completes a positively
    oriented triple.  For metrics whose cheapest direction hugs the forward
    axis (the tracking regime) this coincides with picking the smallest
    eigenvalue as omega^1, but unlike that rule it stays continuous when
    the eigenvalue order changes, e.g. on fine orientation grids where the
    angular direction is the cheapest in index units.

    Exactly degenerate eigenvalue pairs are aligned to the reference
    directions inside the degenerate subspace, so the output is
    deterministic.
    """
    g = mf.grid
    w, V = np.linalg.eigh(mf.G)  # ascending; columns are eigenvectors
    v = np.swapaxes(V, -1, -2)  # rows
    al = w

    th = g.thetas
    a1_ref = np.zeros(g.shape + (3,))
    a1_ref[..., 0] = np.cos(th)
    a1_ref[..., 1] = np.sin(th)
    e3 = np.zeros(g.shape + (3,))
    e3[..., 2] = 1.0

    # degenerate eigenpairs: rotate inside the eigenplane towards the
    # reference directions before labeling
    tr = np.einsum("...ii->...", mf.G)
    tie01 = np.abs(al[..., 1] - al[..., 0]) <= tie_tol * tr
    tie12 = np.abs(al[..., 2] - al[..., 1]) <= tie_tol * tr
    for tie, (i, j), ref in ((tie01, (0, 1), a1_ref), (tie12, (1, 2), e3)):
        if not np.any(tie):
            continue
        fixed = _orient_subspace(ref, v[..., i, :], v[..., j, :])
        vi = np.where(tie[..., None], fixed, v[..., i, :])
        # complete the pair orthonormally inside the plane
        vj = v[..., j, :]
        dot = np.einsum("...a,...a->...", vj, vi)
        vj = vj - dot[..., None] * vi
        nrm = np.linalg.norm(vj, axis=-1, keepdims=True)
        small = nrm[..., 0] <= 1e-12
        alt = np.cross(vi, v[..., (3 - i - j), :])
        vj = np.where(small[..., None], alt, vj / np.where(nrm > 0, nrm, 1.0))
        v[..., i, :] = vi
        v[..., j, :] = vj

    # assign omega^3 (most angular), then omega^1 (most forward among the rest)
    e3_align = np.abs(v[..., :, 2])
    pick3 = np.argmax(e3_align, axis=-1)
    a1_align = np.abs(np.einsum("...ia,...a->...i", v, a1_ref))
    a1_align_masked = a1_align.copy()
    np.put_along_axis(a1_align_masked, pick3[..., None], -1.0, axis=-1)
    pick1 = np.argmax(a1_align_masked, axis=-1)
    pick2 = 3 - pick3 - pick1

    def take(rows, picks):
        return np.take_along_axis(rows, picks[..., None, None], axis=-2)[..., 0, :]

    v1 = take(v, pick1)
    v3 = take(v, pick3)
    a1 = np.take_along_axis(al, pick1[..., None], axis=-1)[..., 0]
    a2 = np.take_along_axis(al, pick2[..., None], axis=-1)[..., 0]
    a3 = np.take_along_axis(al, pick3[..., None], axis=-1)[..., 0]

    # sign conventions
    s1 = np.einsum("...a,...a->...", v1, a1_ref)
    v1 = np.where((s1 < 0)[..., None], -v1, v1)
    v3 = np.where((v3[..., 2] < 0)[..., None], -v3, v3)
    # omega^2 completes a right-handed triple
    v2 = np.cross(v3, v1)

    covecs = np.stack([v1, v2, v3], axis=-2)
    alphas = np.stack([a1, a2, a3], axis=-1)
    return GaugeFrame(g, np.ascontiguousarray(alphas), np.ascontiguousarray(covecs))


def forward_covector(gauge: GaugeFrame, params: ModelParams) -> np.ndarray:
    """Data-driven forward covector sqrt(eps^-2 - 1) * sqrt(alpha_1) * omega^1.

    Reduces to the base-model covector when the metric is the plain
    left-invariant one.  Index coordinates, like the metric.
    """
    gain = params.forward_gain
    return gain * np.sqrt(gauge.alphas[..., 0])[..., None] * gauge.covecs_idx[..., 0, :]


# ---------------------------------------------------------------------------
# mixed model
# ---------------------------------------------------------------------------

def crossing_weight(shape, crossings, a: float = 5.0, sigma: float = 1.0) -> np.ndarray:
    """Smoothed indicator of square boxes around annotated crossing pixels.

    kappa = 1_{union of [x_i - a, x_i + a]^2} * Gaussian(sigma), clamped to
    [0, 1]; shape (nx, ny).
    """
    kap = np.zeros(shape, dtype=np.float64)
    for cx, cy in crossings:
        x0, x1 = int(np.ceil(cx - a)), int(np.floor(cx + a))
        y0, y1 = int(np.ceil(cy - a)), int(np.floor(cy + a))
        kap[max(x0, 0):x1 + 1, max(y0, 0):y1 + 1] = 1.0
    if sigma > 0 and crossings:
        kap = ndimage.gaussian_filter(kap, sigma, mode="nearest")
    return np.clip(kap, 0.0, 1.0)


def mixed_metric(li: MetricField, dd: MetricField, crossings, a: float = 5.0,
                 sigma: float = 1.0) -> MetricField:
    """Blend the left-invariant and data-driven metrics near crossings.

    G_M = kappa G_LI + (1 - kappa) G_DD per voxel; the forward covectors mix
    with sqrt(kappa) weights so the one-sided term interpolates
    quadratically as well.
    """
    kap2 = crossing_weight((li.grid.nx, li.grid.ny), crossings, a, sigma)
    kG = kap2[:, :, None, None, None]
    kw = kap2[:, :, None, None]
    G = kG * li.G + (1.0 - kG) * dd.G
    w = np.sqrt(kw) * li.wfwd + np.sqrt(1.0 - kw) * dd.wfwd
    return MetricField(li.grid, G, w, li.cost.copy())


# ---------------------------------------------------------------------------
# dual coefficients
# ---------------------------------------------------------------------------

@dataclass
class DualMetricField:
    """Per-voxel coefficients (D, eta, C) of the dual quasi-norm.

    F*(p, phat)^2 = C^-2 (<phat, D phat> + <phat, eta>_+^2), index
    coordinates throughout.
    """

    grid: GridM2
    D: np.ndarray = field(repr=False)
    eta: np.ndarray = field(repr=False)
    cost: np.ndarray = field(repr=False)

    def dual_sq(self, phat: np.ndarray) -> np.ndarray:
        q = np.einsum("...a,...ab,...b->...", phat, self.D, phat)
        pos = np.maximum(np.einsum("...a,...a->...", self.eta, phat), 0.0)
        return (q + pos * pos) / self.cost ** 2


def asym_dual(M: np.ndarray, w: np.ndarray):
    """Closed-form dual coefficients of F^2 = <v, M v> + <w, v>_-^2.

    D = (M + w w^T)^-1 and eta = M^-1 w / sqrt(1 + w^T M^-1 w); batched over
    leading dimensions.
    """
    A = M + np.einsum("...a,...b->...ab", w, w)
    D = np.linalg.inv(A)
    Minv_w = np.linalg.solve(M, w[..., None])[..., 0]
    denom = np.sqrt(1.0 + np.einsum("...a,...a->...", w, Minv_w))
    eta = Minv_w / denom[..., None]
    return D, eta


def dual_coefficients(mf: MetricField) -> DualMetricField:
    """Dual quasi-norm coefficients of a metric field.

    Strips the cost factor (M = G / C^2, w = w_fwd / C), applies the exact
    closed form, and carries C so that evaluation and the eikonal scheme can
    reapply it.
    """
    C = mf.cost
    M = mf.G / C[..., None, None] ** 2
    w = mf.wfwd / C[..., None]
    D, eta = asym_dual(M, w)
    return DualMetricField(mf.grid, np.ascontiguousarray(D), np.ascontiguousarray(eta),
                           C.copy())


def dual_eps_model(M0, w1, w2, eps_t):
    """Exact dual coefficients at relaxation eps_t (pointwise matrices)."""
    M = M0 + eps_t ** -2 * np.einsum("...a,...b->...ab", w2, w2)
    w = np.asarray(w1) / eps_t
    return asym_dual(M, w)


def dual_eps_limit(M0, w1, w2):
    """Limit coefficients of the relaxed dual as eps_t -> 0.

    D -> A A^T / (A^T M0 A) with A = w1 x w2, and eta -> M0^-1 (w1 - a w2)
    normalized, a the M0^-1-orthogonalization coefficient of w1 against w2.
    """
    A = np.cross(w1, w2)
    denom = np.einsum("...a,...ab,...b->...", A, M0, A)
    D = np.einsum("...a,...b->...ab", A, A) / denom[..., None, None]
    M0inv_w1 = np.linalg.solve(M0, np.asarray(w1)[..., None])[..., 0]
    M0inv_w2 = np.linalg.solve(M0, np.asarray(w2)[..., None])[..., 0]
    a = (np.einsum("...a,...a->...", w2, M0inv_w1)
         / np.einsum("...a,...a->...", w2, M0inv_w2))
    v = M0inv_w1 - a[..., None] * M0inv_w2
    nrm = np.sqrt(np.einsum("...a,...a->...", w1, v))
    eta = v / nrm[..., None]
    return D, eta
