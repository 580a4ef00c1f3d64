"""
Geodesic extraction: steepest descent on distance maps, and Hamiltonian
shooting as an independent route to the same curves.

Backtracking integrates the descent field of the dual quasi-norm evaluated
on the interpolated gradient of the distance map, scaled so the curve
parameter runs over [0, 1] from the query point down to the source set
(second-order Runge-Kutta).  The gauge variant integrates the same descent
expressed in the eigenframe of the metric.  Shooting integrates the
canonical momentum system with RK4 and is used to cross-validate the
backtracked curves.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as K
from .curves import Geodesic, unwrap_theta
from .eikonal import DistanceMap
from .grid import TWO_PI, interp_values
from .metric import DualMetricField, MetricField


class BacktrackError(RuntimeError):
    """Raised when descent stalls; carries the partial curve."""

    def __init__(self, message, partial: Geodesic | None = None):
        super().__init__(message)
        self.partial = partial


def _masked_gradient(W: np.ndarray):
    """Index-space central differences of W, one-sided next to +inf values.

    Voxels with no finite neighbor along an axis get derivative 0 there.
    Returns (gx, gy, gk) with gk per index step (not per radian).
    """
    fin = np.isfinite(W)
    grads = []
    for axis in (0, 1, 2):
        if axis == 2:
            fwd_v, bwd_v = np.roll(W, -1, axis=axis), np.roll(W, 1, axis=axis)
            fwd_ok, bwd_ok = np.roll(fin, -1, axis=axis), np.roll(fin, 1, axis=axis)
        else:
            pad = [(0, 0)] * 3
            pad[axis] = (1, 1)
            Wp = np.pad(W, pad, constant_values=np.inf)
            sl_f = [slice(None)] * 3
            sl_b = [slice(None)] * 3
            sl_f[axis] = slice(2, None)
            sl_b[axis] = slice(0, -2)
            fwd_v, bwd_v = Wp[tuple(sl_f)], Wp[tuple(sl_b)]
            fwd_ok, bwd_ok = np.isfinite(fwd_v), np.isfinite(bwd_v)
        both = fwd_ok & bwd_ok & fin
        g = np.zeros_like(W)
        g[both] = 0.5 * (fwd_v[both] - bwd_v[both])
        only_f = fwd_ok & ~bwd_ok & fin
        g[only_f] = fwd_v[only_f] - W[only_f]
        only_b = bwd_ok & ~fwd_ok & fin
        g[only_b] = W[only_b] - bwd_v[only_b]
        grads.append(g)
    return grads


class _DescentContext:
    """Shared interpolation state for one backtracking run."""

    def __init__(self, dist: DistanceMap):
        g = dist.grid
        self.grid = g
        W = dist.W
        wmax = W[np.isfinite(W)].max()
        self.W_capped = np.where(np.isfinite(W), W, 1.5 * wmax + 1.0)
        self.gx, self.gy, self.gk = _masked_gradient(W)
        src = np.asarray(dist.sources, dtype=np.int64)
        ik = src % g.ntheta
        rest = src // g.ntheta
        iy = rest % g.ny
        ix = rest // g.ny
        self.src_pts = np.column_stack([ix, iy, ik]).astype(np.float64)

    def sample(self, p):
        """(W, dW_index) at a continuous point."""
        w, gx, gy, gk = interp_values(self.grid, p, self.W_capped, self.gx, self.gy, self.gk)
        return w, np.array([gx, gy, gk])

    def near_source(self, p):
        """Source point to snap to, or None.

        Snapping is spatial (within one voxel of a source pixel): a curve may
        legitimately arrive at the right pixel on a different orientation
        channel; the remaining motion to the lifted source is an in-place
        rotation, appended by the caller as a final segment.  The returned
        theta is the 2*pi branch of the source angle nearest the current one.
        """
        d = self.src_pts - np.array([p[0], p[1], p[2] / self.grid.htheta])
        nt = self.grid.ntheta
        dth = np.abs((d[:, 2] + nt / 2) % nt - nt / 2)
        cheb_sp = np.abs(d[:, :2]).max(axis=1)
        near = cheb_sp <= 1.0
        if not np.any(near):
            return None
        # among spatially near sources prefer the theta-closest
        cand = np.where(near)[0]
        i = cand[int(np.argmin(dth[cand]))]
        s = self.src_pts[i]
        th_s = s[2] * self.grid.htheta
        branch = th_s + TWO_PI * np.round((p[2] - th_s) / TWO_PI)
        return np.array([s[0], s[1], branch])


def _integrate_descent(start, dist, velocity_fn, dt_max, step_cap, t_budget=2.5,
                       record_momentum=None, ballistic_budget=0.0,
                       discrete_step=None):
    """Common RK2 descent driver; returns a Geodesic.

    Two robustness devices for fields built from long stencil arms:

    * within ``ballistic_budget`` index-units the previous direction is held
      through regions the interpolated field does not cover (arm chords skip
      voxels);
    * the distance value must keep descending; when an ODE step raises it
      above the best value seen so far (interpolated characteristic
      directions shear at Maxwell-like sets and can trap the curve in a
      loop), ``discrete_step`` jumps to the best descending stencil neighbor
      of the nearest voxel instead, which always makes progress.
    """
    ctx = _DescentContext(dist)
    g = dist.grid
    if discrete_step is not None:
        # rescue jumps spend step_cap of parameter each; allow for a path of
        # them (t is renormalized to [0, 1] at the end regardless)
        t_budget = max(t_budget, step_cap * 4.0 * (g.nx + g.ny + g.ntheta))
    p = np.array([start[0], start[1], start[2]], dtype=np.float64)
    w0, _ = ctx.sample(p)
    if not np.isfinite(w0) or w0 <= 0.0:
        raise BacktrackError("start point is a source or unreached")

    ts, pts = [0.0], [p.copy()]
    moms = None
    if record_momentum is not None:
        moms = [record_momentum(ctx, p)]
    t = 0.0
    stall = 0
    v_prev = None
    ballistic = 0.0
    w_best = w0
    w_slack = max(0.05 * w0, 1e-9)

    def probe(q, w):
        vq = velocity_fn(ctx, q, w)
        if np.linalg.norm(vq) > 1e-12:
            return vq
        return None

    def emit(q, dt_step):
        nonlocal t
        t += dt_step
        ts.append(t)
        pts.append(q.copy())
        if moms is not None:
            moms.append(record_momentum(ctx, q))

    def emit_segment(q, dt_step):
        # long jumps (discrete rescues, source snaps) are subdivided so the
        # polyline keeps sub-voxel spatial steps
        prev = pts[-1]
        span = max(np.linalg.norm((q - prev)[:2]), abs(q[2] - prev[2]) / g.htheta)
        n_sub = max(int(np.ceil(span / 1.0)), 1)
        for m in range(1, n_sub + 1):
            emit(prev + (q - prev) * (m / n_sub), dt_step / n_sub)

    def fail(msg):
        geo = _finalize(ts, pts, moms, w0, reached=False)
        raise BacktrackError(msg, geo)

    def rescue(msg):
        # jump to the best descending stencil neighbor; fails when none exists
        nonlocal p, w_best, v_prev, ballistic
        if discrete_step is None:
            return False
        q = discrete_step(p)
        if q is None:
            fail(msg)
        p = q
        w_here, _ = ctx.sample(p)
        w_best = min(w_best, w_here)
        ballistic = 0.0
        v_prev = None
        emit_segment(p, step_cap)
        return True

    for _ in range(200000):
        snap = ctx.near_source(p)
        if snap is not None:
            if np.linalg.norm(snap - p) > 1e-12:
                emit_segment(snap, step_cap)
            return _finalize(ts, pts, moms, w0, reached=True)
        if t > t_budget:
            break

        v = probe(p, w0)
        if v is None:
            if v_prev is not None and ballistic < ballistic_budget:
                v = v_prev  # hold course through a dead zone
            elif rescue("backtracking stalled (Maxwell point?)"):
                continue
            else:
                stall += 1
                if stall >= 10:
                    fail("backtracking stalled (Maxwell point?)")
                continue
        sp = np.linalg.norm([v[0], v[1], v[2] / g.htheta])  # index-space speed
        dt = min(dt_max, step_cap / sp)
        mid = p + 0.5 * dt * v
        mid[0] = np.clip(mid[0], 0.0, g.nx - 1.0)
        mid[1] = np.clip(mid[1], 0.0, g.ny - 1.0)
        vm = probe(mid, w0)
        if vm is None:
            vm = v
            ballistic += sp * dt
        else:
            ballistic = 0.0
        step = dt * vm
        p_new = p + step
        p_new[0] = np.clip(p_new[0], 0.0, g.nx - 1.0)
        p_new[1] = np.clip(p_new[1], 0.0, g.ny - 1.0)

        w_new, _ = ctx.sample(p_new)
        if ballistic == 0.0 and w_new > w_best + w_slack:
            # the interpolated field stopped descending
            if rescue("backtracking stopped descending (Maxwell point?)"):
                continue
            stall += 1
            if stall >= 20:
                fail("backtracking stopped descending (Maxwell point?)")
        if np.linalg.norm(step[:2]) + abs(step[2]) / g.htheta < 1e-6:
            if rescue("backtracking stalled (Maxwell point?)"):
                continue
            stall += 1
            if stall >= 20:
                fail("backtracking stalled (Maxwell point?)")
        else:
            stall = 0
        v_prev = vm
        p = p_new
        if np.isfinite(w_new):
            w_best = min(w_best, w_new)
        emit(p, dt)
    fail("backtracking exceeded its time budget")


def _finalize(ts, pts, moms, w0, reached):
    pts = np.asarray(pts)
    pts[:, 2] = unwrap_theta(pts[:, 2])
    t = np.asarray(ts)
    t = t / t[-1] if t[-1] > 0 else t
    mom = None if moms is None else np.asarray(moms)
    return Geodesic(t=t, points=pts, momentum=mom, length=float(w0), reached=reached)


def _momentum_recorder(gauge):
    if gauge is None:
        return None

    def rec(ctx, p):
        _, phat = ctx.sample(p)
        # physical gradient pairs with physical frame vectors; the sign makes
        # it the momentum of the curve as traversed (descending towards the
        # source), so the canonical transport identities hold sample-wise
        phat_phys = np.array([phat[0], phat[1], phat[2] / ctx.grid.htheta])
        A = gauge.vectors_at(p)
        return -(A @ phat_phys)

    return rec


def _best_descending_neighbor(dist: DistanceMap, stencils, q):
    """Stencil neighbor of voxel q with the smallest accepted W below W(q)."""
    g = dist.grid
    W3 = dist.W
    flat_q = (q[0] * g.ny + q[1]) * g.ntheta + q[2]
    best = None
    best_w = W3[q[0], q[1], q[2]]
    for n in range(6):
        cands = []
        if stencils.lam[flat_q, n] > 0.0:
            e = [int(v) for v in stencils.eoff[flat_q, n]]
            cands += [(q[0] - e[0], q[1] - e[1], (q[2] - e[2]) % g.ntheta),
                      (q[0] + e[0], q[1] + e[1], (q[2] + e[2]) % g.ntheta)]
        if stencils.mu[flat_q, n] > 0.0:
            f = [int(v) for v in stencils.foff[flat_q, n]]
            cands.append((q[0] - f[0], q[1] - f[1], (q[2] - f[2]) % g.ntheta))
        for r in cands:
            if 0 <= r[0] < g.nx and 0 <= r[1] < g.ny and W3[r] < best_w \
                    and dist.state[r] == 2:
                best_w = W3[r]
                best = r
    return best


def _discrete_stepper(dist: DistanceMap, stencils):
    """Continuous-point wrapper around the stencil-graph descent step."""
    g = dist.grid

    def step(p):
        q = (int(round(p[0])), int(round(p[1])),
             int(round((p[2] % TWO_PI) / g.htheta)) % g.ntheta)
        if not (0 <= q[0] < g.nx and 0 <= q[1] < g.ny) or dist.state[q] != 2:
            # re-anchor to the best accepted voxel among the cell corners
            corners = []
            for dx in (0, 1):
                for dy in (0, 1):
                    for dk in (0, 1):
                        c = (min(int(p[0]) + dx, g.nx - 1), min(int(p[1]) + dy, g.ny - 1),
                             (int((p[2] % TWO_PI) / g.htheta) + dk) % g.ntheta)
                        if dist.state[c] == 2:
                            corners.append((dist.W[c], c))
            if not corners:
                return None
            q = min(corners)[1]
        r = _best_descending_neighbor(dist, stencils, q)
        if r is None:
            if dist.state[q] == 2 and (q[0] * g.ny + q[1]) * g.ntheta + q[2] in \
                    set(int(s) for s in dist.sources):
                r = q
            else:
                return None
        th = r[2] * g.htheta
        th = th + TWO_PI * np.round((p[2] - th) / TWO_PI)
        return np.array([float(r[0]), float(r[1]), th])

    return step


def descent_direction_field(dist: DistanceMap, stencils) -> np.ndarray:
    """Scheme-consistent steepest-descent directions, one per accepted voxel.

    Uses the stencil's own upwind differences, so the field is exactly the
    (reversed) characteristic direction of the discrete solution --- robust
    inside the deep narrow valleys of small tracking costs, where central
    differences of W are dominated by the cross-valley slope.  Index
    coordinates, zero where not accepted.
    """
    g = dist.grid
    N = g.nx * g.ny * g.ntheta
    uphill = K._descent_field(dist.W.reshape(N), dist.state.reshape(N),
                              stencils.lam, stencils.eoff, stencils.mu, stencils.foff,
                              g.nx, g.ny, g.ntheta)
    return -uphill.reshape(g.shape + (3,))


def backtrack(start, dist: DistanceMap, dual: DualMetricField,
              dt: float = 0.05, step_cap: float = 0.2, gauge=None,
              stencils=None) -> Geodesic:
    """Steepest-descent geodesic from ``start`` down to the source set.

    The descent direction is the gradient of the dual quasi-norm in its
    covector slot evaluated on the distance gradient,

        v  proportional to  -C^-2 (D phat + <phat, eta>_+ eta),

    integrated with midpoint (RK2) steps capped at ``step_cap`` voxels and
    reparametrized to t in [0, 1]; terminates by snapping once within one
    voxel of a source.  With ``stencils`` given, phat comes from the
    scheme's own upwind differences (interpolated as a direction field),
    which keeps the direction reliable in deep cost valleys; otherwise
    interpolated masked central differences are used.  ``gauge`` optionally
    records gauge momentum components along the way.

    Raises BacktrackError (with the partial curve attached) on stagnation;
    that typically flags a Maxwell point or an unreached start.
    """
    g = dual.grid
    if stencils is not None:
        vfield = descent_direction_field(dist, stencils)
        accepted = (dist.state == 2).astype(np.float64)
        # normalize per-component against the accepted-mask weight so
        # unaccepted corners do not dilute the interpolated direction
        comps = [vfield[..., a] for a in range(3)] + [accepted]

        recorder = _momentum_recorder(gauge)

        def vel(ctx, p, w0):
            # unit index-speed steering; t is renormalized at the end
            *vv, m = interp_values(g, p, *comps)
            if m <= 0.25:
                # mostly unaccepted cell: no trustworthy direction here,
                # let the driver hold its course (long-arm dead zone)
                return np.zeros(3)
            v = np.array(vv) / m
            n = np.linalg.norm(v)
            if n <= 1e-300:
                return np.zeros(3)
            u = v / n
            return np.array([u[0], u[1], u[2] * g.htheta])

        return _integrate_descent(start, dist, vel, np.inf, step_cap,
                                  t_budget=4.0 * (g.nx + g.ny + g.ntheta),
                                  record_momentum=recorder,
                                  ballistic_budget=stencils.max_radius + 2.0,
                                  discrete_step=_discrete_stepper(dist, stencils))

    else:
        Dc = [dual.D[..., a, b] for a in range(3) for b in range(3)]
        ec = [dual.eta[..., a] for a in range(3)]

        def vel(ctx, p, w0):
            _, phat = ctx.sample(p)
            vals = interp_values(g, p, dual.cost, *Dc, *ec)
            C = vals[0]
            Dm = np.array(vals[1:10]).reshape(3, 3)
            eta = np.array(vals[10:13])
            pos = max(float(eta @ phat), 0.0)
            grad = (Dm @ phat + pos * eta) / C ** 2
            fstar_sq = float(phat @ grad)
            if fstar_sq <= 1e-300:
                return np.zeros(3)
            v_idx = -w0 * grad / np.sqrt(fstar_sq)
            return np.array([v_idx[0], v_idx[1], v_idx[2] * g.htheta])

    return _integrate_descent(start, dist, vel, dt, step_cap,
                              record_momentum=_momentum_recorder(gauge))


def discrete_walk(start_voxel, dist: DistanceMap, stencils, gauge=None) -> Geodesic:
    """Greedy voxel-to-voxel descent through the stencil graph.

    From each accepted voxel, steps to its stencil neighbor of smallest W;
    the distance value strictly decreases, so a source is always reached.
    Coarser than the ODE route (the polyline threads stencil-arm chords) but
    it cannot stall, which makes it the fallback when steepest descent gets
    stuck in thinly swept regions.
    """
    g = dist.grid
    W3 = dist.W
    ctx = _DescentContext(dist)
    rec = _momentum_recorder(gauge)
    ix, iy, ik = start_voxel
    if not np.isfinite(W3[ix, iy, ik]):
        raise BacktrackError("start voxel unreached")
    src_flat = set(int(s) for s in dist.sources)
    pts = []
    ws = []
    moms = [] if rec is not None else None
    theta_prev = ik * g.htheta
    for _ in range(int(dist.n_accepted) + 1):
        th = ik * g.htheta
        th = th + TWO_PI * np.round((theta_prev - th) / TWO_PI)
        theta_prev = th
        p = np.array([float(ix), float(iy), th])
        if pts:
            # keep sub-voxel polyline steps across long stencil arms
            prev = pts[-1]
            span = max(np.linalg.norm((p - prev)[:2]), abs(p[2] - prev[2]) / g.htheta)
            for m in range(1, max(int(np.ceil(span)), 1)):
                q = prev + (p - prev) * (m / max(int(np.ceil(span)), 1))
                pts.append(q)
                ws.append(ws[-1])
                if moms is not None:
                    moms.append(rec(ctx, q))
        pts.append(p)
        ws.append(W3[ix, iy, ik])
        if moms is not None:
            moms.append(rec(ctx, p))
        flat = (ix * g.ny + iy) * g.ntheta + ik
        if flat in src_flat or W3[ix, iy, ik] <= 0.0:
            break
        best = _best_descending_neighbor(dist, stencils, (ix, iy, ik))
        if best is None:
            raise BacktrackError("discrete walk found no descending neighbor",
                                 _finalize([float(i) for i in range(len(pts))],
                                           pts, moms, ws[0], reached=False))
        ix, iy, ik = best
    w0 = ws[0]
    t = np.array([float(i) for i in range(len(pts))])
    geo = _finalize(t.tolist(), pts, moms, w0, reached=True)
    geo.note = "discrete walk"
    return geo


def backtrack_gauge(start, dist: DistanceMap, gauge, dt: float = 0.05,
                    step_cap: float = 0.2, forward_only: bool = False,
                    stencils=None) -> Geodesic:
    """Steepest descent expressed in the gauge frame.

    Integrates v = -W(start) * sum_k alpha_k^-1 (A_k W) A_k with the k = 1
    component clipped to forward motion when ``forward_only`` (the one-sided
    model drops the reverse gear).  Equivalent to :func:`backtrack` for the
    symmetric model; kept as an independent route.  ``stencils`` optionally
    enables the discrete rescue step when the interpolated gradient stops
    descending (deep cost valleys).
    """

    def vel(ctx, p, w0):
        _, phat = ctx.sample(p)
        phat_phys = np.array([phat[0], phat[1], phat[2] / ctx.grid.htheta])
        A = gauge.vectors_at(p)      # rows A_k, physical components
        al = gauge.alphas_at(p)
        comp = A @ phat_phys         # momentum components A_k W
        if forward_only:
            comp[0] = max(comp[0], 0.0)
        v_phys = -w0 * (comp / al) @ A
        return v_phys

    rescue = None if stencils is None else _discrete_stepper(dist, stencils)
    return _integrate_descent(start, dist, vel, dt, step_cap,
                              record_momentum=_momentum_recorder(gauge),
                              discrete_step=rescue)


def shoot_hamiltonian(p0, lam0, gauge, struct, T: float = 1.0, dt: float = 1e-3) -> Geodesic:
    """Integrate the canonical geodesic system in gauge components (RK4).

    State: position plus gauge momentum (lam_1, lam_2, lam_3);
    gamma' = sum_k (lam_k / alpha_k) A_k and
    lam_i' = sum_jk c_jik lam_k lam^j.  Returns the curve with momentum
    attached; the Hamiltonian H = 0.5 sum lam_k^2 / alpha_k is a conserved
    quantity of the exact flow and a quality measure of the integration.
    """
    state = np.concatenate([np.asarray(p0, dtype=np.float64),
                            np.asarray(lam0, dtype=np.float64)])

    def rhs(s):
        p, lam = s[:3], s[3:]
        A = gauge.vectors_at(p)
        al = gauge.alphas_at(p)
        c = struct.at(p)
        lam_up = lam / al
        pdot = lam_up @ A
        lamdot = np.einsum("jik,k,j->i", c, lam, lam_up)
        return np.concatenate([pdot, lamdot])

    n = int(round(T / dt))
    pts = np.empty((n + 1, 3))
    moms = np.empty((n + 1, 3))
    pts[0], moms[0] = state[:3], state[3:]
    for m in range(1, n + 1):
        k1 = rhs(state)
        k2 = rhs(state + 0.5 * dt * k1)
        k3 = rhs(state + 0.5 * dt * k2)
        k4 = rhs(state + dt * k3)
        state = state + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        pts[m], moms[m] = state[:3], state[3:]
    pts[:, 2] = unwrap_theta(pts[:, 2])
    return Geodesic(t=np.linspace(0.0, T, n + 1), points=pts, momentum=moms)


def hamiltonian_values(geo: Geodesic, gauge) -> np.ndarray:
    """0.5 sum_k lam_k^2 / alpha_k along a curve with recorded momentum."""
    if geo.momentum is None:
        raise ValueError("curve carries no momentum")
    al = gauge.alphas_at(geo.points)
    return 0.5 * np.sum(geo.momentum ** 2 / al, axis=1)


def finsler_length(geo: Geodesic, mf: MetricField) -> float:
    """Arclength of a curve under a metric field, midpoint quadrature.

    Segment vectors are converted to index coordinates to match the metric's
    unit convention.
    """
    pts = geo.points
    if len(pts) < 2:
        return 0.0
    mid = 0.5 * (pts[1:] + pts[:-1])
    seg = pts[1:] - pts[:-1]
    seg_idx = seg.copy()
    seg_idx[:, 2] /= mf.grid.htheta
    comps = [mf.G[..., a, b] for a in range(3) for b in range(3)]
    wc = [mf.wfwd[..., a] for a in range(3)]
    vals = interp_values(mf.grid, mid, *comps, *wc)
    G = np.stack(vals[:9], axis=-1).reshape(len(seg), 3, 3)
    w = np.stack(vals[9:12], axis=-1)
    quad = np.einsum("na,nab,nb->n", seg_idx, G, seg_idx)
    neg = np.minimum(np.einsum("na,na->n", w, seg_idx), 0.0)
    return float(np.sum(np.sqrt(np.maximum(quad + neg ** 2, 0.0))))
