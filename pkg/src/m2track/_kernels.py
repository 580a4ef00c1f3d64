"""Numba kernels: Selling decompositions, stencil builds, fast marching.

Hot loops only; the public wrappers live in stencil.py and eikonal.py.
Voxels are addressed by flat index p = (ix * ny + iy) * ntheta + ik; theta
wraps, spatial out-of-range neighbors count as +inf.
"""

import numpy as np
from numba import njit, prange

# superbase pair cycle (i, j, k, l): test pair (i, j), complement (k, l)
_PAIRS = ((0, 1, 2, 3), (0, 2, 1, 3), (0, 3, 1, 2),
          (1, 2, 0, 3), (1, 3, 0, 2), (2, 3, 0, 1))

FAR, TRIAL, ACCEPTED, OUTSIDE = 0, 1, 2, 3


@njit(cache=True)
def _obtuse_superbase3(m, tol, itmax):
    """Selling reduction of the canonical superbase for SPD m; 3D."""
    b = np.zeros((4, 3), dtype=np.int64)
    b[0, 0] = 1
    b[1, 1] = 1
    b[2, 2] = 1
    b[3, 0] = -1
    b[3, 1] = -1
    b[3, 2] = -1
    it = 0
    npass = 0
    n = 0
    while npass < 6:
        i, j, k, l = _PAIRS[n % 6]
        s = 0.0
        for a in range(3):
            for c in range(3):
                s += b[i, a] * m[a, c] * b[j, c]
        if s > tol:
            npass = 0
            it += 1
            if it > itmax:
                return b, False
            for a in range(3):
                bj = b[j, a]
                b[k, a] += bj
                b[l, a] += bj
                b[j, a] = -bj
        else:
            npass += 1
        n += 1
    return b, True


@njit(cache=True)
def _selling3(m, tol, itmax):
    """Weights (6,) and integer offsets (6,3) with m = sum_i w_i e_i e_i^T."""
    b, ok = _obtuse_superbase3(m, tol, itmax)
    w = np.zeros(6, dtype=np.float64)
    e = np.zeros((6, 3), dtype=np.int64)
    for n in range(6):
        i, j, k, l = _PAIRS[n]
        s = 0.0
        for a in range(3):
            for c in range(3):
                s += b[i, a] * m[a, c] * b[j, c]
        w[n] = -s if s < 0.0 else 0.0
        # cross product of the complementary pair
        e[n, 0] = b[k, 1] * b[l, 2] - b[k, 2] * b[l, 1]
        e[n, 1] = b[k, 2] * b[l, 0] - b[k, 0] * b[l, 2]
        e[n, 2] = b[k, 0] * b[l, 1] - b[k, 1] * b[l, 0]
    return w, e, ok


@njit(cache=True)
def _halfline3(eta, eps_rel, itmax):
    """One-sided decomposition of <phat, eta>_+^2 via the relaxed matrix.

    Selling-decomposes eta eta^T + eps_rel^2 (|eta|^2 Id - eta eta^T) and
    orients every offset along eta.  Zero weights are kept in place (callers
    skip them); eta = 0 gives all-zero weights.
    """
    w = np.zeros(6, dtype=np.float64)
    f = np.zeros((6, 3), dtype=np.int64)
    nsq = eta[0] * eta[0] + eta[1] * eta[1] + eta[2] * eta[2]
    if nsq <= 0.0:
        return w, f, True
    m = np.empty((3, 3), dtype=np.float64)
    e2 = eps_rel * eps_rel
    for a in range(3):
        for c in range(3):
            m[a, c] = (1.0 - e2) * eta[a] * eta[c]
        m[a, a] += e2 * nsq
    tol = 1e-12 * (m[0, 0] + m[1, 1] + m[2, 2])
    w, f, ok = _selling3(m, tol, itmax)
    for n in range(6):
        dot = f[n, 0] * eta[0] + f[n, 1] * eta[1] + f[n, 2] * eta[2]
        if dot < 0.0:
            f[n, 0] = -f[n, 0]
            f[n, 1] = -f[n, 1]
            f[n, 2] = -f[n, 2]
    return w, f, ok


@njit(cache=True, parallel=True)
def _build_stencils(D, eta, eps_rel, itmax):
    """Per-voxel decompositions for flattened dual coefficients.

    D : (N, 3, 3), eta : (N, 3), already cost-scaled.  Returns weights,
    int16 offsets and a status array (0 ok, 1 no convergence).
    """
    N = D.shape[0]
    lam = np.zeros((N, 6), dtype=np.float64)
    eoff = np.zeros((N, 6, 3), dtype=np.int16)
    mu = np.zeros((N, 6), dtype=np.float64)
    foff = np.zeros((N, 6, 3), dtype=np.int16)
    status = np.zeros(N, dtype=np.uint8)
    for p in prange(N):
        m = D[p]
        tol = 1e-12 * (m[0, 0] + m[1, 1] + m[2, 2])
        w, e, ok = _selling3(m, tol, itmax)
        if not ok:
            status[p] = 1
            continue
        for n in range(6):
            lam[p, n] = w[n]
            for a in range(3):
                eoff[p, n, a] = e[n, a]
        w2, f, ok2 = _halfline3(eta[p], eps_rel, itmax)
        if not ok2:
            status[p] = 1
            continue
        for n in range(6):
            mu[p, n] = w2[n]
            for a in range(3):
                foff[p, n, a] = f[n, a]
    return lam, eoff, mu, foff, status


@njit(cache=True)
def _neighbor(p, dx, dy, dk, nx, ny, ntheta):
    """Flat index of p shifted by an offset; -1 if spatially out of range."""
    ik = p % ntheta
    rest = p // ntheta
    iy = rest % ny
    ix = rest // ny
    jx = ix + dx
    jy = iy + dy
    if jx < 0 or jx >= nx or jy < 0 or jy >= ny:
        return -1
    jk = (ik + dk) % ntheta
    return (jx * ny + jy) * ntheta + jk


@njit(cache=True)
def _reverse_adjacency(lam, eoff, mu, foff, nx, ny, ntheta):
    """CSR lists: for each voxel p, the voxels q whose stencil reads p."""
    N = lam.shape[0]
    counts = np.zeros(N + 1, dtype=np.int64)
    for q in range(N):
        for n in range(6):
            if lam[q, n] > 0.0:
                for sgn in (-1, 1):
                    p = _neighbor(q, sgn * eoff[q, n, 0], sgn * eoff[q, n, 1],
                                  sgn * eoff[q, n, 2], nx, ny, ntheta)
                    if p >= 0:
                        counts[p + 1] += 1
            if mu[q, n] > 0.0:
                p = _neighbor(q, -foff[q, n, 0], -foff[q, n, 1], -foff[q, n, 2],
                              nx, ny, ntheta)
                if p >= 0:
                    counts[p + 1] += 1
    ptr = np.cumsum(counts)
    idx = np.empty(ptr[N], dtype=np.int32)
    fill = ptr[:N].copy()
    for q in range(N):
        for n in range(6):
            if lam[q, n] > 0.0:
                for sgn in (-1, 1):
                    p = _neighbor(q, sgn * eoff[q, n, 0], sgn * eoff[q, n, 1],
                                  sgn * eoff[q, n, 2], nx, ny, ntheta)
                    if p >= 0:
                        idx[fill[p]] = q
                        fill[p] += 1
            if mu[q, n] > 0.0:
                p = _neighbor(q, -foff[q, n, 0], -foff[q, n, 1], -foff[q, n, 2],
                              nx, ny, ntheta)
                if p >= 0:
                    idx[fill[p]] = q
                    fill[p] += 1
    return ptr, idx


@njit(cache=True)
def _local_update(q, W, state, lam, eoff, mu, foff, nx, ny, ntheta):
    """Largest root of the discretized eikonal equation at voxel q.

    Collects the upwind neighbor value of every active stencil term, then
    solves sum_i w_i max(0, W - v_i)^2 = 1 by progressively enlarging the
    active set in ascending order of v_i.
    """
    vals = np.empty(12, dtype=np.float64)
    wts = np.empty(12, dtype=np.float64)
    cnt = 0
    for n in range(6):
        w = lam[q, n]
        if w > 0.0:
            v = np.inf
            for sgn in (-1, 1):
                p = _neighbor(q, sgn * eoff[q, n, 0], sgn * eoff[q, n, 1],
                              sgn * eoff[q, n, 2], nx, ny, ntheta)
                if p >= 0 and state[p] != OUTSIDE and W[p] < v:
                    v = W[p]
            if v < np.inf:
                vals[cnt] = v
                wts[cnt] = w
                cnt += 1
        w = mu[q, n]
        if w > 0.0:
            p = _neighbor(q, -foff[q, n, 0], -foff[q, n, 1], -foff[q, n, 2],
                          nx, ny, ntheta)
            if p >= 0 and state[p] != OUTSIDE and W[p] < np.inf:
                vals[cnt] = W[p]
                wts[cnt] = w
                cnt += 1
    if cnt == 0:
        return np.inf
    # insertion sort by neighbor value
    for a in range(1, cnt):
        va = vals[a]
        wa = wts[a]
        b = a - 1
        while b >= 0 and vals[b] > va:
            vals[b + 1] = vals[b]
            wts[b + 1] = wts[b]
            b -= 1
        vals[b + 1] = va
        wts[b + 1] = wa
    A = 0.0
    B = 0.0
    Q = 0.0
    sol = np.inf
    for m in range(cnt):
        if vals[m] >= sol:
            break
        w = wts[m]
        v = vals[m]
        A += w
        B += w * v
        Q += w * v * v
        disc = B * B - A * (Q - 1.0)
        if disc < 0.0:
            break
        sol = (B + np.sqrt(disc)) / A
    return sol


@njit(cache=True)
def _heap_push(hv, hi, n, v, i):
    hv[n] = v
    hi[n] = i
    c = n
    while c > 0:
        par = (c - 1) >> 1
        if hv[par] > hv[c] or (hv[par] == hv[c] and hi[par] > hi[c]):
            hv[par], hv[c] = hv[c], hv[par]
            hi[par], hi[c] = hi[c], hi[par]
            c = par
        else:
            break
    return n + 1


@njit(cache=True)
def _heap_pop(hv, hi, n):
    v = hv[0]
    i = hi[0]
    n -= 1
    hv[0] = hv[n]
    hi[0] = hi[n]
    c = 0
    while True:
        l = 2 * c + 1
        r = l + 1
        small = c
        if l < n and (hv[l] < hv[small] or (hv[l] == hv[small] and hi[l] < hi[small])):
            small = l
        if r < n and (hv[r] < hv[small] or (hv[r] == hv[small] and hi[r] < hi[small])):
            small = r
        if small == c:
            break
        hv[small], hv[c] = hv[c], hv[small]
        hi[small], hi[c] = hi[c], hi[small]
        c = small
    return v, i, n


@njit(cache=True)
def _fast_march(W, state, order, lam, eoff, mu, foff, rev_ptr, rev_idx,
                sources, source_values, stop_mask, n_stop, stop_slack,
                value_cap, nx, ny, ntheta):
    """Single-pass causal sweep.  Mutates W, state, order in place.

    The heap uses lazy deletion: stale entries (value above the current
    candidate) are skipped on pop.  Ties are broken towards the lowest flat
    voxel index so acceptance order is deterministic.  After the last stop
    voxel is accepted the sweep keeps going until the front value exceeds
    (1 + stop_slack) times the value there, so descent starting at a stop
    voxel sees a fully accepted neighborhood.
    """
    N = W.shape[0]
    cap = max(4 * N, 1024)
    hv = np.empty(cap, dtype=np.float64)
    hi = np.empty(cap, dtype=np.int64)
    hn = 0
    for m in range(sources.shape[0]):
        s = sources[m]
        W[s] = source_values[m]
        state[s] = TRIAL
        hn = _heap_push(hv, hi, hn, source_values[m], s)
    naccept = 0
    remaining = n_stop
    v_stop = -1.0
    while hn > 0:
        v, p, hn = _heap_pop(hv, hi, hn)
        if state[p] != TRIAL or v > W[p]:
            continue  # stale entry
        if v_stop >= 0.0 and v > v_stop * (1.0 + stop_slack):
            break
        state[p] = ACCEPTED
        order[p] = naccept
        naccept += 1
        if n_stop > 0 and stop_mask[p]:
            remaining -= 1
            if remaining == 0:
                v_stop = v
        if v > value_cap:
            break
        for r in range(rev_ptr[p], rev_ptr[p + 1]):
            q = rev_idx[r]
            st = state[q]
            if st == ACCEPTED or st == OUTSIDE:
                continue
            cand = _local_update(q, W, state, lam, eoff, mu, foff, nx, ny, ntheta)
            if cand < W[q]:
                W[q] = cand
                state[q] = TRIAL
                if hn >= cap:
                    # grow the heap storage
                    cap2 = cap * 2
                    hv2 = np.empty(cap2, dtype=np.float64)
                    hi2 = np.empty(cap2, dtype=np.int64)
                    hv2[:hn] = hv[:hn]
                    hi2[:hn] = hi[:hn]
                    hv = hv2
                    hi = hi2
                    cap = cap2
                hn = _heap_push(hv, hi, hn, cand, q)
    return naccept


@njit(cache=True)
def _descent_field(W, state, lam, eoff, mu, foff, nx, ny, ntheta):
    """Upwind characteristic direction at every accepted voxel.

    v(q) = sum_i lam_i <dW, e_i> e_i + sum_j mu_j <dW, f_j>_+ f_j with the
    finite differences taken on the upwind side actually used by the scheme;
    this is half the gradient of the discrete dual norm, i.e. the direction
    the front came from (up to sign).  Zero at non-accepted voxels.
    """
    N = W.shape[0]
    out = np.zeros((N, 3), dtype=np.float64)
    for q in range(N):
        if state[q] != ACCEPTED:
            continue
        wq = W[q]
        for n in range(6):
            w = lam[q, n]
            if w > 0.0:
                vb = np.inf
                vf = np.inf
                pb = _neighbor(q, -eoff[q, n, 0], -eoff[q, n, 1], -eoff[q, n, 2],
                               nx, ny, ntheta)
                pf = _neighbor(q, eoff[q, n, 0], eoff[q, n, 1], eoff[q, n, 2],
                               nx, ny, ntheta)
                if pb >= 0 and state[pb] != OUTSIDE:
                    vb = W[pb]
                if pf >= 0 and state[pf] != OUTSIDE:
                    vf = W[pf]
                if vb <= vf and wq > vb:
                    d = w * (wq - vb)  # gradient pairs positively with +e
                elif vf < vb and wq > vf:
                    d = -w * (wq - vf)
                else:
                    d = 0.0
                out[q, 0] += d * eoff[q, n, 0]
                out[q, 1] += d * eoff[q, n, 1]
                out[q, 2] += d * eoff[q, n, 2]
            w = mu[q, n]
            if w > 0.0:
                p = _neighbor(q, -foff[q, n, 0], -foff[q, n, 1], -foff[q, n, 2],
                              nx, ny, ntheta)
                if p >= 0 and state[p] != OUTSIDE and wq > W[p]:
                    d = w * (wq - W[p])
                    out[q, 0] += d * foff[q, n, 0]
                    out[q, 1] += d * foff[q, n, 1]
                    out[q, 2] += d * foff[q, n, 2]
    return out


@njit(cache=True)
def _scheme_values(W, state, lam, eoff, mu, foff, nx, ny, ntheta):
    """Evaluate the discretized operator at every voxel, plus a validity mask.

    valid[p] is True when p is accepted, every stencil neighbor exists inside
    the domain, and all of them are accepted (so the residual |F W - 1| is
    meaningful there).
    """
    N = W.shape[0]
    val = np.full(N, np.nan)
    valid = np.zeros(N, dtype=np.bool_)
    for q in range(N):
        if state[q] != ACCEPTED:
            continue
        total = 0.0
        ok = True
        for n in range(6):
            w = lam[q, n]
            if w > 0.0:
                v = np.inf
                for sgn in (-1, 1):
                    p = _neighbor(q, sgn * eoff[q, n, 0], sgn * eoff[q, n, 1],
                                  sgn * eoff[q, n, 2], nx, ny, ntheta)
                    if p < 0 or state[p] == OUTSIDE:
                        ok = False
                    elif state[p] != ACCEPTED:
                        ok = False
                    elif W[p] < v:
                        v = W[p]
                d = W[q] - v
                if d > 0.0 and v < np.inf:
                    total += w * d * d
            w = mu[q, n]
            if w > 0.0:
                p = _neighbor(q, -foff[q, n, 0], -foff[q, n, 1], -foff[q, n, 2],
                              nx, ny, ntheta)
                if p < 0 or state[p] == OUTSIDE or state[p] != ACCEPTED:
                    ok = False
                else:
                    d = W[q] - W[p]
                    if d > 0.0:
                        total += w * d * d
        val[q] = total
        valid[q] = ok
    return val, valid
