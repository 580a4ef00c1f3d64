import numpy as np
import pytest

from m2track.grid import GridM2
from m2track.metric import DualMetricField
from m2track.stencil import (StencilError, build_stencils, halfline_decompose,
                             selling_decompose)


def reconstruct(weights, offsets):
    off = offsets.astype(np.float64)
    return np.einsum("i,ia,ib->ab", weights, off, off)


def random_spd(rng, mu_max=50.0):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    lam_hi = rng.uniform(1.0, mu_max ** 2)
    lams = np.array([1.0, rng.uniform(1.0, lam_hi), lam_hi])
    D = q @ np.diag(lams) @ q.T
    return 0.5 * (D + D.T)


def test_selling_identity():
    w, e = selling_decompose(np.eye(3))
    assert np.abs(reconstruct(w, e) - np.eye(3)).max() < 1e-14
    nz = np.sort(w)[::-1]
    assert np.allclose(nz[:3], 1.0) and np.allclose(nz[3:], 0.0)
    axes = sorted(tuple(np.abs(v)) for v, wi in zip(e.tolist(), w) if wi > 0)
    assert axes == [(0, 0, 1), (0, 1, 0), (1, 0, 0)]


def test_selling_diagonal():
    D = np.diag([1.0, 2.0, 3.0])
    w, e = selling_decompose(D)
    assert np.abs(reconstruct(w, e) - D).max() < 1e-14
    weights = {tuple(np.abs(v)): wi for v, wi in zip(e.tolist(), w) if wi > 0}
    assert weights == {(1, 0, 0): 1.0, (0, 1, 0): 2.0, (0, 0, 1): 3.0}


def test_selling_random_property():
    rng = np.random.default_rng(0)
    bound = 4 * np.sqrt(3)
    for _ in range(1000):
        D = random_spd(rng)
        w, e = selling_decompose(D)
        assert np.all(w >= 0)
        rel = np.abs(reconstruct(w, e) - D).max() / np.abs(D).max()
        assert rel < 1e-10
        mu = np.sqrt(np.linalg.cond(D))
        norms = np.linalg.norm(e[w > 0], axis=1)
        assert np.all(norms <= bound * mu + 1e-9)
        assert not np.any(np.all(e[w > 0] == 0, axis=1))  # offsets nonzero


def test_selling_determinism():
    rng = np.random.default_rng(1)
    D = random_spd(rng)
    w1, e1 = selling_decompose(D)
    w2, e2 = selling_decompose(D.copy())
    assert w1.tobytes() == w2.tobytes()
    assert e1.tobytes() == e2.tobytes()


def test_halfline_zero():
    w, f = halfline_decompose(np.zeros(3), 0.1)
    assert len(w) == 0 and len(f) == 0


def test_halfline_sign_policy_and_sandwich():
    rng = np.random.default_rng(2)
    for eta in [np.array([1.0, 0.0, 0.0]), np.array([0.3, -0.7, 0.2]),
                rng.standard_normal(3)]:
        for eps_rel in (0.2, 0.1):
            w, f = halfline_decompose(eta, eps_rel)
            assert np.all(f.astype(np.float64) @ eta >= 0.0)
            ph = rng.standard_normal((10000, 3))
            lhs = np.maximum(ph @ eta, 0.0) ** 2
            mid = sum(wi * np.maximum(ph @ fi, 0.0) ** 2
                      for wi, fi in zip(w, f.astype(np.float64)))
            rhs = lhs + eps_rel ** 2 * ((ph ** 2).sum(1) * (eta ** 2).sum() - (ph @ eta) ** 2)
            assert np.all(lhs <= mid + 1e-10 * np.abs(mid).max())
            assert np.all(mid <= rhs + 1e-10 * np.abs(rhs).max())


def test_halfline_offset_bound():
    rng = np.random.default_rng(3)
    for eps_rel in (0.2, 0.1, 0.05):
        radii = []
        for _ in range(50):
            eta = rng.standard_normal(3)
            w, f = halfline_decompose(eta, eps_rel)
            radii.append(np.linalg.norm(f.astype(float), axis=1).max())
            assert np.all(np.linalg.norm(f.astype(float), axis=1)
                          <= 4 * np.sqrt(3) / eps_rel + 1e-9)
        # the stencil radius grows roughly like 1 / eps_rel
        assert max(radii) > 0.5 / eps_rel


def test_halfline_eps_validation():
    with pytest.raises(ValueError):
        halfline_decompose(np.ones(3), 1.5)


def iso_dual(grid, eta=None):
    D = np.broadcast_to(np.eye(3), grid.shape + (3, 3)).copy()
    e = np.zeros(grid.shape + (3,)) if eta is None else eta
    return DualMetricField(grid, D, e, np.ones(grid.shape))


def test_build_isotropic_six_neighbors():
    g = GridM2(8, 8, 8)
    st = build_stencils(iso_dual(g), 0.1)
    q = (4 * 8 + 4) * 8 + 3  # interior voxel
    off = st.eoff[q][st.lam[q] > 0]
    assert sorted(tuple(np.abs(v)) for v in off.tolist()) == [(0, 0, 1), (0, 1, 0), (1, 0, 0)]
    assert np.all(st.mu[q] == 0.0)
    assert st.max_radius == 1.0


def test_build_symmetric_model_no_oneside():
    g = GridM2(8, 8, 8)
    st = build_stencils(iso_dual(g), 0.1)
    assert np.all(st.mu == 0.0)


def test_build_radius_grows_with_relaxation():
    g = GridM2(8, 8, 16)
    eta = np.zeros(g.shape + (3,))
    # a lattice-misaligned forward direction so the one-sided part genuinely
    # needs long offsets
    eta[..., :] = np.array([0.8, 0.55, 0.23]) / np.linalg.norm([0.8, 0.55, 0.23])
    radii = []
    for eps_rel in (0.2, 0.1, 0.05):
        st = build_stencils(iso_dual(g, eta), eps_rel)
        fr = np.linalg.norm(st.foff.astype(float), axis=2).max()
        radii.append(fr)
    assert radii[0] < radii[1] < radii[2]
    assert radii[2] >= 0.4 * (radii[1] * 2)


def test_build_determinism():
    g = GridM2(6, 6, 8)
    rng = np.random.default_rng(4)
    D = np.empty(g.shape + (3, 3))
    flat = D.reshape(-1, 3, 3)
    for i in range(flat.shape[0]):
        flat[i] = random_spd(rng, mu_max=2.0)
    eta = rng.standard_normal(g.shape + (3,)) * 0.2
    dual = DualMetricField(g, D, eta, np.ones(g.shape))
    s1 = build_stencils(dual, 0.1, alias="clip")
    s2 = build_stencils(DualMetricField(g, D.copy(), eta.copy(), np.ones(g.shape)), 0.1,
                        alias="clip")
    for a, b in ((s1.lam, s2.lam), (s1.eoff, s2.eoff), (s1.mu, s2.mu), (s1.foff, s2.foff)):
        assert a.tobytes() == b.tobytes()


def test_build_reconstruction_per_voxel():
    g = GridM2(5, 5, 8)
    rng = np.random.default_rng(5)
    D = np.empty(g.shape + (3, 3))
    flat = D.reshape(-1, 3, 3)
    for i in range(flat.shape[0]):
        flat[i] = random_spd(rng, mu_max=3.0)
    dual = DualMetricField(g, D, np.zeros(g.shape + (3,)), np.ones(g.shape))
    st = build_stencils(dual, 0.1)
    Df = D.reshape(-1, 3, 3)
    inside = np.zeros(g.shape, dtype=bool)
    inside[1:-1, 1:-1, :] = True
    for q in np.flatnonzero(inside.reshape(-1))[:40]:
        rec = reconstruct(st.lam[q], st.eoff[q])
        assert np.abs(rec - Df[q]).max() < 1e-10 * np.abs(Df[q]).max()


def test_build_margin_emptied():
    g = GridM2(8, 8, 8)
    st = build_stencils(iso_dual(g), 0.1)
    lam3 = st.lam.reshape(g.shape + (6,))
    assert np.all(lam3[0] == 0.0) and np.all(lam3[-1] == 0.0)
    assert np.all(lam3[:, 0] == 0.0) and np.all(lam3[:, -1] == 0.0)
    assert np.all(lam3[1:-1, 1:-1].max(axis=-1) > 0.0)


def test_build_theta_alias_error_and_clip():
    g = GridM2(8, 8, 4)  # very coarse orientation sampling
    # cheap direction strongly tilted into theta: long theta offsets needed
    u = np.array([1.0, 0.0, 3.0])
    u = u / np.linalg.norm(u)
    Dv = 100.0 * np.outer(u, u) + 0.05 * np.eye(3)
    D = np.broadcast_to(Dv, g.shape + (3, 3)).copy()
    dual = DualMetricField(g, D, np.zeros(g.shape + (3,)), np.ones(g.shape))
    with pytest.raises(StencilError):
        build_stencils(dual, 0.1, alias="error")
    st = build_stencils(dual, 0.1, alias="clip")
    assert st.n_clipped > 0
    assert np.abs(st.eoff[:, :, 2]).max() <= g.ntheta // 2


def test_stencil_cache_roundtrip(tmp_path):
    from m2track.stencil import load_stencils, save_stencils, stencil_cache_key
    g = GridM2(8, 8, 8)
    dual = iso_dual(g)
    st = build_stencils(dual, 0.1)
    key = stencil_cache_key(dual, 0.1)
    path = tmp_path / "stencils.npz"
    save_stencils(st, path, key=key)
    back = load_stencils(path, expect_key=key)
    assert back.grid == st.grid
    assert np.array_equal(back.lam, st.lam) and np.array_equal(back.eoff, st.eoff)
    assert np.array_equal(back.mu, st.mu) and np.array_equal(back.foff, st.foff)
    with pytest.raises(StencilError):
        load_stencils(path, expect_key="different")
