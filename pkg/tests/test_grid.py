import numpy as np
import pytest

from m2track.grid import (DomainError, GridM2, LiftedField, PointM2, canonical_theta,
                          gradient_fixed, interpolate, load_field_raw, load_image,
                          load_polyline_csv, save_field_raw, save_image, save_overlay,
                          save_polyline_csv)

from conftest import coordinate_fields


def test_grid_angular_closure():
    g = GridM2(8, 8, 12)
    assert g.ntheta * g.htheta == pytest.approx(2 * np.pi, abs=1e-15)
    assert g.thetas[0] == 0.0
    assert g.thetas[-1] == pytest.approx(2 * np.pi - g.htheta)


def test_canonical_theta_idempotent():
    th = np.array([-0.1, 0.0, 3.9, 7.0, -12.0])
    c1 = canonical_theta(th)
    assert np.all((c1 >= 0) & (c1 < 2 * np.pi))
    assert np.allclose(canonical_theta(c1), c1)
    p = PointM2(1.0, 2.0, -0.5).canonical()
    assert p.theta == pytest.approx(2 * np.pi - 0.5)


def test_interpolate_constant(small_grid):
    fld = LiftedField.full(small_grid, 3.25)
    for p in [(0.0, 0.0, 0.0), (7.3, 2.8, 1.1), (15.0, 15.0, 6.2)]:
        assert interpolate(fld, p) == pytest.approx(3.25)


def test_interpolate_linear_exact(small_grid, coord_fields):
    xx, yy, tt = coord_fields
    fld = LiftedField(small_grid, xx)
    assert interpolate(fld, (3.5, 0.0, 0.0)) == pytest.approx(3.5)
    fld2 = LiftedField(small_grid, 2 * xx - 0.5 * yy)
    assert interpolate(fld2, (3.25, 7.75, 0.3)) == pytest.approx(2 * 3.25 - 0.5 * 7.75)


def test_interpolate_node_lookup(small_grid):
    rng = np.random.default_rng(0)
    fld = LiftedField(small_grid, rng.standard_normal(small_grid.shape))
    for (i, j, k) in [(0, 0, 0), (5, 9, 3), (15, 15, 7)]:
        p = (float(i), float(j), k * small_grid.htheta)
        assert interpolate(fld, p) == pytest.approx(fld.values[i, j, k], abs=1e-14)


def test_interpolate_theta_periodic(small_grid):
    rng = np.random.default_rng(1)
    fld = LiftedField(small_grid, rng.standard_normal(small_grid.shape))
    p1 = interpolate(fld, (4.4, 5.5, 1.3))
    p2 = interpolate(fld, (4.4, 5.5, 1.3 + 2 * np.pi))
    assert p1 == pytest.approx(p2, abs=1e-13)
    # across the wrap seam uses the first channel again
    seam = interpolate(fld, (4.0, 5.0, 2 * np.pi - 0.5 * small_grid.htheta))
    expect = 0.5 * (fld.values[4, 5, -1] + fld.values[4, 5, 0])
    assert seam == pytest.approx(expect)


def test_interpolate_out_of_domain(small_grid):
    fld = LiftedField.full(small_grid, 1.0)
    with pytest.raises(DomainError):
        interpolate(fld, (-1.0, 0.0, 0.0))
    with pytest.raises(DomainError):
        interpolate(fld, (3.0, 15.5, 0.0))


def test_gradient_affine_exact(small_grid, coord_fields):
    xx, yy, _ = coord_fields
    fld = LiftedField(small_grid, 2 * xx + 3 * yy)
    grad = gradient_fixed(fld, (7, 8, 2))
    assert np.allclose(grad, [2.0, 3.0, 0.0], atol=1e-12)


def test_gradient_sin_theta():
    g = GridM2(6, 6, 32)
    _, _, tt = coordinate_fields(g)
    fld = LiftedField(g, np.sin(tt))
    grad = gradient_fixed(fld, (3, 3, 0))  # d/dtheta sin at theta=0 is 1
    assert grad[0] == 0.0 and grad[1] == 0.0
    assert grad[2] == pytest.approx(1.0, abs=g.htheta ** 2)


def test_gradient_constant_zero(small_grid):
    fld = LiftedField.full(small_grid, 7.0)
    assert np.all(gradient_fixed(fld) == 0.0)


def test_gradient_zero_along_constant_coordinate(small_grid, coord_fields):
    xx, _, _ = coord_fields
    g = gradient_fixed(LiftedField(small_grid, xx ** 2))
    assert np.all(g[..., 1] == 0.0)
    assert np.all(g[..., 2] == 0.0)


def test_image_io_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, size=(24, 17))
    p8 = tmp_path / "a.png"
    save_image(img, p8, bit_depth=8)
    back = load_image(p8)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    p16 = tmp_path / "b.png"
    save_image(img, p16, bit_depth=16)
    back16 = load_image(p16)
    assert np.abs(back16 - img).max() <= 0.5 / 65535 + 1e-12


def test_image_normalization(tmp_path):
    img = np.zeros((4, 4))
    img[1, 2] = 1.0
    path = tmp_path / "px.png"
    save_image(img, path, bit_depth=8)
    arr = load_image(path)
    assert arr[1, 2] == pytest.approx(1.0)  # 8-bit 255 maps to 1.0
    assert arr[0, 0] == 0.0


def test_image_unreadable(tmp_path):
    bad = tmp_path / "nope.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(OSError):
        load_image(bad)


def test_raw_field_roundtrip(tmp_path, small_grid):
    rng = np.random.default_rng(3)
    fld = LiftedField(small_grid, rng.standard_normal(small_grid.shape))
    path = tmp_path / "f.m2f"
    save_field_raw(fld, path)
    back = load_field_raw(path)
    assert back.grid == small_grid
    assert np.abs(back.values - fld.values).max() < 1e-6  # float32 quantization


def test_polyline_csv_roundtrip(tmp_path):
    t = np.linspace(0, 1, 7)
    pts = np.column_stack([np.linspace(0, 5, 7), np.linspace(2, 3, 7), np.linspace(-1, 8, 7)])
    path = tmp_path / "c.csv"
    save_polyline_csv(path, t, pts)
    t2, pts2 = load_polyline_csv(path)
    assert np.allclose(t2, t) and np.allclose(pts2, pts)


def test_overlay_smoke(tmp_path):
    img = np.linspace(0, 1, 32 * 32).reshape(32, 32)
    pts = np.column_stack([np.linspace(2, 30, 10), np.linspace(4, 28, 10)])
    out = tmp_path / "o.png"
    save_overlay(img, out, polylines=[(pts, (0, 255, 0))],
                 markers=[((5.0, 5.0), (255, 0, 0))])
    assert out.exists() and load_image(out).shape == (32, 32)
