import numpy as np
import pytest
from scipy import ndimage

from m2track.grid import GridM2, LiftedField
from m2track.lifting import (angular_window, band_passed, build_cake_bank, bspline,
                             orientation_score, reconstruct_approx)


def line_image(n, angle, width=1.5):
    xx, yy = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    c = (n - 1) / 2
    d = (xx - c) * (-np.sin(angle)) + (yy - c) * np.cos(angle)
    return np.exp(-d ** 2 / (2 * width ** 2))


def test_bspline_partition_of_unity():
    t = np.linspace(-0.5, 0.5, 11)
    total = sum(bspline(3, t - k) for k in range(-4, 5))
    assert np.abs(total - 1).max() < 1e-12


def test_angular_windows_sum_to_one():
    phi = np.linspace(0, 2 * np.pi, 181)
    for ntheta in (4, 8, 16):
        tot = sum(angular_window(phi, k * 2 * np.pi / ntheta, ntheta) for k in range(ntheta))
        assert np.abs(tot - 1).max() < 1e-10


def test_bank_dc_removed():
    bank = build_cake_bank(16)
    dc = np.abs(bank.kernels.sum(axis=(1, 2)))
    assert dc.max() < 1e-10


def test_bank_pi_shift_kernels_equal():
    bank = build_cake_bank(16)
    for k in range(8):
        assert np.abs(bank.kernels[k] - bank.kernels[k + 8]).max() < 1e-12


def test_bank_rotational_consistency():
    bank = build_cake_bank(16)
    scale = np.abs(bank.kernels[0]).max()
    # exact under the lattice symmetry
    rot90 = np.rot90(bank.kernels[0], axes=(0, 1))
    assert np.abs(rot90 - bank.kernels[4]).max() < 1e-12 * max(scale, 1)
    # within resampling tolerance off the lattice symmetries
    rot = ndimage.rotate(bank.kernels[0], np.degrees(2 * 2 * np.pi / 16),
                         reshape=False, order=3)
    assert np.abs(rot - bank.kernels[2]).max() < 0.2 * scale


def test_bank_construction_errors():
    with pytest.raises(ValueError):
        build_cake_bank(3)
    with pytest.raises(ValueError):
        build_cake_bank(8, size=14)


def test_score_zero_image():
    bank = build_cake_bank(8)
    U = orientation_score(np.zeros((32, 32)), bank)
    assert np.all(U.values == 0.0)


def test_score_constant_image():
    bank = build_cake_bank(8)
    U = orientation_score(np.ones((32, 32)), bank)
    assert np.abs(U.values).max() < 1e-12


def test_score_kernel_larger_than_image():
    bank = build_cake_bank(8, size=15)
    with pytest.raises(ValueError):
        orientation_score(np.zeros((8, 8)), bank)


@pytest.mark.parametrize("ntheta", [8, 16])
def test_line_argmax_orientation(ntheta):
    bank = build_cake_bank(ntheta)
    c = 32
    step = 2 * np.pi / ntheta
    for deg in range(0, 180, 5):
        th = np.radians(deg)
        U = orientation_score(line_image(65, th), bank)
        prof = np.abs(U.values[c, c, :])
        kbest = int(np.argmax(prof)) % (ntheta // 2)
        kexp = int(round(th / step)) % (ntheta // 2)
        assert kbest == kexp, f"line at {deg} deg matched channel {kbest}, expected {kexp}"


def test_crossing_separates_channels():
    bank = build_cake_bank(16)
    f = line_image(65, 0.0) + line_image(65, np.pi / 2)
    U = orientation_score(f, bank)
    prof = np.abs(U.values[32, 32, :8])
    # local maxima in the theta profile at the two line orientations
    peaks = [k for k in range(8)
             if prof[k] > prof[(k - 1) % 8] and prof[k] > prof[(k + 1) % 8]]
    assert 0 in peaks and 4 in peaks
    assert len(peaks) == 2


def test_reconstruction_band_limited():
    bank = build_cake_bank(16)
    n = 64
    rng = np.random.default_rng(0)
    w = np.hanning(n)[:, None] * np.hanning(n)[None, :]  # keep content off the border
    f = band_passed(rng.standard_normal((n, n)) * w, bank)
    U = orientation_score(f, bank)
    fr = reconstruct_approx(U, bank)
    err = np.linalg.norm(fr - f) / np.linalg.norm(f)
    assert err < 0.05


def test_reconstruction_constant_is_zero():
    bank = build_cake_bank(8)
    U = orientation_score(np.full((32, 32), 0.7), bank)
    fr = reconstruct_approx(U, bank)
    assert np.abs(fr).max() < 1e-10


def test_reconstruction_linear():
    bank = build_cake_bank(8)
    rng = np.random.default_rng(1)
    f = rng.standard_normal((32, 32))
    g = rng.standard_normal((32, 32))
    Uf = orientation_score(f, bank)
    Ug = orientation_score(g, bank)
    Ufg = orientation_score(f + g, bank)
    assert np.abs(Ufg.values - Uf.values - Ug.values).max() < 1e-10
    r = reconstruct_approx(Ufg, bank)
    r2 = reconstruct_approx(Uf, bank) + reconstruct_approx(Ug, bank)
    assert np.abs(r - r2).max() < 1e-10


def test_score_mismatch_dimensions():
    bank8 = build_cake_bank(8)
    U = orientation_score(np.zeros((32, 32)), bank8)
    bank16 = build_cake_bank(16)
    with pytest.raises(ValueError):
        reconstruct_approx(U, bank16)


def test_equivariance_quarter_rotation():
    """Rotating the image by 90 degrees rotates the score accordingly."""
    ntheta = 16
    bank = build_cake_bank(ntheta)
    rng = np.random.default_rng(2)
    n = 48
    w = np.hanning(n)[:, None] * np.hanning(n)[None, :]
    f = band_passed(rng.standard_normal((n, n)) * w, bank)
    U = orientation_score(f, bank)
    # counterclockwise rotation in (x, y): x' = -y, y' = x
    f_rot = np.rot90(f, k=1, axes=(1, 0))
    U_rot = orientation_score(f_rot, bank)
    q = ntheta // 4
    shifted = np.roll(np.rot90(U.values, k=1, axes=(1, 0)), q, axis=2)
    scale = np.abs(U.values).max()
    assert np.abs(U_rot.values - shifted).max() <= 1e-2 * scale


def test_equivariance_integer_translation():
    bank = build_cake_bank(8)
    rng = np.random.default_rng(3)
    f = np.zeros((48, 48))
    f[14:30, 14:30] = rng.standard_normal((16, 16))  # compact support: rolls cleanly
    U = orientation_score(f, bank)
    f_shift = np.roll(f, (3, 5), axis=(0, 1))
    U_shift = orientation_score(f_shift, bank)
    inner = (slice(10, 38), slice(10, 38))
    moved = np.roll(U.values, (3, 5), axis=(0, 1))
    scale = np.abs(U.values).max()
    assert np.abs((U_shift.values - moved)[inner]).max() <= 1e-2 * scale
