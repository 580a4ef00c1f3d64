"""
Lift 2D images to scalar fields on positions x orientations.

A bank of oriented wavelets is built in the Fourier domain: each orientation
gets a B-spline bump in polar angle (the bumps tile the circle, summing to 1
on every polar ray) times a radial low-pass with the DC component removed.
Correlating the image with the rotated kernels produces one orientation
channel per angle; crossing line structures end up in separate channels.

Only the real parts of the kernels are used, so channels k and k + ntheta/2
coincide and the score is pi-periodic in theta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import GridM2, LiftedField, TWO_PI


@dataclass
class WaveletBank:
    """Oriented wavelet kernels plus the construction parameters.

    Attributes
    ----------
    kernels : (ntheta, K, K) float array
        Real-part spatial kernels, kernel[k] tuned to lines at angle
        theta_k = k * 2*pi/ntheta.
    rho_max : float
        Radial cutoff in cycles/pixel.
    spline_order : int
        Order of the angular B-spline window.
    dc_removed : bool
    """

    ntheta: int
    kernels: np.ndarray = field(repr=False)
    rho_max: float
    spline_order: int
    dc_removed: bool

    @property
    def size(self) -> int:
        return self.kernels.shape[-1]


def bspline(order: int, t):
    """Centered cardinal B-spline of the given order, support [-(n+1)/2, (n+1)/2].

    Integer shifts form a partition of unity, which is what makes the angular
    windows of the bank tile the circle exactly.
    """
    t = np.asarray(t, dtype=np.float64)
    if order == 0:
        # half-open support so integer shifts tile without double counting
        return np.where((t >= -0.5) & (t < 0.5), 1.0, 0.0)
    half = 0.5 * (order + 1)
    return ((t + half) * bspline(order - 1, t + 0.5)
            + (half - t) * bspline(order - 1, t - 0.5)) / order


def angular_window(phi, center, ntheta, order=3):
    """B-spline bump in polar angle for one orientation channel.

    The windows of all ntheta channels (centers spaced by 2*pi/ntheta) sum to
    one at every angle.
    """
    htheta = TWO_PI / ntheta
    d = np.mod(phi - center + np.pi, TWO_PI) - np.pi
    return bspline(order, d / htheta)


def radial_window(rho, rho_max=0.45, flat_frac=0.5):
    """Raised-cosine low-pass: flat up to flat_frac*rho_max, zero beyond rho_max."""
    rho = np.asarray(rho, dtype=np.float64)
    r0 = flat_frac * rho_max
    out = np.ones_like(rho)
    roll = (rho - r0) / (rho_max - r0)
    mask = rho > r0
    out[mask] = 0.5 * (1.0 + np.cos(np.pi * np.clip(roll[mask], 0.0, 1.0)))
    out[rho >= rho_max] = 0.0
    return out


def build_cake_bank(ntheta: int, size: int = 15, rho_max: float = 0.45,
                    spline_order: int = 3, remove_dc: bool = True) -> WaveletBank:
    """Construct the oriented wavelet bank in the Fourier domain.

    Parameters
    ----------
    ntheta : int
        Number of orientations, at least 4 (the angular windows have support
        spanning spline_order + 1 channels).
    size : int
        Odd spatial kernel size K.
    rho_max : float
        Radial cutoff in cycles/pixel.
    """
    if ntheta < 4:
        raise ValueError("need at least 4 orientations")
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    htheta = TWO_PI / ntheta

    # The angular windows are evaluated on a design grid much larger than the
    # kernel: a size x size frequency lattice is far too coarse near rho = 0
    # to separate ntheta orientations, which would bias the bank towards
    # axis-aligned channels.  The inverse transform decays quickly, so the
    # central size x size crop carries essentially the full response.
    design = max(8 * size + 1, 121)
    f = np.fft.fftfreq(design)  # cycles/pixel
    fx, fy = np.meshgrid(f, f, indexing="ij")
    rho = np.hypot(fx, fy)
    phi = np.arctan2(fy, fx)
    radial = radial_window(rho, rho_max)
    if remove_dc:
        radial[0, 0] = 0.0

    kernels = np.empty((ntheta, size, size), dtype=np.float64)
    c, half = design // 2, size // 2
    for k in range(ntheta):
        # a line along angle theta_k has Fourier support perpendicular to it
        center = k * htheta + 0.5 * np.pi
        window = 0.5 * (angular_window(phi, center, ntheta, spline_order)
                        + angular_window(phi, center + np.pi, ntheta, spline_order))
        kern = np.fft.fftshift(np.real(np.fft.ifft2(window * radial)))
        crop = kern[c - half:c + half + 1, c - half:c + half + 1].copy()
        if remove_dc:
            crop -= crop.mean()  # spatial truncation leaves a tiny DC residue
        kernels[k] = crop
    return WaveletBank(ntheta=ntheta, kernels=kernels, rho_max=rho_max,
                       spline_order=spline_order, dc_removed=remove_dc)


def orientation_score(image: np.ndarray, bank: WaveletBank) -> LiftedField:
    """Correlate an image with every oriented kernel of the bank.

    ``image`` has shape (nx, ny) in the grid convention of this package.  The
    image is reflectively padded to the kernel support.  Returns the score on
    a GridM2 of the same spatial size.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("expected a 2D grayscale image")
    if min(image.shape) < bank.size:
        raise ValueError("kernel larger than image")
    grid = GridM2(image.shape[0], image.shape[1], bank.ntheta)
    values = np.empty(grid.shape, dtype=np.float64)
    for k in range(bank.ntheta):
        values[:, :, k] = ndimage.correlate(image, bank.kernels[k], mode="reflect")
    return LiftedField(grid, values)


def bank_transfer(bank: WaveletBank, shape) -> np.ndarray:
    """Sum over orientations of |psi_hat_k|^2 on the frequency grid of ``shape``."""
    pad = _padded_kernels_fft(bank, shape)
    return np.sum(np.abs(pad) ** 2, axis=0)


def _padded_kernels_fft(bank: WaveletBank, shape):
    ker = np.zeros((bank.ntheta,) + tuple(shape), dtype=np.float64)
    K = bank.size
    ker[:, :K, :K] = bank.kernels
    c = K // 2
    ker = np.roll(ker, (-c, -c), axis=(1, 2))  # center kernels at the origin
    return np.fft.fft2(ker, axes=(1, 2))


def reconstruct_approx(score: LiftedField, bank: WaveletBank, rel_floor: float = 0.05) -> np.ndarray:
    """Adjoint-sum reconstruction of the (band-passed) image from its score.

    Convolves every channel with its kernel, sums, and renormalizes by the
    bank transfer function on its support.  Exact reconstruction is not the
    goal; the output approximates the image content inside the bank's
    frequency band (the DC component is gone by construction).  The round
    trip assumes periodic content; images with strong boundary-crossing
    structure reconstruct with artifacts near the border.
    """
    if score.grid.ntheta != bank.ntheta:
        raise ValueError("bank does not match score dimensions")
    shape = (score.grid.nx, score.grid.ny)
    hats = _padded_kernels_fft(bank, shape)
    acc = np.zeros(shape, dtype=np.complex128)
    for k in range(bank.ntheta):
        acc += np.fft.fft2(score.values[:, :, k]) * hats[k]
    transfer = np.sum(np.abs(hats) ** 2, axis=0)
    tmax = transfer.max()
    # below the floor the transfer cannot be inverted stably; those
    # frequencies are outside the band reported by band_passed anyway
    safe = np.where(transfer > rel_floor * tmax, transfer, np.inf)
    return np.real(np.fft.ifft2(acc / safe))


def band_passed(image: np.ndarray, bank: WaveletBank, rel_cut: float = 0.05) -> np.ndarray:
    """Project an image onto the frequency band where the bank has support."""
    transfer = bank_transfer(bank, image.shape)
    mask = transfer > rel_cut * transfer.max()
    return np.real(np.fft.ifft2(np.fft.fft2(image) * mask))
