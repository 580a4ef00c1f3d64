"""Synthetic tube phantoms with ground-truth masks and endpoints.

Centerlines are polylines; the intensity profile across a tube is a smooth
compact bump so the lifted scores stay well-behaved.  Every generator
returns the image, the ground-truth tube mask, and named points (with
tangent angles where meaningful) for seeding trackers.
"""

from __future__ import annotations

import numpy as np


def _dist_to_polyline(shape, pts):
    """Per-pixel distance to a polyline and the index of the nearest segment."""
    xx, yy = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    p = np.stack([xx, yy], axis=-1).astype(np.float64)
    best = np.full(shape, np.inf)
    for i in range(len(pts) - 1):
        a, b = pts[i], pts[i + 1]
        ab = b - a
        den = float(ab @ ab)
        if den == 0:
            d = np.linalg.norm(p - a, axis=-1)
        else:
            t = np.clip(((p - a) @ ab) / den, 0.0, 1.0)
            proj = a + t[..., None] * ab
            d = np.linalg.norm(p - proj, axis=-1)
        best = np.minimum(best, d)
    return best


def tube_image(shape, centerline, width: float):
    """Render a bright tube of half-width ``width`` along a centerline.

    Profile (1 - (d/w)^2)^2 inside distance w, zero outside; returns
    (image, mask) with the mask at distance <= width.
    """
    pts = np.asarray(centerline, dtype=np.float64)
    d = _dist_to_polyline(shape, pts)
    prof = np.clip(1.0 - (d / width) ** 2, 0.0, None) ** 2
    return prof, d <= width


def straight_tube(n: int = 96, angle: float = 0.3, width: float = 2.0, margin: float = 10.0):
    """A straight bright tube through the image center at the given angle."""
    c = (n - 1) / 2.0
    u = np.array([np.cos(angle), np.sin(angle)])
    half = (c - margin) / max(abs(u[0]), abs(u[1]), 1e-12)
    a = np.array([c, c]) - half * u
    b = np.array([c, c]) + half * u
    img, mask = tube_image((n, n), [a, b], width)
    return {
        "image": img, "mask": mask,
        "start": (a[0], a[1], angle), "end": (b[0], b[1], angle),
        "centerline": np.stack([a, b]),
    }


def s_curve(n: int = 96, width: float = 2.0, amplitude: float = 0.22, margin: float = 8.0,
            samples: int = 400):
    """An S-shaped tube y = c + A*n*sin(2*pi*(x-margin)/L) spanning the image."""
    c = (n - 1) / 2.0
    x = np.linspace(margin, n - 1 - margin, samples)
    L = x[-1] - x[0]
    y = c + amplitude * n * np.sin(2.0 * np.pi * (x - x[0]) / L)
    pts = np.column_stack([x, y])
    img, mask = tube_image((n, n), pts, width)
    dydx = amplitude * n * (2.0 * np.pi / L) * np.cos(2.0 * np.pi * (x - x[0]) / L)
    th0 = float(np.arctan2(dydx[0], 1.0))
    th1 = float(np.arctan2(dydx[-1], 1.0))
    return {
        "image": img, "mask": mask,
        "start": (x[0], y[0], th0), "end": (x[-1], y[-1], th1),
        "centerline": pts,
    }


def y_tree(n: int = 96, width: float = 2.0, margin: float = 10.0, spread: float = 0.35):
    """A Y: one trunk from the seed splitting at a bifurcation into two tips.

    The trunk runs along +x; branches leave the bifurcation at +-spread
    radians and are gently curved (quadratic blend) so the lifted scores
    turn smoothly.
    """
    c = (n - 1) / 2.0
    seed = np.array([margin, c])
    bif = np.array([0.45 * (n - 1), c])
    tips = []
    branches = []
    for s in (+1.0, -1.0):
        ang = s * spread
        t = np.linspace(0.0, 1.0, 200)
        length = (n - 1 - margin) - bif[0]
        # heading blends from 0 to ang over the first third of the branch
        head = ang * np.clip(t / 0.33, 0.0, 1.0)
        step = length / len(t)
        xy = np.cumsum(np.column_stack([np.cos(head), np.sin(head)]) * step, axis=0) + bif
        keep = (xy[:, 0] <= n - 1 - margin) & (xy[:, 1] >= margin) & (xy[:, 1] <= n - 1 - margin)
        xy = xy[keep]
        branches.append(xy)
        tips.append((xy[-1][0], xy[-1][1], ang))
    trunk = np.stack([seed, bif])
    img = np.zeros((n, n))
    mask = np.zeros((n, n), dtype=bool)
    for pts in (trunk, branches[0], branches[1]):
        im, mk = tube_image((n, n), pts, width)
        img = np.maximum(img, im)
        mask |= mk
    return {
        "image": img, "mask": mask,
        "seed": (seed[0], seed[1], 0.0), "bifurcation": (bif[0], bif[1], 0.0),
        "tips": tips, "centerlines": [trunk, branches[0], branches[1]],
    }
