"""
End-to-end tracking: image -> score -> cost -> metric -> distance -> curves.

Covers single-vessel tracking between two points, two-run vascular-tree
tracking (tips to nearest bifurcation/seed, then bifurcations to seeds), and
per-tree tracking with a prior seed/tip grouping.  Evaluation against a
ground-truth mask reports the fraction of tracked pixels that miss the
vessel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .curves import Geodesic, rasterize_spatial
from .diffgeo import hessian_field
from .eikonal import DistanceMap, fast_march
from .geodesic import BacktrackError, backtrack, discrete_walk
from .grid import GridM2, LiftedField, canonical_theta
from .lifting import build_cake_bank, orientation_score
from .metric import (MetricField, ModelParams, base_metric, data_driven_metric,
                     diagonalize, dual_coefficients, forward_covector, mixed_metric)
from .stencil import build_stencils
from .vesselness import VesselnessParams, score_magnitude_cost, vesselness_cost


class ConfigError(ValueError):
    """Bad or inconsistent tracking configuration."""


class UnreachableTarget(RuntimeError):
    """The distance map never reached the requested start point."""


@dataclass
class CostConfig:
    kind: str = "vesselness"          # or "score"
    scales: tuple = (1.0,)            # thin-vessel run
    thick_scales: tuple = (1.0, 2.0)  # thick-vessel run
    erosion: float = 1.0
    lam: float = 1000.0
    p: float = 2.0
    polarity: str = "bright"
    gain: float = 200.0               # for kind == "score"

    def vessel_params(self, thick: bool = False) -> VesselnessParams:
        return VesselnessParams(scales=tuple(self.thick_scales if thick else self.scales),
                                erosion=self.erosion, lam=self.lam, p=self.p,
                                polarity=self.polarity)


@dataclass
class TrackingConfig:
    """Everything needed to reproduce a tracking run on one image."""

    ntheta: int = 16
    kernel_size: int = 15
    model: ModelParams = field(default_factory=lambda: ModelParams(
        xi=0.1, zeta=0.1, eps=0.1, lam=50.0))
    cost: CostConfig = field(default_factory=CostConfig)
    seeds: list = field(default_factory=list)
    tips: list = field(default_factory=list)
    bifurcations: list = field(default_factory=list)
    crossings: list = field(default_factory=list)
    groups: dict = field(default_factory=dict)   # seed index -> list of tip indices
    mixed_a: float = 5.0
    mixed_sigma: float = 1.0
    early_stop: bool = False  # stop sweeps once targets are reached (faster,
    #                           but descent may cross thinly swept regions)

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrackingConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        try:
            if "model" in d:
                d["model"] = ModelParams(**d["model"])
            if "cost" in d:
                c = dict(d["cost"])
                for key in ("scales", "thick_scales"):
                    if key in c:
                        c[key] = tuple(c[key])
                d["cost"] = CostConfig(**c)
            if "groups" in d:
                d["groups"] = {int(k): list(v) for k, v in d["groups"].items()}
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad config: {e}") from e


@dataclass
class TrackedProblem:
    """All the per-image fields a tracking run needs, built once."""

    grid: GridM2
    score: LiftedField
    cost: LiftedField
    metric: MetricField
    dual: object
    stencils: object
    gauge: object


def prepare_problem(image: np.ndarray, config: TrackingConfig,
                    cost_field: Optional[LiftedField] = None,
                    thick: bool = False) -> TrackedProblem:
    """Lift, cost, metric (data-driven, mixed near crossings), dual, stencils."""
    _check_points_inside(image.shape, config)
    bank = build_cake_bank(config.ntheta, size=config.kernel_size)
    score = orientation_score(image, bank)
    if cost_field is not None:
        cost = cost_field
    elif config.cost.kind == "vesselness":
        cost = vesselness_cost(score, config.cost.vessel_params(thick))
    elif config.cost.kind == "score":
        cost = score_magnitude_cost(score, gain=config.cost.gain)
    else:
        raise ConfigError(f"unknown cost kind {config.cost.kind!r}")

    params = config.model
    base = base_metric(cost, params)
    if params.lam > 0:
        hess = hessian_field(score, params.xi, sigma_s=min(config.cost.scales), sigma_a=0.0)
        dd = data_driven_metric(base, hess, params)
        gauge_dd = diagonalize(dd)
        dd = MetricField(dd.grid, dd.G, forward_covector(gauge_dd, params), dd.cost)
        metric = mixed_metric(base, dd, config.crossings, config.mixed_a,
                              config.mixed_sigma) if config.crossings else dd
    else:
        metric = base
    gauge = diagonalize(metric)
    dual = dual_coefficients(metric)
    stencils = build_stencils(dual, eps_rel=params.eps if params.eps < 1 else 0.1,
                              alias="clip")
    return TrackedProblem(score.grid, score, cost, metric, dual, stencils, gauge)


def _check_points_inside(shape, config: TrackingConfig):
    for name in ("seeds", "tips", "bifurcations", "crossings"):
        for p in getattr(config, name):
            x, y = p[0], p[1]
            if not (0 <= x < shape[0] and 0 <= y < shape[1]):
                raise ConfigError(f"{name} point {p} outside the image {shape}")


def infer_theta(problem: TrackedProblem, point) -> float:
    """Channel angle of the cheapest cost at the nearest pixel."""
    g = problem.grid
    ix, iy = int(round(point[0])), int(round(point[1]))
    k = int(np.argmin(problem.cost.values[ix, iy, :]))
    return k * g.htheta


def lifted_voxels(problem: TrackedProblem, point, both_fibers: bool = True):
    """Voxel(s) of a possibly-2D annotation point.

    Points without an explicit angle get the vesselness-argmax channel; the
    antipodal channel is included as well (orientation is defined mod pi, so
    a tracked curve may arrive on either fiber) unless ``both_fibers`` is
    off or the angle was given explicitly.
    """
    g = problem.grid
    explicit = len(point) > 2 and point[2] is not None
    th = float(point[2]) if explicit else infer_theta(problem, point)
    vox = g.nearest_voxel((point[0], point[1], th))
    out = [vox]
    if both_fibers and not explicit:
        out.append((vox[0], vox[1], (vox[2] + g.ntheta // 2) % g.ntheta))
    return out


def _best_start_voxel(dist: DistanceMap, voxels):
    vals = [dist.W[v] for v in voxels]
    i = int(np.argmin(vals))
    return voxels[i], vals[i]


def track_single(image: np.ndarray, config: TrackingConfig, p_start, p_end,
                 problem: Optional[TrackedProblem] = None) -> Geodesic:
    """Track one structure from p_start to p_end (pixel coords, theta optional).

    Solves the distance map seeded at p_end with early stop at p_start, then
    backtracks.  The returned curve runs from p_start to p_end.
    """
    if problem is None:
        problem = prepare_problem(image, config)
    if tuple(p_start[:2]) == tuple(p_end[:2]):
        th = float(p_start[2]) if len(p_start) > 2 and p_start[2] is not None else \
            infer_theta(problem, p_start)
        pt = np.array([[p_start[0], p_start[1], th]])
        return Geodesic(t=np.zeros(1), points=pt, length=0.0)
    src = lifted_voxels(problem, p_end)
    stop = lifted_voxels(problem, p_start)
    dist = fast_march(src, problem.stencils,
                      stop_voxels=stop if config.early_stop else None)
    start_vox, wv = _best_start_voxel(dist, stop)
    if not np.isfinite(wv):
        raise UnreachableTarget(f"start point {p_start} not reached from {p_end}")
    return _robust_backtrack(problem, dist, start_vox)


def _robust_backtrack(problem: TrackedProblem, dist, start_vox) -> Geodesic:
    """ODE steepest descent with the discrete stencil walk as fallback."""
    gauge = problem.gauge.to_frame()
    try:
        return backtrack(problem.grid.voxel_point(start_vox), dist, problem.dual,
                         gauge=gauge, stencils=problem.stencils)
    except BacktrackError:
        return discrete_walk(start_vox, dist, problem.stencils, gauge=gauge)


@dataclass
class TrackedCurve:
    tag: str
    target: tuple
    geodesic: Optional[Geodesic]
    error: str = ""


@dataclass
class TreeResult:
    curves: list = field(default_factory=list)
    sweeps: int = 0

    def geodesics(self):
        return [c.geodesic for c in self.curves if c.geodesic is not None]

    def failures(self):
        return [c for c in self.curves if c.geodesic is None]


def _backtrack_targets(problem, dist, targets, tag, result):
    for pt in targets:
        voxels = lifted_voxels(problem, pt)
        vox, wv = _best_start_voxel(dist, voxels)
        if not np.isfinite(wv):
            result.curves.append(TrackedCurve(tag, tuple(pt), None, "unreached"))
            continue
        try:
            geo = _robust_backtrack(problem, dist, vox)
            result.curves.append(TrackedCurve(tag, tuple(pt), geo))
        except BacktrackError as e:
            result.curves.append(TrackedCurve(tag, tuple(pt), e.partial, str(e)))


def track_tree_two_runs(image: np.ndarray, config: TrackingConfig) -> TreeResult:
    """Whole-tree tracking in exactly two fast-marching sweeps.

    Run 1: thin-vessel cost, sources are all bifurcations and seeds,
    backtrack from every tip (reaching its nearest bifurcation or seed).
    Run 2: thick-vessel cost, sources are the seeds, backtrack from every
    bifurcation.  Per-curve failures are collected, not raised.
    """
    if not config.seeds:
        raise ConfigError("tree tracking needs at least one seed")
    result = TreeResult()

    problem1 = prepare_problem(image, config, thick=False)
    sources = []
    for pt in config.bifurcations + config.seeds:
        sources.extend(lifted_voxels(problem1, pt))
    dist1 = fast_march(sources, problem1.stencils)
    result.sweeps += 1
    _backtrack_targets(problem1, dist1, config.tips, "run1", result)

    if config.bifurcations:
        problem2 = prepare_problem(image, config, thick=True)
        sources2 = []
        for pt in config.seeds:
            sources2.extend(lifted_voxels(problem2, pt))
        dist2 = fast_march(sources2, problem2.stencils)
        result.sweeps += 1
        _backtrack_targets(problem2, dist2, config.bifurcations, "run2", result)
    return result


def track_per_tree(image: np.ndarray, config: TrackingConfig) -> TreeResult:
    """One sweep per seed over its pre-classified tips.

    In-place rotations emerge at bifurcations without anchor points; the
    seed grouping must cover every tip.
    """
    grouped = set()
    for tips in config.groups.values():
        grouped.update(tips)
    missing = set(range(len(config.tips))) - grouped
    if missing:
        raise ConfigError(f"tips without a seed group: {sorted(missing)}")
    result = TreeResult()
    problem = prepare_problem(image, config, thick=True)
    for seed_idx, tip_idx in sorted(config.groups.items()):
        if not (0 <= seed_idx < len(config.seeds)):
            raise ConfigError(f"group references unknown seed {seed_idx}")
        sources = lifted_voxels(problem, config.seeds[seed_idx])
        stops = []
        for t in tip_idx:
            stops.extend(lifted_voxels(problem, config.tips[t]))
        dist = fast_march(sources, problem.stencils,
                          stop_voxels=stops if config.early_stop else None)
        result.sweeps += 1
        _backtrack_targets(problem, dist, [config.tips[t] for t in tip_idx],
                           f"seed{seed_idx}", result)
    return result


def mistake_ratio(curves: Sequence[Geodesic], mask: np.ndarray, dilate: int = 1) -> float:
    """Fraction of rasterized geodesic pixels outside the vessel mask."""
    curves = [c for c in curves if c is not None]
    if not curves:
        raise ValueError("no geodesics to evaluate")
    ok_mask = mask.astype(bool)
    if dilate > 0:
        ok_mask = ndimage.binary_dilation(ok_mask, iterations=dilate)
    total = 0
    wrong = 0
    for geo in curves:
        pix = rasterize_spatial(geo.points, mask.shape)
        total += len(pix)
        wrong += int(np.sum(~ok_mask[pix[:, 0], pix[:, 1]]))
    if total == 0:
        raise ValueError("geodesics rasterized to zero pixels")
    return wrong / total


def mask_coverage(curves: Sequence[Geodesic], mask: np.ndarray, radius: int = 2) -> float:
    """Fraction of mask pixels within ``radius`` of some rasterized curve pixel."""
    covered = np.zeros_like(mask, dtype=bool)
    for geo in curves:
        if geo is None:
            continue
        pix = rasterize_spatial(geo.points, mask.shape)
        covered[pix[:, 0], pix[:, 1]] = True
    if radius > 0:
        covered = ndimage.binary_dilation(covered, iterations=radius)
    m = mask.astype(bool)
    return float(np.sum(covered & m) / np.sum(m))
