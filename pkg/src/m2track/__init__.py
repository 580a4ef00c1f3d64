"""Geodesic tracking of tubular structures via orientation lifting.

Images are lifted to the space of positions and orientations, a data-driven
anisotropic metric is built from the lifted scores, distances are solved by a
causal fast-marching scheme on Selling stencils, and tracked curves are
extracted by steepest descent.
"""

from .curves import Geodesic
from .grid import GridM2, LiftedField, PointM2, load_image, save_overlay
from .lifting import WaveletBank, build_cake_bank, orientation_score, reconstruct_approx
from .metric import ModelParams
from .pipeline import (CostConfig, TrackingConfig, TreeResult, mistake_ratio,
                       track_per_tree, track_single, track_tree_two_runs)
from .vesselness import VesselnessParams, vesselness_cost

__version__ = "0.1.0"

__all__ = [
    "Geodesic", "GridM2", "LiftedField", "PointM2", "WaveletBank", "ModelParams",
    "CostConfig", "TrackingConfig", "TreeResult", "VesselnessParams",
    "build_cake_bank", "orientation_score", "reconstruct_approx", "load_image",
    "save_overlay", "vesselness_cost", "mistake_ratio", "track_single",
    "track_tree_two_runs", "track_per_tree",
]
