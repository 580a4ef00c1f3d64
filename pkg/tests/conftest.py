import numpy as np
import pytest

from m2track.grid import GridM2, LiftedField


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile the numba kernels once on a tiny problem."""
    from m2track.metric import DualMetricField
    from m2track.stencil import build_stencils
    from m2track.eikonal import fast_march, scheme_residual
    g = GridM2(8, 8, 8)
    D = np.broadcast_to(np.eye(3), g.shape + (3, 3)).copy()
    dual = DualMetricField(g, D, np.zeros(g.shape + (3,)), np.ones(g.shape))
    st = build_stencils(dual, 0.1)
    dm = fast_march([(4, 4, 4)], st)
    scheme_residual(dm, st)
    from m2track.geodesic import descent_direction_field
    descent_direction_field(dm, st)


@pytest.fixture
def small_grid():
    return GridM2(16, 16, 8)


def coordinate_fields(grid):
    xx, yy, tt = np.meshgrid(np.arange(grid.nx, dtype=float),
                             np.arange(grid.ny, dtype=float),
                             grid.thetas, indexing="ij")
    return xx, yy, tt


@pytest.fixture
def coord_fields(small_grid):
    return coordinate_fields(small_grid)
