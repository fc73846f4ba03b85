"""Hot numeric kernels with numba and pure-numpy backends.

Each submodule exposes a public function that dispatches on
``planelite.backend.get_backend()``. The numba path is compiled with
``cache=True`` so repeat runs skip compilation.
"""

from planelite.kernels.grow import grow_from_seeds
from planelite.kernels.qem import edge_cost, edge_costs_batch, face_quadrics
from planelite.kernels.raster import rasterize

__all__ = [
    "grow_from_seeds",
    "edge_cost",
    "edge_costs_batch",
    "face_quadrics",
    "rasterize",
]
