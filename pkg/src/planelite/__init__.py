"""planelite: plane-structured simplification and texturing of dense RGB-D meshes."""

__version__ = "0.1.0"

from planelite.config import PipelineConfig
from planelite.mesh_core import IndexedMesh

__all__ = ["IndexedMesh", "PipelineConfig", "__version__"]
