"""HDG solver for the mixed Cahn-Hilliard system with convex-concave splitting."""

from .mesh import Mesh, build_structured_mesh, import_mesh, export_mesh, validate
from .space import FeSpace, PairField, DofMap, QuadratureRule

__version__ = "0.1.0"

__all__ = [
    "Mesh",
    "build_structured_mesh",
    "import_mesh",
    "export_mesh",
    "validate",
    "FeSpace",
    "PairField",
    "DofMap",
    "QuadratureRule",
    "__version__",
]
