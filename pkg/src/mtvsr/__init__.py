"""Multi-channel total-variation super-resolution for thick-slice MR volumes."""

from .forward_model import ProjectionOperator, SliceProfile, build_projection, identity_operator
from .image_io import RunReport, read_volume, write_volume
from .pipeline import METHODS, reconstruct
from .regularizer import PriorKind
from .solver import ModelSpec, solve, solve_fot
from .volume import GridSpec, Volume

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "Volume",
    "ProjectionOperator",
    "SliceProfile",
    "build_projection",
    "identity_operator",
    "RunReport",
    "read_volume",
    "write_volume",
    "PriorKind",
    "ModelSpec",
    "solve",
    "solve_fot",
    "METHODS",
    "reconstruct",
]
