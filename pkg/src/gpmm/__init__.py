"""Gaussian process morphable models from a single vertex-colored template.

The package covers the full pipeline: kernel construction over a template
mesh, low-rank model extraction, sampling and quality metrics, mixture
models over several templates, rendering, analysis-by-synthesis fitting,
scan registration, and the iterative model-learning loop. `gpmm.cli`
exposes it all as the `gpmm` command.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    DataError,
    FitAbortError,
    GpmmError,
    MeshFormatError,
    NumericalError,
    TopologyError,
)
from .mesh import (  # noqa: F401
    LandmarkSet,
    Mesh,
    MirrorTransform,
    bilateral_asymmetry,
    chamfer_distance,
    hausdorff_distance,
    mirror_mesh,
    mirror_partners,
    vertex_normals,
)
from .meshfile import load_landmarks, load_mesh, load_observations, save_mesh  # noqa: F401
from .synthetic import head_template  # noqa: F401
