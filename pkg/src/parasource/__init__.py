"""parasource: recover the spatial part of separated sources in coupled heat systems.

The package solves coupled parabolic systems ∂t Y − ν ΔY + Q Y = σ(t) F(x) with
homogeneous Dirichlet conditions and reconstructs the vector field F from
measurements of a reduced set of state components on a subdomain, by two routes:

* a spectral/control/Volterra pipeline (mode-by-mode coefficient identities), and
* a PDE-constrained steepest-descent fit of the measurements.

Both routes share the P1 finite-element discretization in :mod:`parasource.fem`
and the time steppers in :mod:`parasource.forward`.
"""

from parasource.config import RunConfig, emit_config, parse_config
from parasource.meshing import Mesh, SubdomainMask, build_interval_mesh, build_rect_mesh, mask_from_boxes
from parasource.optimize import (
    InverseProblemConfig,
    descend,
    gradient_J,
    objective_J,
    relative_error,
    relative_error_components,
    synthesize_observations,
)

__all__ = [
    "Mesh",
    "SubdomainMask",
    "build_interval_mesh",
    "build_rect_mesh",
    "mask_from_boxes",
    "RunConfig",
    "parse_config",
    "emit_config",
    "InverseProblemConfig",
    "synthesize_observations",
    "objective_J",
    "gradient_J",
    "descend",
    "relative_error",
    "relative_error_components",
]

__version__ = "0.1.0"
