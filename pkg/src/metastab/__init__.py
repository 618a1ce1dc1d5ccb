"""Numerical study of a metastable perturbation of an intermittent interval map.

The map has a neutral fixed point at 0 and two invariant halves that are
joined by small holes once the perturbation parameter is positive. The
package induces the map on a region away from the fixed point,
discretises the induced transfer operator, pulls the induced density
back to the whole interval and follows the invariant density as the
holes shrink.
"""

from .errors import (AmbiguityError, ConfigError, ConvergenceError, DomainError, GridError,
                     MetastabError, NumericalError, ParameterError, RangeError, TruncationError,
                     UnresolvedRegionError)
from .ergodic_graph import build_access_graph, ergodic_component_bound
from .holes_ratio import (checked_mixture, full_holes, h_p_build, hole_measure, induced_holes,
                          lhr_closed_form, lhr_sweep, mixture)
from .inducing import boundary_orbit, build_cylinders, induce, return_time_oracle
from .map_core import MapModel, MapParams, build_map
from .pullback import PullbackDensity, kac_constant, pullback
from .transfer_op import (Grid, StepDensity, UlamOperator, build_induced_ulam, build_ulam,
                          delta_grid, l1_distance, stationary_density)

__version__ = "0.1.0"
