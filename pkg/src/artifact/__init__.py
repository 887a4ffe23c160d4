"""Numerical laboratory for one-dimensional SDEs driven by fractional Brownian motion."""

import warnings

# numba probes for an optional TBB runtime and warns when it is too old
warnings.filterwarnings("ignore", message=".*TBB.*", module="numba")

from .errors import (ArtifactError, ContractError, DomainError, FactorizationError,  # noqa: E402
                     InadmissibleStepError, SolverError)
from .fbm import FbmPath, fbm_covariance, holder_ratio, sample_fbm, sample_fbm_cholesky  # noqa: E402
from .flow import (ReferencePath, directional_derivative, doss_solution, flow_phi,  # noqa: E402
                   iterated_integral, reference_solution, solve_a, symmetric_integral,
                   taylor_remainder_check, transform_solution)
from .limits import (LimitProcessSpec, error_limit_process, limit_spec,  # noqa: E402
                     simulate_limit_U, theoretical_rate)
from .models import MODEL_REGISTRY, CoefficientModel, get_model  # noqa: E402
from .perturbation import (CoefficientFamily, PerturbationPath, coefficient_functions,  # noqa: E402
                           main_term_kappa, one_step_error, phi_processes, solve_perturbation)
from .schemes import SchemeKind, SchemeTrajectory, admissible_level, run_scheme, scheme_step  # noqa: E402
from .variations import (LimitConstants, WeightMeasure, a_cov, a_dagger, hermite, rho,  # noqa: E402
                         sigma_qH, sigma_tilde, trapezoid_variation, weighted_hermite_variation)

__version__ = "0.1.0"
