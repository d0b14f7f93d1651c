"""Numerical laboratory for null controllability of semilinear parabolic SPDEs.

Carleman weight systems, forward/backward SPDE integrators on binary
Brownian scenario trees, penalized null-control synthesis by adjoint
conjugate gradient, and Picard fixed-point drivers for Lipschitz
nonlinearities.
"""

from .mesh import (SpatialMesh, build_mesh, div_a_grad, gradient, h1_seminorm,
                   l2_inner)
from .scenario import (ScenarioTree, build_tree, conditional_expectation,
                       expectation, martingale_coefficient,
                       measurability_probe, sample_adapted_coefficients)
from .weights import (PowerSpec, WeightBase, WeightParams, WeightSystem,
                      build_beta, build_weight_system, gamma, log_weight,
                      weighted_expectation_norm, weighted_slab_norm)
from .spde import (BackwardProblem, ForwardProblem, StatePair, TreeOperator,
                   apply_adjoint, solve_backward, solve_forward)
from .hum import (ControlResult, HumConfig, assemble_functional,
                  epsilon_sweep, solve_null_control, verify_energy_estimate)
from .carleman import (CarlemanReport, EstimateId, calibrate_constant,
                       eval_estimate)
from .semilinear import (FixedPointTrace, Nonlinearity, contraction_probe,
                         picard_backward, picard_forward)
from .sampling import seed_split

__all__ = [name for name in dir() if not name.startswith("_")]
