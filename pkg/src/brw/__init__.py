"""Branching random walks with immigration on a torus: exact-event
simulation, moment formulas, Feynman-Kac solvers and stability envelopes,
each cross-validated against the others."""

__version__ = "0.1.0"

from .kernel import KernelSpec, TorusGrid, validate_kernel
from .model import (BranchingLaw, InitialCondition, ModelParams, SpatialModel,
                    binary_example, classify_criticality, derived_rates)
from .simulator import (EnsembleStats, FieldState, drift_audit,
                        estimate_generating_function, estimate_moment,
                        run_ensemble, simulate_replica, step_event)
from .moments import (first_moment_curve, m1_closed_form,
                      m2_steady_state_fourier, m2_steady_state_series,
                      m2_transient, steady_covariance)
from .hierarchy import (HierarchyOperator, MomentTensor, assemble, integrate,
                        integrate_orders)
from .feynman_kac import (ParabolicProblem, PathEstimate, solve_direct,
                          solve_fk_mc, transition_matrix)
from .lyapunov import (EnvelopeBounds, PerturbationEnvelope, check_assumptions,
                       compute_L, m1_envelope, second_moment_functions,
                       verify_m1_stability, verify_m2_stability)

__all__ = [
    "KernelSpec", "TorusGrid", "validate_kernel",
    "BranchingLaw", "InitialCondition", "ModelParams", "SpatialModel",
    "binary_example", "classify_criticality", "derived_rates",
    "EnsembleStats", "FieldState", "drift_audit",
    "estimate_generating_function", "estimate_moment", "run_ensemble",
    "simulate_replica", "step_event",
    "first_moment_curve", "m1_closed_form", "m2_steady_state_fourier",
    "m2_steady_state_series", "m2_transient", "steady_covariance",
    "HierarchyOperator", "MomentTensor", "assemble", "integrate",
    "integrate_orders",
    "ParabolicProblem", "PathEstimate", "solve_direct", "solve_fk_mc",
    "transition_matrix",
    "EnvelopeBounds", "PerturbationEnvelope", "check_assumptions", "compute_L",
    "m1_envelope", "second_moment_functions", "verify_m1_stability",
    "verify_m2_stability",
]
