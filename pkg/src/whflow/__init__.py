"""Wasserstein-Hamiltonian flows on graphs: energies, structure-preserving time
steppers, a viscosity upwind scheme and the experiment runner."""
from .analysis import (BoundInputs, DensityBound, DiagnosticsRecord, applicable_lower_bound,
                       bound_inputs, lower_bound_boundary, lower_bound_periodic,
                       record_diagnostics, step_size_bound, symplecticity_defect,
                       two_node_closed_form)
from .config import ConfigError, ScenarioConfig, SweepConfig, load_config, parse_config
from .graph import GraphError, WeightedGraph, build_lattice_1d, read_edge_list, validate
from .hamiltonian import (HamiltonianSpec, State, energy_breakdown, fisher_gradient,
                          fisher_hessian, fisher_information, gradients, hamiltonian, hessian,
                          vector_field)
from .integrators import (GAUSS2, MIDPOINT, SYMPLECTIC_EULER, EXPLICIT_EULER, SolverConfig,
                          StepFailure, StepReport, Tableau, Trajectory, check_tableau_symplectic,
                          integrate, make_stepper, step_explicit_euler, step_implicit_midpoint,
                          step_prk, step_symplectic_euler)
from .scenarios import build_problem, run_scenario, sweep_beta_tau
from .viscosity import ViscosityConfig, run_to_steady, select_alpha, step_viscosity_upwind
from .weights import AVERAGE, LOGMEAN, UPWIND, DensityDomainError, WeightKind, WeightRule

__version__ = "0.1.0"
