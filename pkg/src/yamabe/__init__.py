"""Numerical toolkit for competitive conformally-critical systems on closed
manifolds: ground states on Nehari-type constraint sets, segregation limits
under strong repulsion, the optimal partitions they induce, and the
frequency/decay diagnostics that certify the free-boundary behavior."""

from .constants import (ConstantsTable, constants, radial_integral,
                        round_sphere_constant, sphere_volume)
from .bubbles import (BubbleParams, bubble_eval, expansion_fit,
                      moment_scaling, truncated_quotient)
from .mesh import (MeshMetric, MeshForms, assemble_forms,
                   build_capsule_sphere, build_dumbbell_sphere,
                   build_flat_torus, build_octahedron_sphere,
                   build_round_sphere, coercivity_check, load_fields,
                   load_mesh, save_fields, save_mesh, simplex_rule)
from .nehari import (CouplingSpec, EnergyBreakdown, BlowupReport,
                     NonProjectableError, SolveResult, blowup_risk, energy,
                     energy_terms, gradient, minimize, nehari_project,
                     nehari_residual, project_breakdown, scaled_energy)
from .almgren import (AlmgrenTrace, CoefficientField, CoefficientReport,
                      DecayReport, DoublingReport, GridField,
                      MonotonicityReport, almgren_trace, coefficient_bounds,
                      comparison_supersolution, decay_verify, doubling_check,
                      latitude_chart, monotonicity_check, mu,
                      pohozaev_residual, recenter)
from .segregation import (ContinuationRecord, InterfaceReport, LambdaSchedule,
                          NodalReport, PartitionResult, SupportSolve,
                          continue_lambda, equation_residual,
                          extract_partition, holder_estimate,
                          interface_diagnostics, nodal_solution,
                          overlap_measure, pair_swap_reflection,
                          segregation_integral, support_energy,
                          threshold_check_m10)

__version__ = "0.1.0"
