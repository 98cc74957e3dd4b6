"""Space-time hybridizable DG solver for linear free-surface waves."""

from .basis import (PrismGeometry, QuadratureRule, ReferenceBasis, SpaceKind,
                    eval_mapped, make_basis, make_quadrature)
from .local import (AssemblyError, DiscreteSpace, ElementOperator,
                    SlabOperators, WeightFn, assemble_local, back_substitute,
                    energy_identity_check)
from .march import (GlobalSystem, SlabSolution, SolverError, assemble_global,
                    march, solve_slab)
from .mesh import (EdgeTag, FacetRole, MeshError, SpaceTimeSlab, SpatialMesh,
                   apply_periodic, build_structured_mesh, extrude_slab,
                   read_mesh_file, write_mesh_file)
from .problems import (HarmonicWave, HarmonicWaveProblem, WaveMakerProblem,
                       WaveMakerSpec, analytic_fields, calibrate_phi0,
                       dispersion_omega, wavemaker_flux)
from .projection import (measure_projection_rates, project_element,
                         project_slab, weighted_l2_project)
from .reports import (ConfigError, ConvergenceReport, RunConfig,
                      error_lambda_surface, error_q_spacetime, run_study,
                      surface_profile, surface_profile_csv)

__version__ = "0.1.0"
