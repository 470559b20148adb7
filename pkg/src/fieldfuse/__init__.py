"""fieldfuse: fuse biased simulation fields with noisy measurements so the
integrated quantities of interest match independently measured values.

Two routes to the same goal: closed-form Bayesian MAP inference with
confidence bands, and constrained proper orthogonal decomposition with
Student-t ensemble bounds.
"""

from .errors import (ConstraintInfeasibleError, DataError, FieldFuseError,
                     GeometryError, NumericalError, OperatorError)
from .geometry import (OutputOperator, SurfaceGrid, apply_forward,
                       build_airfoil_grid, build_output_operator,
                       impute_missing, interpolate_to_common_grid,
                       naca4_surfaces)
from .prior import (FieldSample, FlowCondition, Hyperparameters, PriorSpec,
                    combined_variance, estimate_theta, fuse_prior_mean,
                    prior_covariance, sample_prior)
from .bayes import (BayesResult, QoIMeasurement, confidence_bands,
                    map_estimate, posterior_covariance, run_bayesian_fusion,
                    sample_posterior)
from .cpod import (CpodEnsemble, CpodResult, PodBasis, SnapshotSet,
                   compute_pod, cpod_ensemble, run_cpod, solve_kkt,
                   truncate_basis, truncate_rank)
from .synth import (ScenarioBundle, ScenarioSpec, build_bundle,
                    corrupt_measurement, bias_simulation, generate_truth,
                    generate_snapshot_bank, generate_campaign,
                    condition_spec, latin_hypercube, maximin_lhs,
                    measure_qois, rae_table_conditions)

__version__ = "0.1.0"
