"""Data-driven bilinear surrogates of control-affine systems, plus the MPC
machinery to run and certify receding-horizon control on top of them."""

__version__ = "0.1.0"

from .dictionary import (
    Dictionary,
    Monomial,
    ReciprocalExp,
    StateProjection,
    custom_dictionary,
    monomial_dictionary,
)
from .container import load_estimate, save_estimate
from .dynamics import (
    Box,
    ControlAffineSystem,
    CstrParams,
    SampledDataMap,
    Trajectory,
    cstr_shifted,
    linear_system,
    polynomial_system,
    simulate,
    validate_system,
    van_der_pol,
    write_trajectory_csv,
)
from .edmd import (
    BilinearSurrogate,
    GeneratorEstimate,
    SampleSet,
    control_generator,
    fit,
    predict_open_loop,
    sample_states,
)
from .errbound import (
    build_test_points,
    c_tilde_constant,
    lipschitz_estimate,
    open_loop_error_study,
    operator_error,
    proportional_error_study,
    reference_compression,
)
from .manifest import Manifest, load_manifest
from .mpc import (
    GrowthBounds,
    MpcProblem,
    OcpSolution,
    SolverConfig,
    StageCost,
    admissible,
    closed_loop_run,
    estimate_growth_bounds,
    mpc_feedback,
    practical_stability_check,
    solve_ocp,
    suboptimality_index,
)
from .rkf45 import IntegratorConfig, integrate

__all__ = [
    "__version__",
    "BilinearSurrogate",
    "Box",
    "ControlAffineSystem",
    "CstrParams",
    "Dictionary",
    "GeneratorEstimate",
    "GrowthBounds",
    "IntegratorConfig",
    "Manifest",
    "Monomial",
    "MpcProblem",
    "OcpSolution",
    "ReciprocalExp",
    "SampleSet",
    "SampledDataMap",
    "SolverConfig",
    "StageCost",
    "StateProjection",
    "Trajectory",
    "admissible",
    "build_test_points",
    "c_tilde_constant",
    "closed_loop_run",
    "control_generator",
    "cstr_shifted",
    "custom_dictionary",
    "estimate_growth_bounds",
    "fit",
    "integrate",
    "linear_system",
    "lipschitz_estimate",
    "load_estimate",
    "load_manifest",
    "monomial_dictionary",
    "mpc_feedback",
    "open_loop_error_study",
    "operator_error",
    "polynomial_system",
    "practical_stability_check",
    "predict_open_loop",
    "proportional_error_study",
    "reference_compression",
    "sample_states",
    "save_estimate",
    "simulate",
    "solve_ocp",
    "suboptimality_index",
    "validate_system",
    "van_der_pol",
    "write_trajectory_csv",
]
