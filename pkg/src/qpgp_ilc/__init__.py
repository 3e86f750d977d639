"""Predictive iterative learning control with a quasi-periodic GP error model."""

from .errors import (
    ConfigError,
    InsufficientDataError,
    NumericalError,
    ParameterError,
    QpgpIlcError,
    ShapeError,
)
from .kernels import (
    CovKernel,
    KernelFamily,
    build_cov_matrix,
    eval_periodic,
    eval_rbf,
    frobenius_fit,
    psd_truncate,
    toeplitz_project,
)
from .qpgp import (
    ErrorHistory,
    QpgpModel,
    block_predict,
    brute_force_conditional_mean,
    element_predict,
    element_predict_remainder,
    estimate_stage1,
    estimate_stage2,
    predictor_matrix,
    sample_trajectory,
    update_estimates,
)
from .gp_baseline import (
    FullGp,
    GpDataset,
    SparseGpModel,
    fit_full_gp,
    fit_sparse_gp,
    predict_full_gp,
    predict_sparse_gp,
)
from .ilc_core import (
    ContractionReport,
    ControllerSpec,
    ExperimentRecord,
    GainSchedule,
    anneal,
    contraction_block,
    contraction_element,
    finite_difference_jacobian,
    predictive_update,
    run_ilc_loop,
    standard_update,
)
from .sim_envs import (
    DisturbanceSpec,
    LinearPlant,
    ManipConfig,
    ManipulatorPlant,
    PlantRollout,
    ReferencePath,
    VehicleConfig,
    VehiclePlant,
    gen_circle_ref,
    gen_lissajous_ref,
    gen_raceline,
    lateral_error,
    manip_fk,
    manip_ik,
    manip_jacobian,
    pure_pursuit,
)
from .bench import ExperimentConfig, run, summarize, summarize_directory

__version__ = "0.1.0"
