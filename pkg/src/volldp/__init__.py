"""Volterra stochastic-volatility simulation and large-deviation rates.

The package simulates log-price models driven by Volterra Gaussian processes
under small-noise scaling, evaluates the associated variational rate
functionals (pathwise cost, terminal tails, barrier crossings), and verifies
the large-deviation decay by Monte Carlo with mean-shift importance sampling.
"""

from .kernels import (
    BrownianMotion,
    Conditioned,
    FractionalBM,
    FractionalOU,
    Grid,
    IntegratedBM,
    KernelError,
    KernelSpec,
    LiftedPath,
    ModulusReport,
    RiemannLiouville,
    ScaledFamilyTable,
    covariance,
    covariance_matrix,
    eval_kernel,
    kernel_from_dict,
    kernel_to_dict,
    kernel_values,
    lift,
    lift_matrix,
    modulus_estimate,
    scaled_family_check,
)
from .mc import (
    InsufficientHitsError,
    MCEstimate,
    SlopeReport,
    estimate_crossing,
    estimate_terminal_tail,
    ldp_slope,
)
from .model import (
    AffineFloor,
    AssumptionReport,
    Constant,
    Exponential,
    ModelError,
    ModelSpec,
    PowerGrowth,
    ScalarFunction,
    Sigmoid,
    SpeedSchedule,
    eval_fn,
    fn_from_dict,
    fn_to_dict,
    model_from_dict,
    model_to_dict,
    validate_assumptions,
)
from .rate import (
    ControlFunction,
    PathHypothesis,
    RateConfig,
    RateError,
    RateResult,
    conditional_rate,
    crossing_rate,
    energy,
    oracle_rate,
    pathwise_rate,
    psi,
    psi_m,
    rate_result_to_dict,
    terminal_rate,
)
from .simulate import (
    PathBundle,
    SimResult,
    SimulationError,
    TailEstimate,
    VolterraMatrix,
    approx_gap_tail,
    build_volterra_matrix,
    bundle_from_noise,
    frozen_sigma_nodes,
    iter_noise_blocks,
    sample_bundle,
    simulate_approx_log_price,
    simulate_log_price,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
