"""Distributed lossless source coding with generalized random binning.

Subpackages cover the finite-alphabet probability core, binning-channel
specifications, exponent computations, robustness bounds, a Monte Carlo
simulator, and a batch CLI.
"""

__version__ = "0.1.0"

from .probability import (
    Alphabet,
    ConditionalPmf,
    EmpiricalType,
    JointPmf,
    conditional_entropy,
    conditional_kl,
    doubly_symmetric_binary,
    empirical_type,
    entropy,
    entropy_bits,
    enumerate_types,
    kl_divergence,
    log_type_class_size,
    mutual_information,
    sign_magnitude_source,
    simplex_grid,
)
from .rbc import (
    DistortionSpec,
    RbcSpec,
    eval_F,
    expected_distortion,
    fixed_rate_bin_count,
    quantize_conditional,
    quantize_counts,
    sample_bin,
    validate_rbc,
)
from .optimize import ExponentResult, OptimizerBudget
from .exponents import (
    TradeoffPoint,
    error_exponent_general,
    error_exponent_star,
    error_exponent_vrsw,
    excess_length_exponent,
    excess_length_sweep,
    fixed_rate_exponent,
    result_to_jsonable,
    tradeoff_curve,
)
from .zeta import (
    AuxiliaryVars,
    RobustQuery,
    combined_error_exponent,
    combined_levels,
    e_hat_bound,
    e_hat_levels,
    e_tilde_bound,
    threshold_rate,
    zeta_dual,
    zeta_primal,
)
from .simulator import (
    DecoderStats,
    SimConfig,
    SimReport,
    build_code,
    empirical_cost,
    excess_length_event,
    generate_source,
    map_decode,
    robustness_eval,
    run_trials,
    universal_decode,
)
