"""seqdyn: transfer-operator and Monte Carlo laboratory for sequential expanding maps."""

__version__ = "0.1.0"

from .maps import (
    Branch,
    IntervalMap,
    MapError,
    Observable,
    ParameterSchedule,
    SequentialSystem,
    TargetSequence,
    beta_map,
    beta_system,
    branch_inverses,
    doubling,
    doubling_system,
    eval_map,
    golden_beta,
    grid_observable,
    indicator_observable,
    linear_noise,
    map_from_descriptor,
    observable_from_descriptor,
    piecewise_c2,
    sawtooth_observable,
    schedule_param,
    sequential_orbit,
    stationary_system,
    system_from_descriptor,
    trig_observable,
)
from .transfer import (
    ChainState,
    HypothesisReport,
    NonConvergence,
    StepFunction,
    UlamMatrix,
    build_ulam,
    bv_norm,
    compose_chain,
    decay_rate,
    default_dictionary,
    invariant_density,
    operator_distance,
    push_density,
    ulam_from_matrix,
    verify_dfly,
    verify_lb,
    verify_lip,
)
from .martingale import (
    CMDiagnostics,
    Decomposition,
    DenominatorTooSmall,
    NonConvergentTail,
    SequentialFrame,
    StationaryFrame,
    build_decomposition,
    check_reverse_martingale,
    cm_diagnostics,
    conditional_variance_function,
    expect_at,
    q_apply,
    u_along_orbit,
)
from .stats import (
    CltReport,
    DegenerateVariance,
    EnsembleResult,
    LilReport,
    ShrinkingTargetResult,
    VarianceCurve,
    clt_null_calibration,
    clt_test,
    default_checkpoints,
    ensemble_birkhoff,
    green_kubo_variance,
    injected_normal_ensemble,
    ks_normal,
    lil_profile,
    sequential_centering,
    shrinking_target,
    variance_curve,
)
from .cache import MatrixCache, cache_gc, canonical_json
