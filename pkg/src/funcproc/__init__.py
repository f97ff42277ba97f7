"""Gaussian functional engine for continuous-time quantum processes under continuous measurement."""

__version__ = "0.1.0"

from .born import (  # noqa: E402
    ProjectiveLimitLaw,
    ReadoutLaw,
    born_probability_density,
    compute_readout_law_direct,
    conditional_state,
    projective_limit_error,
    projective_limit_law,
    readout_covariance,
    sample_array,
    sample_records,
)
from .discrete import (  # noqa: E402
    DiscreteGaussianKernel,
    IntervalPartition,
    build_interleaved_process,
    build_interleaved_tester,
    discrete_born,
    discrete_causality_check,
    discrete_markov_residual,
    reconstruct_discrete,
)
from .errors import *  # noqa: E402,F401,F403
from .gaussian import (  # noqa: E402
    GaussianFunctional,
    integrate_out,
    marginalize,
    multiply,
    pin_equal,
    pin_value,
    positivity_sample_check,
)
from .grid import Layout, TimeGrid, VarLabel, bra, ket, make_grid, readout  # noqa: E402
from .measurement import (  # noqa: E402
    KrausSpec,
    PositionMeasurementSpec,
    ReadoutRecord,
    build_kraus_functional,
    build_position_measurement,
    check_kraus_normalization,
)
from .process import (  # noqa: E402
    CLModel,
    GaussianState,
    MemoryKernel,
    build_cl_process,
    build_markovian_process,
    coherent_state,
    exponential_kernel,
    ground_state,
    single_mode_bath_kernel,
)
from .properties import (  # noqa: E402
    CheckReport,
    check_causality,
    check_divisibility,
    check_normalization,
    check_trace_preserving,
)
from .saddle import compute_readout_law_saddle, compute_saddle_data, route_difference  # noqa: E402
