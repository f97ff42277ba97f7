import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funcproc.born import (
    ReadoutLaw,
    born_probability_density,
    compute_readout_law_direct,
    conditional_state,
    gaussian_log_mass,
    law_from_moments,
    law_normalization_residual,
    projective_limit_error,
    projective_limit_law,
    readout_covariance,
    readout_exponent_direct,
    sample_array,
    sample_records,
)
from funcproc.errors import CompositionError, DomainError, PreconditionError, ValidityError
from funcproc.gaussian import marginalize, pin_value
from funcproc.grid import make_grid, readout
from funcproc.measurement import PositionMeasurementSpec, ReadoutRecord, build_position_measurement
from funcproc.process import (
    CLOSED,
    OPEN_BOUNDARY,
    OPEN_FUTURE,
    CLModel,
    build_cl_process,
    coherent_state,
    exponential_kernel,
    ground_state,
    single_mode_bath_kernel,
    zero_kernel,
)

from .conftest import complex_array


def oracle_setup(params):
    grid = make_grid(0.0, params["T"], params["N"])
    kind = params["kernel"][0]
    if kind == "dephasing":
        kernel = exponential_kernel(grid, params["kernel"][1], params["kernel"][2])
    elif kind == "bath-mode":
        kernel = single_mode_bath_kernel(grid, params["kernel"][1], params["kernel"][2], params["mass"])
    else:
        kernel = zero_kernel(grid)
    model = CLModel(params["mass"], params["omega"], kernel)
    x0, p0 = params["state"]
    state = coherent_state(params["mass"], params["omega"], x0, p0)
    return grid, model, state, PositionMeasurementSpec(params["tau"], grid)


LAW_KEYS = ["law_dephasing_ground_n4", "law_bath_coherent_n4", "law_free_heavy_n4"]


@pytest.mark.parametrize("key", LAW_KEYS)
def test_direct_route_matches_dense_oracle(derived, key):
    ref = derived[key]
    grid, model, state, spec = oracle_setup(ref["params"])
    E = readout_exponent_direct(build_cl_process(model, grid, state, CLOSED), build_position_measurement(spec))
    R = complex_array(ref, "R")
    b = complex_array(ref, "b")
    scale = np.abs(R).max()
    assert np.abs(E.K - R).max() <= 1e-12 * scale
    assert np.abs(E.b - b).max() <= 1e-12 * max(1.0, np.abs(b).max())
    # exp(c) times the Gaussian mass is the total probability: one
    assert E.c.real + ref["logZ_from_R_b"] == pytest.approx(0.0, abs=1e-11)


@pytest.mark.parametrize("key", LAW_KEYS)
def test_law_matches_oracle_log_mass(derived, key):
    ref = derived[key]
    grid, model, state, spec = oracle_setup(ref["params"])
    law = compute_readout_law_direct(build_cl_process(model, grid, state, CLOSED), build_position_measurement(spec))
    assert law.logZ == pytest.approx(ref["logZ_from_R_b"], rel=1e-12)
    assert law.nodes == tuple(range(ref["params"]["N"] + 1))
    assert law_normalization_residual(law) < 1e-12
    assert law.diagnostics["raw_mass_residual"] < 1e-10


def test_pointwise_density_equals_numeric_born_value(derived):
    grid, model, state, spec = oracle_setup(derived["law_bath_coherent_n4"]["params"])
    W = build_cl_process(model, grid, state, CLOSED)
    law = compute_readout_law_direct(W, build_position_measurement(spec))
    r = np.array([0.4, -0.2, 1.0, 0.3, -0.8])
    born = born_probability_density(W, build_position_measurement(spec, ReadoutRecord(grid, r)))
    assert abs(born.imag) < 1e-12 * abs(born)
    assert born.real == pytest.approx(np.exp(law.log_density(r)), rel=1e-11)


def test_free_unitary_law_has_classical_mean():
    grid = make_grid(0.0, 1.0, 8)
    model = CLModel(1.0, 1.0, zero_kernel(grid))
    state = coherent_state(1.0, 1.0, 1.0, 0.0)
    law = compute_readout_law_direct(build_cl_process(model, grid, state, CLOSED), build_position_measurement(PositionMeasurementSpec(1e3, grid)))
    # a very weak measurement leaves the mean on the classical orbit x0 cos t
    assert np.allclose(law.mean(), np.cos(grid.nodes), atol=5e-3)


def test_covariance_is_inverse_precision(grid16, memory_model16):
    law = compute_readout_law_direct(
        build_cl_process(memory_model16, grid16, ground_state(), CLOSED),
        build_position_measurement(PositionMeasurementSpec(1.0, grid16)),
    )
    cov, mean = readout_covariance(law)
    assert np.allclose(cov @ law.R, np.eye(law.size), atol=1e-10)
    assert np.allclose(law.R @ mean, law.b, atol=1e-12)


def test_marginal_law(grid16, memory_model16):
    law = compute_readout_law_direct(
        build_cl_process(memory_model16, grid16, coherent_state(1, 1, 0.3, 0.1), CLOSED),
        build_position_measurement(PositionMeasurementSpec(0.5, grid16)),
    )
    sub = law.marginal([2, 5, 9])
    F = law.functional()
    G = marginalize(F, [readout(k) for k in law.nodes if k not in (2, 5, 9)])
    r = np.array([0.1, -0.4, 0.6])
    for k, v in zip((2, 5, 9), r):
        G = pin_value(G, readout(k), v)
    assert sub.log_density(r) == pytest.approx(G.c.real, abs=1e-10)


def test_sampler_is_reproducible_and_unbiased(grid16, memory_model16):
    law = compute_readout_law_direct(
        build_cl_process(memory_model16, grid16, coherent_state(1, 1, 1.0, 0.0), CLOSED),
        build_position_measurement(PositionMeasurementSpec(1.0, grid16)),
    )
    a = sample_array(law, 50_000, seed=4)
    assert np.array_equal(a, sample_array(law, 50_000, seed=4))
    cov = law.covariance()
    se = np.sqrt(np.diag(cov) / a.shape[0])
    assert np.all(np.abs(a.mean(axis=0) - law.mean()) < 5 * se)
    emp = np.cov(a, rowvar=False)
    assert np.abs(emp - cov).max() / np.sqrt(np.outer(np.diag(cov), np.diag(cov))).max() < 0.05
    recs = sample_records(law, 3, seed=1)
    assert len(recs) == 3 and all(isinstance(r, ReadoutRecord) for r in recs)
    assert sample_records(law, 0, seed=1) == []
    with pytest.raises(DomainError):
        sample_array(law, -1)


def test_conditional_trace_equals_born(grid16, memory_model16):
    state = coherent_state(1, 1, 0.5, -0.3)
    spec = PositionMeasurementSpec(1.0, grid16)
    Wf = build_cl_process(memory_model16, grid16, state, OPEN_FUTURE)
    Wc = build_cl_process(memory_model16, grid16, state, CLOSED)
    law = compute_readout_law_direct(Wc, build_position_measurement(spec))
    for rec in sample_records(law, 5, seed=8):
        M = build_position_measurement(spec, rec)
        st_, tr = conditional_state(Wf, M)
        born = born_probability_density(Wc, M).real
        assert abs(tr - born) <= 1e-9 * abs(born)
        mom = st_.moments()
        assert mom["x2"] - mom["x"] ** 2 > 0
        # Robertson bound for the normalized conditional state
        var_x = mom["x2"] - mom["x"] ** 2
        var_p = mom["p2"] - mom["p"] ** 2
        assert var_x * var_p >= 0.25 - 1e-9


def test_conditional_needs_open_future_and_numeric_record(grid16, memory_model16):
    spec = PositionMeasurementSpec(1.0, grid16)
    Wc = build_cl_process(memory_model16, grid16, ground_state(), CLOSED)
    rec = ReadoutRecord(grid16, np.zeros(17))
    with pytest.raises(PreconditionError):
        conditional_state(Wc, build_position_measurement(spec, rec))
    Wf = build_cl_process(memory_model16, grid16, ground_state(), OPEN_FUTURE)
    with pytest.raises(PreconditionError):
        conditional_state(Wf, build_position_measurement(spec))
    with pytest.raises(PreconditionError):
        born_probability_density(Wc, build_position_measurement(spec))
    with pytest.raises(PreconditionError):
        compute_readout_law_direct(build_cl_process(memory_model16, grid16, None, OPEN_BOUNDARY), build_position_measurement(spec))


def test_projective_limit_error_decreases():
    grid = make_grid(0.0, 4.0, 4)
    model = CLModel(1.0, 1.0, exponential_kernel(grid, 0.1, 1.0))
    errs = [projective_limit_error(model, ground_state(), grid, t) for t in (1e-1, 1e-2, 1e-3)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] <= 0.05


def test_projective_limit_law_is_phase_for_unitary():
    grid = make_grid(0.0, 1.0, 6)
    model = CLModel(1.0, 1.0, zero_kernel(grid))
    lim = projective_limit_law(model, ground_state(), grid)
    assert np.abs(lim.phase_kernel).max() == 0.0
    assert lim.phase(np.ones(7)) == pytest.approx(1.0)
    # the initial-node weight is the ground-state position density
    assert lim.weight_xi == pytest.approx(2.0)


def test_projective_limit_phase_unit_modulus(grid16, memory_model16):
    lim = projective_limit_law(memory_model16, ground_state(), grid16)
    r = np.random.default_rng(0).standard_normal(17)
    assert abs(abs(lim.phase(r)) - 1.0) < 1e-12


def test_law_validation():
    grid = make_grid(0, 1, 1)
    with pytest.raises(ValidityError):
        ReadoutLaw(grid, (0, 1), np.array([[1.0, 0.0], [0.0, -1.0]]), np.zeros(2), 0.0)
    with pytest.raises(ValidityError):
        ReadoutLaw(grid, (0, 1), np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros(2), 0.0)
    with pytest.raises(ValidityError):
        ReadoutLaw(grid, (0,), np.eye(2), np.zeros(2), 0.0)
    law = law_from_moments(grid, (0, 1), np.zeros(2), np.eye(2))
    with pytest.raises(CompositionError):
        law.log_density(np.zeros(3))


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 5),
    seed=st.integers(0, 10_000),
)
def test_gaussian_log_mass_matches_dense_formula(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    R = A @ A.T + n * np.eye(n)
    b = rng.standard_normal(n)
    expected = 0.5 * b @ np.linalg.solve(R, b) + 0.5 * n * np.log(2 * np.pi) - 0.5 * np.linalg.slogdet(R)[1]
    assert gaussian_log_mass(R, b) == pytest.approx(expected, rel=1e-12, abs=1e-12)


@settings(max_examples=10, deadline=None)
@given(
    tau=st.floats(0.05, 20.0),
    x0=st.floats(-2, 2),
    p0=st.floats(-2, 2),
    eta=st.floats(0.0, 0.5),
)
def test_law_is_normalized_for_random_models(tau, x0, p0, eta):
    grid = make_grid(0.0, 1.0, 6)
    model = CLModel(1.0, 1.0, exponential_kernel(grid, eta, 1.0))
    law = compute_readout_law_direct(
        build_cl_process(model, grid, coherent_state(1, 1, x0, p0), CLOSED),
        build_position_measurement(PositionMeasurementSpec(tau, grid)),
    )
    assert law_normalization_residual(law) < 1e-10
    assert law.diagnostics["raw_mass_residual"] < 1e-9
