import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funcproc.born import compute_readout_law_direct
from funcproc.errors import DomainError
from funcproc.grid import make_grid
from funcproc.measurement import PositionMeasurementSpec, build_position_measurement
from funcproc.process import CLOSED, CLModel, build_cl_process, coherent_state, exponential_kernel, ground_state, zero_kernel
from funcproc.saddle import assemble_operator, compute_readout_law_saddle, compute_saddle_data, route_difference

from .conftest import complex_array
from .test_born import LAW_KEYS, oracle_setup


def both_routes(model, state, spec, **kw):
    direct = compute_readout_law_direct(build_cl_process(model, spec.grid, state, CLOSED), build_position_measurement(spec))
    saddle, data = compute_readout_law_saddle(model, state, spec, **kw)
    return direct, saddle, data


@pytest.mark.parametrize("key", LAW_KEYS)
def test_saddle_route_matches_dense_oracle(derived, key):
    ref = derived[key]
    _, model, state, spec = oracle_setup(ref["params"])
    law, _ = compute_readout_law_saddle(model, state, spec)
    R = complex_array(ref, "R").real
    b = complex_array(ref, "b").real
    assert np.abs(law.R - R).max() <= 1e-9 * np.abs(R).max()
    assert np.abs(law.b - b).max() <= 1e-9 * max(1.0, np.abs(b).max())
    assert law.logZ == pytest.approx(ref["logZ_from_R_b"], rel=1e-10)


def test_two_routes_agree_on_memory_model(grid16, memory_model16):
    direct, saddle, _ = both_routes(memory_model16, coherent_state(1, 1, 0.8, -0.2), PositionMeasurementSpec(1.0, grid16))
    diff = route_difference(direct, saddle)
    assert diff["R_rel"] <= 1e-10
    assert diff["b_rel"] <= 1e-10
    assert diff["logZ_abs"] <= 1e-9


@settings(max_examples=10, deadline=None)
@given(
    n=st.integers(2, 12),
    tau=st.floats(0.05, 10.0),
    eta=st.floats(0.0, 0.4),
    gamma=st.floats(0.1, 3.0),
    x0=st.floats(-1.5, 1.5),
    p0=st.floats(-1.5, 1.5),
)
def test_two_routes_agree_randomly(n, tau, eta, gamma, x0, p0):
    grid = make_grid(0.0, 1.2, n)
    model = CLModel(1.0, 1.0, exponential_kernel(grid, eta, gamma))
    direct, saddle, _ = both_routes(model, coherent_state(1, 1, x0, p0), PositionMeasurementSpec(tau, grid))
    diff = route_difference(direct, saddle)
    assert diff["R_rel"] <= 1e-8
    assert diff["b_rel"] <= 1e-8


def test_one_sided_derivatives_have_shrinking_defect():
    defects = []
    for n in (8, 16, 32):
        grid = make_grid(0.0, 2.0, n)
        model = CLModel(1.0, 1.0, exponential_kernel(grid, 0.1, 1.0))
        direct, saddle, _ = both_routes(model, ground_state(), PositionMeasurementSpec(1.0, grid), boundary_derivative="one-sided")
        defects.append(route_difference(direct, saddle)["R_rel"])
        assert saddle.diagnostics["boundary_derivative"] == "one-sided"
    assert defects[0] > defects[1] > defects[2]
    assert defects[0] > 1e-6


def test_free_fundamental_solutions_are_linear():
    grid = make_grid(0.0, 1.0, 8)
    model = CLModel(1.0, 0.0, zero_kernel(grid))
    data = compute_saddle_data(model, grid, math.inf)
    s = grid.nodes / grid.t_f
    assert np.allclose(data.D_f[:, 0], s, atol=1e-12)
    assert np.allclose(data.D_f[:, 1], 0.0, atol=1e-12)
    assert np.allclose(data.D_f_bar[:, 1], s, atol=1e-12)
    assert np.allclose(data.D_i[:, 0], s - 1.0, atol=1e-12)
    assert np.all(data.G == 0)
    assert np.all(data.F_f == 0)


def test_oscillator_fundamental_solution_follows_sine():
    grid = make_grid(0.0, 1.0, 400)
    model = CLModel(1.0, 1.0, zero_kernel(grid))
    data = compute_saddle_data(model, grid, math.inf)
    assert np.allclose(data.D_f[:, 0], np.sin(grid.nodes) / np.sin(1.0), atol=1e-5)


def test_green_function_boundary_and_omega_symmetry(grid16, memory_model16):
    data = compute_saddle_data(memory_model16, grid16, 0.7, ground_state())
    assert np.all(data.G[0] == 0) and np.all(data.G[-1] == 0)
    assert data.defects["omega_asymmetry"] < 1e-10
    O = data.Omega_check
    assert np.abs(O - O.T).max() < 1e-10


def test_operator_is_symmetric(grid16, memory_model16):
    A = assemble_operator(memory_model16, grid16, 1.0)
    assert A.shape == (34, 34)
    assert np.abs(A - A.T).max() < 1e-14


def test_gh_factorization_diagnostics(grid16, memory_model16):
    _, saddle, _ = both_routes(memory_model16, ground_state(), PositionMeasurementSpec(1.0, grid16))
    gh = saddle.gh_data
    assert gh["g"].shape == (17,) and gh["h"].shape == (17,)
    assert 1 <= gh["numerical_rank"] <= 3
    assert 0.0 <= gh["rank_one_residual"] < 1.0


def test_saddle_argument_errors(grid16, memory_model16):
    with pytest.raises(DomainError):
        compute_saddle_data(memory_model16, grid16, 0.0)
    with pytest.raises(DomainError):
        compute_saddle_data(memory_model16, grid16, 1.0, boundary_derivative="central")
    with pytest.raises(DomainError):
        compute_readout_law_saddle(memory_model16, ground_state(), PositionMeasurementSpec(1.0, grid16), make_grid(0, 1, 16))
