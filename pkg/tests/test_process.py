import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funcproc.errors import CompositionError, DomainError, InvariantError
from funcproc.gaussian import data_distance, hermitian_residual, positivity_sample_check
from funcproc.grid import BRA, KET, VarLabel, bra, ket, make_grid
from funcproc.process import (
    CLOSED,
    OPEN_BOUNDARY,
    OPEN_FUTURE,
    CLModel,
    GaussianState,
    MemoryKernel,
    build_cl_process,
    build_free_action,
    build_markovian_process,
    build_memory_action,
    coherent_state,
    exponential_kernel,
    ground_state,
    read_kernel_csv,
    single_mode_bath_kernel,
    write_kernel_csv,
    zero_kernel,
)


def ket_action(F, path):
    """S[x] read off the ket branch: log F(ket = x, bra = 0) = i S[x] + c."""
    values = {lab: 0.0 for lab in F.labels}
    for k, x in enumerate(path):
        values[ket(k)] = x
    return ((F.log_value(values) - F.c) / 1j).real


# ---- free action


def test_single_step_free_particle_blocks():
    g = make_grid(0.0, 0.5, 1)
    F = build_free_action(CLModel(1.0, 0.0), g)
    ket_block = np.array([[F.entry(ket(i), ket(j)) for j in range(2)] for i in range(2)])
    bra_block = np.array([[F.entry(bra(i), bra(j)) for j in range(2)] for i in range(2)])
    expected = -1j / g.dt * np.array([[1, -1], [-1, 1]])
    assert np.allclose(ket_block, expected)
    assert np.allclose(bra_block, -expected)
    assert np.all(F.b == 0)
    assert F.entry(ket(0), bra(0)) == 0


def test_potential_adds_trapezoid_diagonal():
    g = make_grid(0.0, 1.0, 4)
    free = build_free_action(CLModel(2.0, 0.0), g)
    osc = build_free_action(CLModel(2.0, 1.5), g)
    w = g.trapezoid_weights()
    for k in range(5):
        # i S contains -i m w^2 dt w_k x_k^2 / 2, i.e. K gains +i m w^2 dt w_k
        assert osc.entry(ket(k), ket(k)) - free.entry(ket(k), ket(k)) == pytest.approx(1j * 2.0 * 1.5**2 * g.dt * w[k])
        assert osc.entry(bra(k), bra(k)) - free.entry(bra(k), bra(k)) == pytest.approx(-1j * 2.0 * 1.5**2 * g.dt * w[k])


def test_sin_path_action_matches_closed_form(derived):
    ref = derived["sin_action"]
    g = make_grid(0.0, 1.0, 32)
    F = build_free_action(CLModel(ref["mass"], ref["omega"]), g)
    S = ket_action(F, np.sin(np.pi * g.nodes))
    assert abs(S - ref["value"]) <= 0.01 * abs(ref["value"])


def test_action_converges_at_first_order_or_better(derived):
    exact = derived["sin_action"]["value"]
    errs = []
    for n in (16, 32, 64, 128):
        g = make_grid(0.0, 1.0, n)
        errs.append(abs(ket_action(build_free_action(CLModel(1.0, 1.0), g), np.sin(np.pi * g.nodes)) - exact))
    orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    assert min(orders) >= 0.95


# ---- memory action


def test_zero_kernel_gives_constant_one():
    g = make_grid(0.0, 1.0, 3)
    F = build_memory_action(zero_kernel(g), g)
    assert np.all(F.K == 0) and np.all(F.b == 0) and F.c == 0


def test_memory_action_matches_direct_double_sum():
    g = make_grid(0.0, 1.0, 2)
    eta, gamma = 0.7, 1.3
    kernel = exponential_kernel(g, eta, gamma, np.ones((2, 2)))
    F = build_memory_action(kernel, g)
    w = g.trapezoid_weights() * g.dt
    rng = np.random.default_rng(1)
    x, xb = rng.normal(size=3), rng.normal(size=3)
    # i S_FV with S_FV = -1/2 sum_kl w_k w_l v_k^T A(t_k, t_l) v_l, v = (x, xbar)
    total = 0.0
    for k in range(3):
        for l in range(3):
            a = eta * math.exp(-gamma * abs(g.nodes[k] - g.nodes[l]))
            total += w[k] * w[l] * a * (x[k] + xb[k]) * (x[l] + xb[l])
    expected = 1j * (-0.5 * total)
    values = {ket(k): x[k] for k in range(3)} | {bra(k): xb[k] for k in range(3)}
    assert F.log_value(values) == pytest.approx(expected, rel=1e-13)
    # all-ones structure: every pair of the six variables couples
    assert np.count_nonzero(np.triu(F.K)) == 21


def test_asymmetric_kernel_rejected():
    g = make_grid(0.0, 1.0, 2)
    blocks = np.zeros((3, 3, 2, 2), dtype=complex)
    blocks[0, 1] = [[1, 2], [3, 4]]
    blocks[1, 0] = [[1, 2], [3, 4]]
    with pytest.raises(InvariantError):
        MemoryKernel(g, blocks)


def test_kernel_grid_mismatch():
    g = make_grid(0.0, 1.0, 4)
    model = CLModel(1.0, 1.0, exponential_kernel(make_grid(0.0, 1.0, 8), 0.1, 1.0))
    with pytest.raises(CompositionError):
        build_cl_process(model, g, ground_state(), CLOSED)


def test_bath_kernel_structure():
    g = make_grid(0.0, 1.0, 4)
    k = single_mode_bath_kernel(g, 0.5, 2.0)
    # the influence exponent depends on x - xbar at the later time: full branch sums vanish
    assert np.allclose(k.blocks.sum(axis=(2, 3)), 0.0)
    assert np.allclose(k.blocks[2, 0].sum(axis=0), 0.0)
    with pytest.raises(DomainError):
        single_mode_bath_kernel(g, 0.5, -1.0)


def test_kernel_csv_roundtrip(tmp_path):
    g = make_grid(0.0, 1.0, 3)
    k = single_mode_bath_kernel(g, 0.3, 1.5)
    path = tmp_path / "kernel.csv"
    write_kernel_csv(k, path)
    header = path.read_text().splitlines()[0]
    assert header == "t_index,s_index,a11_re,a11_im,a12_re,a12_im,a21_re,a21_im,a22_re,a22_im"
    back = read_kernel_csv(path, g)
    assert np.array_equal(back.blocks, k.blocks)


# ---- states


def test_ground_state_moments():
    m = ground_state(2.0, 1.5).moments()
    assert m["x"] == 0 and m["p"] == 0
    assert m["x2"] == pytest.approx(1 / (2 * 2.0 * 1.5))
    assert m["p2"] == pytest.approx(2.0 * 1.5 / 2)
    assert m["xp_sym"] == pytest.approx(0.0)


def test_coherent_state_moments():
    m = coherent_state(1.0, 2.0, 0.3, -0.8).moments()
    assert m["x"] == pytest.approx(0.3)
    assert m["p"] == pytest.approx(-0.8)
    assert m["x2"] - m["x"] ** 2 == pytest.approx(0.25)
    assert m["p2"] - m["p"] ** 2 == pytest.approx(1.0)


def test_state_invariants():
    with pytest.raises(InvariantError):
        GaussianState(np.array([[1, 0.5j], [0.5j, 1]]), np.zeros(2))
    with pytest.raises(InvariantError):
        GaussianState(-np.eye(2), np.zeros(2))


def test_state_functional_is_normalized():
    from funcproc.gaussian import marginalize, pin_equal

    st_ = coherent_state(1.0, 1.0, 0.7, 0.2)
    F = st_.functional()
    tr = marginalize(pin_equal(F, ket(0), bra(0)), [ket(0)])
    assert abs(np.exp(tr.c) - 1) <= 1e-14


# ---- processes


@pytest.mark.parametrize("boundary", [CLOSED, OPEN_FUTURE, OPEN_BOUNDARY])
def test_built_processes_are_hermitian(boundary, grid16, memory_model16):
    for model in (CLModel(1.0, 1.0), memory_model16, CLModel(1.0, 1.0, single_mode_bath_kernel(grid16, 0.3, 1.5))):
        W = build_cl_process(model, grid16, coherent_state(1.0, 1.0, 0.5, 0.1), boundary)
        assert hermitian_residual(W) <= 1e-12
        assert W.meta["boundary"] == boundary


def test_open_boundary_unitary_is_free_propagator(grid16):
    W = build_cl_process(CLModel(1.0, 1.0), grid16, None, OPEN_BOUNDARY)
    free = build_free_action(CLModel(1.0, 1.0), grid16)
    assert np.allclose(W.K, free.K)
    assert np.allclose(W.b, 0)


def test_cl_process_positivity_n8():
    g = make_grid(0.0, 1.0, 8)
    W = build_cl_process(CLModel(1.0, 1.0, exponential_kernel(g, 0.1, 1.0)), g, ground_state(), CLOSED)
    kets = [lab for lab in W.labels if lab.branch == KET]
    assert positivity_sample_check(W, kets, [VarLabel(BRA, k.node, k.kind) for k in kets], 64, 0).passed


# ---- Markovian products


def test_single_segment_is_zero_kernel_process():
    g = make_grid(0.0, 1.0, 4)
    W = build_markovian_process([(CLModel(1.0, 1.0), g)])
    ref = build_cl_process(CLModel(1.0, 1.0), g, None, OPEN_BOUNDARY)
    assert data_distance(W, ref, include_constant=False) <= 1e-14


def test_segments_do_not_couple_across_cut():
    g = make_grid(0.0, 1.0, 6)
    W = build_markovian_process([(CLModel(1.0, 1.0), (0, 3)), (CLModel(1.0, 2.0), (3, 6))], g)
    past = [W.index(lab) for lab in W.labels if 0 < lab.node < 3]
    future = [W.index(lab) for lab in W.labels if 3 < lab.node < 6]
    assert np.all(W.K[np.ix_(past, future)] == 0)


def test_markovian_rejects_bad_segments():
    g = make_grid(0.0, 1.0, 4)
    with pytest.raises((DomainError, CompositionError)):
        build_markovian_process([(CLModel(1.0, 1.0), (0, 2)), (CLModel(1.0, 1.0), (3, 4))], g)
    with pytest.raises((DomainError, CompositionError)):
        build_markovian_process([(CLModel(1.0, 1.0), make_grid(0, 1, 2)), (CLModel(1.0, 1.0), make_grid(2, 3, 2))])
    with pytest.raises(InvariantError):
        build_markovian_process([(CLModel(1.0, 1.0, exponential_kernel(g, 0.1, 1.0)), g)])


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 5.0), st.floats(0.0, 3.0), st.floats(0.0, 2.0), st.floats(0.0, 5.0), st.integers(2, 10))
def test_processes_hermitian_for_any_parameters(mass, omega, eta, gamma, n):
    g = make_grid(0.0, 1.0, n)
    W = build_cl_process(CLModel(mass, omega, exponential_kernel(g, eta, gamma)), g, ground_state(mass, max(omega, 0.5)), CLOSED)
    assert hermitian_residual(W) <= 1e-10
