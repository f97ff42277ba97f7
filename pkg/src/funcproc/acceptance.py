"""Acceptance suite: one pass/fail line per criterion.

Run with ``python -m funcproc.acceptance``.  Each criterion function returns a
``Criterion`` carrying the measured quantities, so the test-suite can assert on
the same numbers that are printed.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .born import (
    born_probability_density,
    compute_readout_law_direct,
    conditional_state,
    law_normalization_residual,
    projective_limit_error,
    readout_covariance,
    sample_array,
    sample_records,
)
from .discrete import (
    PROCESS,
    TESTER,
    IntervalPartition,
    build_interleaved_process,
    build_interleaved_tester,
    constancy_residual,
    discrete_born,
    discrete_causality_check,
    discrete_markov_residual,
    reconstruct_discrete,
    truncated_process_kernels,
)
from .gaussian import GaussianFunctional, from_terms, multiply, positivity_sample_check
from .grid import BRA, KET, VarLabel, ket, make_grid
from .measurement import (
    PositionMeasurementSpec,
    ReadoutRecord,
    build_position_measurement,
    check_kraus_normalization,
)
from .process import (
    CLOSED,
    OPEN_BOUNDARY,
    OPEN_FUTURE,
    CLModel,
    build_cl_process,
    build_markovian_process,
    coherent_state,
    exponential_kernel,
    ground_state,
    single_mode_bath_kernel,
)
from .properties import check_causality, check_divisibility, check_normalization, check_trace_preserving
from .saddle import compute_readout_law_saddle, route_difference


@dataclass
class Criterion:
    number: int
    title: str
    passed: bool
    summary: str
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:2d}. {self.title}: {self.summary}"


def reference_grid(n_steps: int = 32):
    return make_grid(0.0, 2.0, n_steps)


def reference_model(grid) -> CLModel:
    return CLModel(1.0, 1.0, exponential_kernel(grid, 0.1, 1.0))


def two_route_equality() -> Criterion:
    grid = reference_grid(32)
    model = reference_model(grid)
    state = ground_state()
    spec = PositionMeasurementSpec(1.0, grid)
    start = time.perf_counter()
    direct = compute_readout_law_direct(build_cl_process(model, grid, state, CLOSED), build_position_measurement(spec))
    saddle, _ = compute_readout_law_saddle(model, state, spec)
    elapsed = time.perf_counter() - start
    d = route_difference(direct, saddle)
    ok = d["R_rel"] <= 1e-6 and d["b_rel"] <= 1e-6 and d["logZ_abs"] <= 1e-6 and elapsed <= 10.0
    return Criterion(
        1, "two-route readout law", ok,
        f"R_rel={d['R_rel']:.2e} b_rel={d['b_rel']:.2e} dlogZ={d['logZ_abs']:.2e} time={elapsed:.2f}s",
        {**d, "seconds": elapsed},
    )


def _process_zoo(grid):
    """(name, model, state) triples covering unitary, memory and bath processes."""
    return [
        ("unitary", CLModel(1.0, 1.0), ground_state()),
        ("exponential", reference_model(grid), ground_state()),
        ("bath", CLModel(1.0, 1.0, single_mode_bath_kernel(grid, 0.3, 1.5)), coherent_state(1.0, 1.0, 1.0, 0.5)),
    ]


def normalization() -> Criterion:
    grid = reference_grid(16)
    spec = PositionMeasurementSpec(1.0, grid)
    law_res, proc_res = {}, {}
    for name, model, state in _process_zoo(grid):
        W = build_cl_process(model, grid, state, CLOSED)
        proc_res[name] = check_normalization(W).residual
        proc_res[name + "+measurement"] = check_normalization(W, build_position_measurement(spec)).residual
        direct = compute_readout_law_direct(W, build_position_measurement(spec))
        saddle, _ = compute_readout_law_saddle(model, state, spec)
        law_res[name + "/direct"] = law_normalization_residual(direct)
        law_res[name + "/saddle"] = law_normalization_residual(saddle)
        law_res[name + "/marginal"] = law_normalization_residual(direct.marginal([0, 5, 9]))
    worst_law, worst_proc = max(law_res.values()), max(proc_res.values())
    ok = worst_law <= 1e-8 and worst_proc <= 1e-8
    return Criterion(2, "normalization", ok, f"laws<={worst_law:.2e} processes<={worst_proc:.2e}", {"laws": law_res, "processes": proc_res})


def causality() -> Criterion:
    grid = reference_grid(16)
    res = {}
    for name, model, state in _process_zoo(grid)[:2]:
        W = build_cl_process(model, grid, state, CLOSED)
        res[name] = max(check_causality(W, k).residual for k in range(1, grid.n_steps))
    worst = max(res.values())
    return Criterion(3, "causality at every interior node", worst <= 1e-8, f"max residual={worst:.2e}", res)


def damped_mutant(W_open: GaussianFunctional, strength: float = 0.01) -> GaussianFunctional:
    """Adds exp(-strength x_k^2 / 2) on the ket branch only: not trace preserving."""
    nodes = sorted({lab.node for lab in W_open.labels})
    return multiply(W_open, from_terms([ket(k) for k in nodes], {(ket(k), ket(k)): strength for k in nodes}))


def trace_preservation() -> Criterion:
    grid = reference_grid(16)
    res = {}
    for name, model, _ in _process_zoo(grid)[:2]:
        res[name] = check_trace_preserving(build_cl_process(model, grid, None, OPEN_BOUNDARY)).residual
    mutant = check_trace_preserving(damped_mutant(build_cl_process(reference_model(grid), grid, None, OPEN_BOUNDARY)))
    worst = max(res.values())
    ok = worst <= 1e-9 and not mutant.passed
    return Criterion(4, "trace preservation", ok, f"max residual={worst:.2e}, mutant residual={mutant.residual:.2e} (must fail)", {**res, "mutant": mutant.residual})


def divisibility() -> Criterion:
    grid = make_grid(0.0, 1.0, 4)
    idle = CLModel(1.0, 1.0)
    markov = build_markovian_process([(idle, (0, 2)), (idle, (2, 4))], grid)
    markov_res = check_divisibility(markov, 2).residual
    gammas = (1.0, 4.0, 16.0)
    mem = []
    for gamma in gammas:
        model = CLModel(1.0, 1.0, exponential_kernel(grid, gamma * 1.0, gamma))
        mem.append(check_divisibility(build_cl_process(model, grid, None, OPEN_BOUNDARY), 2).residual)
    non_increasing = all(b <= a for a, b in zip(mem, mem[1:]))
    ok = markov_res == 0.0 and mem[0] > 1e-3 and non_increasing
    return Criterion(
        5, "divisibility discrimination", ok,
        f"markov={markov_res:.1e} memory(gamma=1,4,16)=" + ",".join(f"{r:.2e}" for r in mem),
        {"markov": markov_res, "memory": dict(zip(gammas, mem))},
    )


def projective_limit() -> Criterion:
    grid = make_grid(0.0, 4.0, 4)
    model = CLModel(1.0, 1.0, exponential_kernel(grid, 0.1, 1.0))
    taus = (1e-1, 1e-2, 1e-3)
    errs = [projective_limit_error(model, ground_state(), grid, t) for t in taus]
    ok = all(b < a for a, b in zip(errs, errs[1:])) and errs[-1] <= 0.05
    return Criterion(6, "projective limit", ok, "errors=" + ",".join(f"{e:.3g}" for e in errs), dict(zip(taus, errs)))


def conditional_contract(n_records: int = 20, seed: int = 11) -> Criterion:
    grid = reference_grid(16)
    model = reference_model(grid)
    state = coherent_state(1.0, 1.0, 0.5, -0.3)
    spec = PositionMeasurementSpec(1.0, grid)
    Wf = build_cl_process(model, grid, state, OPEN_FUTURE)
    Wc = build_cl_process(model, grid, state, CLOSED)
    law = compute_readout_law_direct(Wc, build_position_measurement(spec))
    worst = 0.0
    for rec in sample_records(law, n_records, seed):
        M = build_position_measurement(spec, rec)
        _, tr = conditional_state(Wf, M)
        born = born_probability_density(Wc, M).real
        worst = max(worst, abs(tr - born) / abs(born))
    return Criterion(7, "conditional-state trace equals Born value", worst <= 1e-9, f"max rel={worst:.2e} over {n_records} records", {"max_rel": worst})


def discrete_recovery() -> Criterion:
    grid = reference_grid(16)
    model = reference_model(grid)
    state = ground_state()
    part = IntervalPartition(grid, (0, 3, 8, 11, 16))
    spec = PositionMeasurementSpec(1.0, grid)
    record = ReadoutRecord(grid, np.random.default_rng(5).standard_normal(grid.n_steps + 1))
    W = build_interleaved_process(model, state, part, CLOSED)
    M = build_interleaved_tester(model, spec, part, record)
    cres = max(
        max(constancy_residual(W, part, PROCESS).values(), default=0.0),
        max(constancy_residual(M, part, TESTER).values(), default=0.0),
    )
    Wd = reconstruct_discrete(W, part, PROCESS)
    Md = reconstruct_discrete(M, part, TESTER)
    disc = discrete_born(Wd, Md)
    cont = born_probability_density(W, M).real
    rel = abs(disc - cont) / abs(cont)
    causal = discrete_causality_check(Wd, truncated_process_kernels(model, state, part))
    idle = CLModel(1.0, 1.0)
    Wm = build_markovian_process([(None, (0, 3)), (idle, (3, 8)), (None, (8, 11)), (idle, (11, 16))], grid)
    markov = discrete_markov_residual(reconstruct_discrete(Wm.with_meta(boundary=CLOSED), part, PROCESS))
    ok = cres <= 1e-10 and rel <= 1e-6 and causal.residual <= 1e-7 and markov == 0.0
    return Criterion(
        8, "discrete recovery", ok,
        f"constancy={cres:.1e} born_rel={rel:.2e} causality={causal.residual:.2e} markov={markov:.1e}",
        {"constancy": cres, "born_rel": rel, "causality": causal.residual, "markov": markov},
    )


def kraus_normalization() -> Criterion:
    grid = make_grid(0.0, 1.0, 4)
    res = {tau: check_kraus_normalization(PositionMeasurementSpec(tau, grid)).residual for tau in (1e-3, 1.0, 1e3)}
    worst = max(res.values())
    return Criterion(9, "Kraus normalization", worst <= 1e-12, f"max residual={worst:.2e}", res)


def oracle_equivalence() -> Criterion:
    from .cli import moment_discrepancy
    from .fock import (
        build_fock_model,
        engine_binned_distribution,
        engine_final_moments,
        engine_setup,
        oracle_record_distribution,
        oracle_reduced_state,
        state_moments,
        total_variation,
    )

    start = time.perf_counter()
    grid = make_grid(0.0, 2.0, 2)
    model = build_fock_model(cutoffs=(16, 16, 8), coupling=0.1, meter_coupling=0.1)
    larger = build_fock_model(cutoffs=(20, 20, 8), coupling=0.1, meter_coupling=0.1)
    setup = engine_setup(model, grid, 32)
    oracle = state_moments(oracle_reduced_state(model, grid), model.x_S, model.p_S)
    oracle_big = state_moments(oracle_reduced_state(larger, grid), larger.x_S, larger.p_S)
    engine = engine_final_moments(model, setup)
    tv = total_variation(oracle_record_distribution(model, grid), engine_binned_distribution(model, setup))
    elapsed = time.perf_counter() - start
    moment_err = moment_discrepancy(oracle, engine)
    cutoff_err = moment_discrepancy(oracle_big, oracle)
    ok = moment_err <= 0.02 and tv <= 0.05 and cutoff_err <= 0.005 and elapsed <= 300
    return Criterion(
        10, "truncated-Fock oracle equivalence", ok,
        f"moments={moment_err:.2e} TV={tv:.2e} cutoff16->20={cutoff_err:.2e} time={elapsed:.1f}s",
        {"moments": moment_err, "tv": tv, "cutoff": cutoff_err, "seconds": elapsed},
    )


def _pair_labels(F: GaussianFunctional):
    kets = [lab for lab in F.labels if lab.branch == KET]
    return kets, [VarLabel(BRA, lab.node, lab.kind) for lab in kets]


def sign_flipped(F: GaussianFunctional) -> GaussianFunctional:
    return GaussianFunctional(F.layout, -F.K, -F.b, F.c, F.grid, dict(F.meta))


def positivity(seed: int = 2024) -> Criterion:
    grid = reference_grid(16)
    spec = PositionMeasurementSpec(1.0, grid)
    results = {}
    for name, model, state in _process_zoo(grid):
        W = build_cl_process(model, grid, state, CLOSED)
        results["W/" + name] = positivity_sample_check(W, *_pair_labels(W), 64, seed).passed
        law = compute_readout_law_direct(W, build_position_measurement(spec))
        rec = sample_records(law, 1, seed)[0]
        M = build_position_measurement(spec, rec)
        results["M_r/" + name] = positivity_sample_check(M, *_pair_labels(M), 64, seed).passed
    W = build_cl_process(reference_model(grid), grid, ground_state(), CLOSED)
    mutant = positivity_sample_check(sign_flipped(W), *_pair_labels(W), 64, seed).passed
    ok = all(results.values()) and not mutant
    return Criterion(11, "positivity", ok, f"{sum(results.values())}/{len(results)} built functionals pass, sign-flipped mutant passes={mutant}", {**results, "mutant": mutant})


def sampler_statistics(n: int = 100_000, seed: int = 99) -> Criterion:
    grid = reference_grid(32)
    model = reference_model(grid)
    law = compute_readout_law_direct(
        build_cl_process(model, grid, ground_state(), CLOSED), build_position_measurement(PositionMeasurementSpec(1.0, grid))
    )
    cov, _ = readout_covariance(law)
    S = sample_array(law, n, seed)
    emp = np.cov(S, rowvar=False)
    scale = np.sqrt(np.outer(np.diag(cov), np.diag(cov)))
    worst = float((np.abs(emp - cov) / scale).max())
    return Criterion(12, "sampler covariance", worst <= 0.02, f"max entrywise deviation={worst:.2e} (n={n})", {"max_rel": worst})


CRITERIA = (
    two_route_equality,
    normalization,
    causality,
    trace_preservation,
    divisibility,
    projective_limit,
    conditional_contract,
    discrete_recovery,
    kraus_normalization,
    oracle_equivalence,
    positivity,
    sampler_statistics,
)


def run_all(stream=None) -> list:
    stream = sys.stdout if stream is None else stream
    out = []
    for fn in CRITERIA:
        crit = fn()
        print(crit.line(), file=stream, flush=True)
        out.append(crit)
    return out


def main() -> int:
    results = run_all()
    failed = [c.number for c in results if not c.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria pass")
    return 0 if not failed else 1


if __name__ == "__main__":
    sys.exit(main())
