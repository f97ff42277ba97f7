"""Truncated-Fock operator model of system, environment mode and pointer meters.

Used as brute-force ground truth for the Gaussian engine at desk scale.  Meters
are fresh pointer modes, one per Trotter step, coupled through g x (x) p_M and
read out in position bins.  A ground-state pointer with frequency omega_M gives
the per-step Kraus amplitude exp(-kappa (r - x)^2) with kappa = omega_M (g dt)^2 / 2
and readout r = q / (g dt), which is how the engine side is set up.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import special

from .errors import InvariantError, PreconditionError, SizeLimitError
from .grid import TimeGrid

MAX_DIM = 4096
MAX_RECORD_STEPS = 3


def ladder(d: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, d)), 1).astype(complex)


def position_operator(d: int, omega: float, mass: float = 1.0) -> np.ndarray:
    a = ladder(d)
    return (a + a.conj().T) / math.sqrt(2.0 * mass * omega)


def momentum_operator(d: int, omega: float, mass: float = 1.0) -> np.ndarray:
    a = ladder(d)
    return 1j * math.sqrt(mass * omega / 2.0) * (a.conj().T - a)


def oscillator_hamiltonian(d: int, omega: float) -> np.ndarray:
    return np.diag(omega * (np.arange(d) + 0.5)).astype(complex)


def coherent_vector(d: int, omega: float, x0: float, p0: float, mass: float = 1.0) -> np.ndarray:
    """Truncated, renormalized coherent state with mean position x0 and momentum p0."""
    alpha = math.sqrt(mass * omega / 2.0) * (x0 + 1j * p0 / (mass * omega))
    n = np.arange(d)
    log_fact = special.gammaln(n + 1)
    amp = np.exp(-0.5 * abs(alpha) ** 2 - 0.5 * log_fact) * alpha**n
    return amp / np.linalg.norm(amp)


def hermite_functions(d: int, q: np.ndarray, omega: float = 1.0) -> np.ndarray:
    """Oscillator eigenfunctions psi_n(q), n < d, by the stable three-term recursion."""
    s = math.sqrt(omega) * np.asarray(q, dtype=float)
    out = np.zeros((d,) + s.shape)
    out[0] = (omega / math.pi) ** 0.25 * np.exp(-0.5 * s * s)
    if d > 1:
        out[1] = math.sqrt(2.0) * s * out[0]
    for n in range(2, d):
        out[n] = math.sqrt(2.0 / n) * s * out[n - 1] - math.sqrt((n - 1) / n) * out[n - 2]
    return out


def bin_projectors(d: int, edges, omega: float = 1.0) -> list:
    """Position-bin effects restricted to the first d Fock states.

    Outer bins extend to infinity; the last effect is the complement of the
    others, so the effects sum to the identity exactly.
    """
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise PreconditionError("bin edges must be strictly increasing")
    bounds = [-np.inf] + list(edges[1:-1]) + [np.inf]
    nodes, weights = np.polynomial.legendre.leggauss(200)
    effects = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if math.isinf(lo) or math.isinf(hi):
            effects.append(None)
            continue
        q = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
        psi = hermite_functions(d, q, omega)
        effects.append((psi * (0.5 * (hi - lo) * weights)) @ psi.T)
    # lower tail by quadrature on a long finite range, upper tail as complement
    lo_tail = bounds[1]
    span = 40.0 / math.sqrt(omega)
    q = 0.5 * span * nodes + (lo_tail - 0.5 * span)
    psi = hermite_functions(d, q, omega)
    effects[0] = (psi * (0.5 * span * weights)) @ psi.T
    effects[-1] = np.eye(d) - sum(effects[:-1])
    return [0.5 * (E + E.T) + 0j for E in effects]


@dataclass(frozen=True, eq=False)
class FockModel:
    cutoffs: tuple
    H_SE: object
    H_SM: np.ndarray
    rho_SE: np.ndarray
    sigma_M: np.ndarray
    povm: list
    bin_edges: np.ndarray
    x_S: np.ndarray
    p_S: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        dS, dE, dM = self.cutoffs
        schedule = self.H_SE if isinstance(self.H_SE, (list, tuple)) else [self.H_SE]
        for H in list(schedule) + [self.H_SM]:
            if np.abs(H - H.conj().T).max() > 1e-12:
                raise InvariantError("Hamiltonian is not Hermitian")
        for rho in (self.rho_SE, self.sigma_M):
            if abs(np.trace(rho) - 1) > 1e-10 or np.abs(rho - rho.conj().T).max() > 1e-12:
                raise InvariantError("density matrix must be Hermitian with unit trace")
            if np.linalg.eigvalsh(rho).min() < -1e-10:
                raise InvariantError("density matrix is not positive")
        completeness = np.abs(sum(self.povm) - np.eye(dM)).max()
        if completeness > 1e-10:
            raise InvariantError(f"POVM is not complete (residual {completeness:.3e})")

    def h_se(self, step: int) -> np.ndarray:
        if isinstance(self.H_SE, (list, tuple)):
            return self.H_SE[min(step, len(self.H_SE) - 1)]
        return self.H_SE

    def povm_completeness(self) -> float:
        return float(np.abs(sum(self.povm) - np.eye(self.cutoffs[2])).max())


def build_fock_model(
    omega0: float = 1.0,
    omega_env: float = 1.5,
    coupling: float = 0.1,
    meter_coupling: float = 0.1,
    omega_meter: float = 1.0,
    x0: float = 1.0,
    p0: float = 0.5,
    cutoffs=(16, 16, 8),
    bin_edges=None,
    n_bins: int = 16,
) -> FockModel:
    """System oscillator coupled by coupling * x (x) x_E to one environment mode.

    Environment and meter start in their ground states, the system in a coherent
    state.  Default bins: ``n_bins`` equal bins over +-6 ground-state widths of
    the pointer.
    """
    dS, dE, dM = (int(c) for c in cutoffs)
    if min(dS, dE, dM) < 2:
        raise PreconditionError("every cutoff must be at least 2")
    xS = position_operator(dS, omega0)
    pS = momentum_operator(dS, omega0)
    xE = position_operator(dE, omega_env)
    pM = momentum_operator(dM, omega_meter)
    IS, IE = np.eye(dS), np.eye(dE)
    H_SE = (
        np.kron(oscillator_hamiltonian(dS, omega0), IE)
        + np.kron(IS, oscillator_hamiltonian(dE, omega_env))
        + coupling * np.kron(xS, xE)
    )
    H_SM = meter_coupling * np.kron(xS, pM)
    psi = coherent_vector(dS, omega0, x0, p0)
    env = np.zeros(dE)
    env[0] = 1.0
    state = np.kron(psi, env)
    rho_SE = np.outer(state, state.conj())
    sigma = np.zeros((dM, dM), dtype=complex)
    sigma[0, 0] = 1.0
    if bin_edges is None:
        width = 1.0 / math.sqrt(2.0 * omega_meter)
        bin_edges = np.linspace(-6 * width, 6 * width, n_bins + 1)
    povm = bin_projectors(dM, bin_edges, omega_meter)
    params = dict(
        omega0=omega0, omega_env=omega_env, coupling=coupling, meter_coupling=meter_coupling,
        omega_meter=omega_meter, x0=x0, p0=p0,
    )
    return FockModel((dS, dE, dM), H_SE, H_SM, rho_SE, sigma, povm, np.asarray(bin_edges, float), xS, pS, params)


def _embed_sm(model: FockModel) -> np.ndarray:
    """H_SM acting on S (x) E (x) M."""
    dS, dE, dM = model.cutoffs
    H = model.H_SM.reshape(dS, dM, dS, dM)
    full = np.einsum("aibj,ef->aeibfj", H, np.eye(dE))
    return full.reshape(dS * dE * dM, dS * dE * dM)


def trotter_unitary(model: FockModel, grid: TimeGrid) -> np.ndarray:
    """prod_k exp(-i H_SM dt) exp(-i H_SE(t_k) dt) on S (x) E (x) M (one meter mode)."""
    dS, dE, dM = model.cutoffs
    dim = dS * dE * dM
    if dim > MAX_DIM:
        raise SizeLimitError(f"dense dimension {dim} exceeds {MAX_DIM}")
    dt = grid.dt
    U_sm = sla.expm(-1j * dt * _embed_sm(model))
    U = np.eye(dim, dtype=complex)
    for k in range(grid.n_steps):
        U_se = np.kron(sla.expm(-1j * dt * model.h_se(k)), np.eye(dM))
        U = U_sm @ U_se @ U
    err = np.abs(U.conj().T @ U - np.eye(dim)).max()
    if err > 1e-8:
        raise InvariantError(f"Trotter product is not unitary ({err:.3e})")
    return U


def _meter_kraus(model: FockModel, dt: float) -> np.ndarray:
    """K[a, mu] = sqrt(p_mu) <a| exp(-i H_SM dt) |phi_mu> as operators on S."""
    dS, _, dM = model.cutoffs
    U = sla.expm(-1j * dt * model.H_SM).reshape(dS, dM, dS, dM)
    p, phi = np.linalg.eigh(model.sigma_M)
    keep = p > 1e-14
    # (a, mu, s, s')
    return np.einsum("sauv,vm,m->amsu", U, phi[:, keep], np.sqrt(p[keep]))


def _apply_instrument(rho4: np.ndarray, kraus: np.ndarray, effect: np.ndarray) -> np.ndarray:
    """sum_ab E[b, a] K_a rho K_b^dagger on S, identity on E; rho4 indexed (s, e, s', e')."""
    T = np.tensordot(kraus, rho4, axes=([3], [0]))  # (a, mu, s, e, v, f)
    Y = np.tensordot(effect, T, axes=([1], [0]))  # (b, mu, s, e, v, f)
    return np.einsum("bmsevf,bmtv->setf", Y, kraus.conj(), optimize=True)


def _evolve_se(rho: np.ndarray, U: np.ndarray) -> np.ndarray:
    return U @ rho @ U.conj().T


def _check_steps(grid: TimeGrid, meters_per_step):
    if meters_per_step is None:
        meters_per_step = [True] * grid.n_steps
    meters = [bool(m) for m in meters_per_step]
    if len(meters) != grid.n_steps:
        raise PreconditionError("need one meter flag per step")
    return meters


def oracle_record_distribution(model: FockModel, grid: TimeGrid, meters_per_step=None) -> dict:
    """Joint probabilities of binned pointer outcomes, one fresh meter per flagged step."""
    meters = _check_steps(grid, meters_per_step)
    if sum(meters) > MAX_RECORD_STEPS:
        raise SizeLimitError(f"at most {MAX_RECORD_STEPS} measured steps are supported")
    dS, dE, dM = model.cutoffs
    dt = grid.dt
    kraus = _meter_kraus(model, dt)
    last = max((k for k, m in enumerate(meters) if m), default=-1)
    branches = {(): model.rho_SE}
    probs = {}
    for k in range(last + 1):
        U = sla.expm(-1j * dt * model.h_se(k))
        new = {}
        for key, rho in branches.items():
            rho = _evolve_se(rho, U)
            if not meters[k]:
                new[key] = rho
                continue
            rho4 = rho.reshape(dS, dE, dS, dE)
            if k == last:
                # only traces are needed: Z[a, b] = sum_mu Tr(K_a rho K_b^dagger)
                Z = np.einsum("amsu,ueve,bmsv->ab", kraus, rho4, kraus.conj(), optimize=True)
                for j, effect in enumerate(model.povm):
                    probs[key + (j,)] = float(np.einsum("ba,ab->", effect, Z).real)
                continue
            for j, effect in enumerate(model.povm):
                new[key + (j,)] = _apply_instrument(rho4, kraus, effect).reshape(dS * dE, dS * dE)
        branches = new
    if last < 0:
        probs = {(): 1.0}
    total = sum(probs.values())
    if abs(total - 1.0) > 1e-8:
        raise InvariantError(f"outcome probabilities sum to {total}")
    return probs


def oracle_reduced_state(model: FockModel, grid: TimeGrid, meters_per_step=None) -> np.ndarray:
    """System state after tracing environment and all (unread) meters."""
    meters = _check_steps(grid, meters_per_step)
    dS, dE, dM = model.cutoffs
    if dS * dE > MAX_DIM:
        raise SizeLimitError(f"dense dimension {dS * dE} exceeds {MAX_DIM}")
    dt = grid.dt
    kraus = _meter_kraus(model, dt)
    rho = model.rho_SE
    for k in range(grid.n_steps):
        rho = _evolve_se(rho, sla.expm(-1j * dt * model.h_se(k)))
        if meters[k]:
            rho = _apply_instrument(rho.reshape(dS, dE, dS, dE), kraus, np.eye(dM)).reshape(dS * dE, dS * dE)
    rho_S = np.einsum("aebe->ab", rho.reshape(dS, dE, dS, dE))
    tr = np.trace(rho_S).real
    if abs(tr - 1.0) > 1e-10:
        raise InvariantError(f"reduced state has trace {tr}")
    return rho_S


def state_moments(rho_S: np.ndarray, x: np.ndarray, p: np.ndarray) -> dict:
    ev = lambda op: float(np.trace(rho_S @ op).real)  # noqa: E731
    return {
        "x": ev(x),
        "p": ev(p),
        "x2": ev(x @ x),
        "p2": ev(p @ p),
        "xp_sym": ev(0.5 * (x @ p + p @ x)),
    }


# ---------------------------------------------------------------------------
# Gaussian-engine counterpart of the dilation


@dataclass(frozen=True)
class EngineSetup:
    grid: TimeGrid
    meter_nodes: tuple
    kappa: float
    readout_scale: float


def engine_setup(model: FockModel, oracle_grid: TimeGrid, nodes_per_step: int = 32, meters_per_step=None) -> EngineSetup:
    from .grid import make_grid

    meters = _check_steps(oracle_grid, meters_per_step)
    fine = make_grid(oracle_grid.t_i, oracle_grid.t_f, oracle_grid.n_steps * nodes_per_step)
    nodes = tuple((k + 1) * nodes_per_step for k, m in enumerate(meters) if m)
    g = model.params["meter_coupling"]
    wm = model.params["omega_meter"]
    step = oracle_grid.dt
    kappa = wm * (g * step) ** 2 / 2.0
    return EngineSetup(fine, nodes, kappa, g * step)


def _engine_functionals(model: FockModel, setup: EngineSetup, boundary: str):
    from .measurement import PositionMeasurementSpec, build_position_measurement
    from .process import CLModel, build_cl_process, coherent_state, single_mode_bath_kernel

    p = model.params
    grid = setup.grid
    kernel = single_mode_bath_kernel(grid, p["coupling"], p["omega_env"]) if p["coupling"] else None
    cl = CLModel(1.0, p["omega0"], kernel)
    state = coherent_state(1.0, p["omega0"], p["x0"], p["p0"])
    W = build_cl_process(cl, grid, state, boundary)
    weights = np.zeros(grid.n_steps + 1)
    for k in setup.meter_nodes:
        weights[k] = 4.0 * setup.kappa / grid.dt
    M = None
    if setup.meter_nodes and setup.kappa > 0:
        M = build_position_measurement(PositionMeasurementSpec(1.0, grid), None, node_weights=weights)
    return W, M


def engine_final_moments(model: FockModel, setup: EngineSetup) -> dict:
    """Unconditional final moments from the Gaussian engine (records traced out)."""
    from .gaussian import integrate_out, multiply
    from .grid import bra, ket
    from .process import GaussianState

    W, M = _engine_functionals(model, setup, "open-future")
    F = W if M is None else multiply(W, M)
    N = setup.grid.n_steps
    rho = integrate_out(F, [lab for lab in F.labels if lab not in (ket(N), bra(N))])
    xi = np.array([[rho.entry(ket(N), ket(N)), rho.entry(ket(N), bra(N))], [rho.entry(bra(N), ket(N)), rho.entry(bra(N), bra(N))]])
    c = np.array([rho.linear(ket(N)), rho.linear(bra(N))])
    return GaussianState(xi, c).moments()


def engine_binned_distribution(model: FockModel, setup: EngineSetup) -> dict:
    """Engine record law integrated over the oracle's pointer bins (in readout units)."""
    from scipy.stats import multivariate_normal

    from .born import compute_readout_law_direct

    W, M = _engine_functionals(model, setup, "closed")
    law = compute_readout_law_direct(W, M)
    mean, cov = law.mean(), law.covariance()
    edges = np.concatenate(([-np.inf], model.bin_edges[1:-1], [np.inf])) / setup.readout_scale
    n_bins = edges.size - 1
    dim = law.size
    out = {}
    if dim == 1:
        from scipy.stats import norm

        sd = math.sqrt(cov[0, 0])
        cdf = norm.cdf((edges - mean[0]) / sd)
        return {(j,): float(cdf[j + 1] - cdf[j]) for j in range(n_bins)}
    mvn = multivariate_normal(mean, cov)
    big = 1e3 * math.sqrt(cov.diagonal().max()) + np.abs(mean).max()
    finite = np.clip(edges, -big, big)
    for key in itertools.product(range(n_bins), repeat=dim):
        lo = np.array([finite[j] for j in key])
        hi = np.array([finite[j + 1] for j in key])
        out[key] = float(max(mvn.cdf(hi, lower_limit=lo), 0.0))
    return out


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


__all__ = [
    "FockModel",
    "build_fock_model",
    "trotter_unitary",
    "oracle_record_distribution",
    "oracle_reduced_state",
    "state_moments",
    "bin_projectors",
    "hermite_functions",
    "engine_setup",
    "engine_final_moments",
    "engine_binned_distribution",
    "total_variation",
    "EngineSetup",
]
