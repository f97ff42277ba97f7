"""Functional Born rule in the Gaussian sector: readout laws, sampling, conditional
states and the projective limit."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import CompositionError, DomainError, PreconditionError, ValidityError
from .gaussian import (
    LOG_2PI,
    GaussianFunctional,
    from_terms,
    integrate_out,
    multiply,
    pin_equal,
)
from .grid import READOUT, TimeGrid, bra, ket, readout
from .measurement import PositionMeasurementSpec, ReadoutRecord, build_position_measurement
from .process import CLOSED, OPEN_FUTURE, CLModel, GaussianState, build_cl_process

IMAG_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class ReadoutLaw:
    """Gaussian record law p(r) = exp(-1/2 r^T R r + b^T r - logZ) over readout nodes.

    ``R`` is the node-unit precision: ``R = weighted kernel / tau_m`` so the
    covariance is ``R^-1``.
    """

    grid: TimeGrid
    nodes: tuple
    R: np.ndarray
    b: np.ndarray
    logZ: float
    tau_m: float = float("nan")
    gh_data: dict | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        R = np.array(self.R, dtype=float)
        b = np.array(self.b, dtype=float).reshape(-1)
        n = len(self.nodes)
        if R.shape != (n, n) or b.shape != (n,):
            raise ValidityError("law dimensions do not match its nodes")
        asym = np.abs(R - R.T).max() if n else 0.0
        if asym > 1e-9 * (1.0 + np.abs(R).max()):
            raise ValidityError(f"law kernel is not symmetric (residual {asym:.3e})")
        R = 0.5 * (R + R.T)
        if n:
            lo = np.linalg.eigvalsh(R).min()
            if not lo > 0:
                raise ValidityError(f"law kernel is not positive definite (min eigenvalue {lo:.3e})")
        R.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "nodes", tuple(int(k) for k in self.nodes))

    @property
    def size(self) -> int:
        return len(self.nodes)

    def mean(self) -> np.ndarray:
        return sla.solve(self.R, self.b, assume_a="pos")

    def covariance(self) -> np.ndarray:
        cov = sla.inv(self.R)
        return 0.5 * (cov + cov.T)

    def weighted_kernel(self) -> np.ndarray:
        """tau_m * R: the kernel of the continuum form (1/2 tau_m) int int r R r."""
        return self.tau_m * self.R

    def log_density(self, values) -> float:
        r = self._values(values)
        return float(-0.5 * r @ self.R @ r + self.b @ r - self.logZ)

    def _values(self, values) -> np.ndarray:
        if isinstance(values, ReadoutRecord):
            return np.asarray(values.values)[list(self.nodes)]
        r = np.asarray(values, dtype=float).reshape(-1)
        if r.size == self.grid.n_steps + 1 and r.size != self.size:
            r = r[list(self.nodes)]
        if r.size != self.size:
            raise CompositionError("record length does not match the law")
        return r

    def marginal(self, keep_nodes) -> "ReadoutLaw":
        """Law of the records at ``keep_nodes`` (others integrated out)."""
        keep_nodes = [int(k) for k in keep_nodes]
        idx = [self.nodes.index(k) for k in keep_nodes]
        cov = self.covariance()[np.ix_(idx, idx)]
        mu = self.mean()[idx]
        return law_from_moments(self.grid, keep_nodes, mu, cov, self.tau_m)

    def functional(self) -> GaussianFunctional:
        labels = [readout(k) for k in self.nodes]
        K = {}
        for i, a in enumerate(labels):
            for j in range(i, len(labels)):
                K[(a, labels[j])] = self.R[i, j]
        return from_terms(labels, K, dict(zip(labels, self.b)), -self.logZ, self.grid)


def gaussian_log_mass(R: np.ndarray, b: np.ndarray) -> float:
    """log of the integral of exp(-1/2 r^T R r + b^T r) for symmetric positive definite R."""
    n = R.shape[0]
    chol = sla.cho_factor(R)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    return float(0.5 * b @ sla.cho_solve(chol, b) + 0.5 * n * LOG_2PI - 0.5 * logdet)


def law_from_moments(grid, nodes, mean, cov, tau_m=float("nan")) -> ReadoutLaw:
    R = sla.inv(cov)
    R = 0.5 * (R + R.T)
    b = R @ mean
    return ReadoutLaw(grid, tuple(nodes), R, b, gaussian_log_mass(R, b), tau_m)


def law_normalization_residual(law: ReadoutLaw) -> float:
    """|integral of the law - 1|, integrating the density with the Gaussian algebra."""
    from .gaussian import marginalize

    F = law.functional()
    G = marginalize(F, list(F.labels))
    return abs(complex(np.exp(G.c)) - 1.0)


def readout_exponent_direct(W: GaussianFunctional, M_symbolic: GaussianFunctional) -> GaussianFunctional:
    """Integrate W * M over every non-readout variable (closing the final node if W is closed)."""
    F = multiply(W, M_symbolic)
    final = W.meta.get("final_node", W.grid.n_steps if W.grid is not None else None)
    if W.meta.get("boundary") == CLOSED:
        F = pin_equal(F, ket(final), bra(final))
    others = [lab for lab in F.labels if lab.kind != READOUT]
    return integrate_out(F, others)


def compute_readout_law_direct(W: GaussianFunctional, M_symbolic: GaussianFunctional) -> ReadoutLaw:
    """Readout law by direct marginalization of the Born-rule integrand."""
    if W.meta.get("boundary") != CLOSED:
        raise PreconditionError("the direct route needs a closed-boundary process functional")
    E = readout_exponent_direct(W, M_symbolic)
    nodes = [lab.node for lab in E.labels]
    scale = max(np.abs(E.K).max(), 1e-300)
    imag_res = float(max(np.abs(E.K.imag).max(), np.abs(E.b.imag).max()) / scale)
    if imag_res > IMAG_TOL:
        raise ValidityError(f"record exponent has an imaginary part {imag_res:.3e} relative to R")
    R = E.K.real
    b = E.b.real
    lo = float(np.linalg.eigvalsh(0.5 * (R + R.T)).min())
    if not lo > 0:
        raise ValidityError(f"law is not normalizable: min eigenvalue of R is {lo:.3e}")
    logZ = gaussian_log_mass(0.5 * (R + R.T), b)
    raw_mass = abs(complex(np.exp(E.c + logZ)) - 1.0)
    diagnostics = {"imag_residual": imag_res, "raw_mass_residual": raw_mass, "min_eigenvalue": lo}
    return ReadoutLaw(W.grid, tuple(nodes), R, b, logZ, M_symbolic.meta.get("tau_m", float("nan")), None, diagnostics)


def born_probability_density(W: GaussianFunctional, M_numeric: GaussianFunctional) -> complex:
    """Born value Pr[r] for a numeric record: integral of W * M with the final node closed."""
    E = readout_exponent_direct(W, M_numeric)
    if E.size:
        raise PreconditionError("measurement functional still carries free record labels")
    return complex(np.exp(E.c))


def readout_covariance(law: ReadoutLaw) -> tuple:
    """(covariance, mean) of the discrete record law; covariance = tau_m * (weighted kernel)^-1."""
    return law.covariance(), law.mean()


def sample_array(law: ReadoutLaw, n: int, seed=None) -> np.ndarray:
    """n x len(nodes) array of records drawn from the law."""
    if n < 0:
        raise DomainError("n must be non-negative")
    rng = np.random.default_rng(seed)
    mu = law.mean()
    cov = law.covariance()
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        if vals.min() < -1e-10 * vals.max():
            raise ValidityError(f"covariance has a negative eigenvalue {vals.min():.3e}") from None
        L = vecs * np.sqrt(np.clip(vals, 0.0, None))
    z = rng.standard_normal((n, law.size))
    return mu[None, :] + z @ L.T


def sample_records(law: ReadoutLaw, n: int, seed=None) -> list:
    if n == 0:
        return []
    if list(law.nodes) != list(range(law.grid.n_steps + 1)):
        raise PreconditionError("records need a law over every grid node")
    return [ReadoutRecord(law.grid, row) for row in sample_array(law, n, seed)]


@dataclass(frozen=True, eq=False)
class ConditionalState:
    """Unnormalized post-measurement state on the final node pair."""

    functional: GaussianFunctional
    state: GaussianState
    trace: float


def conditional_state(W: GaussianFunctional, M_numeric: GaussianFunctional) -> tuple:
    """(normalized final GaussianState, trace) of the conditional state W * M.

    The trace equals the Born probability of the record.
    """
    if W.meta.get("boundary") != OPEN_FUTURE:
        raise PreconditionError("conditional states need an open-future process functional")
    final = W.meta.get("final_node", W.grid.n_steps)
    F = multiply(W, M_numeric)
    if any(lab.kind == READOUT for lab in F.labels):
        raise PreconditionError("measurement functional must carry a numeric record")
    xf, xbf = ket(final), bra(final)
    rho = integrate_out(F, [lab for lab in F.labels if lab not in (xf, xbf)])
    closed = pin_equal(rho, xf, xbf)
    from .gaussian import marginalize

    tr = complex(np.exp(marginalize(closed, [xf]).c))
    xi = np.array([[rho.entry(xf, xf), rho.entry(xf, xbf)], [rho.entry(xbf, xf), rho.entry(xbf, xbf)]])
    cvec = np.array([rho.linear(xf), rho.linear(xbf)])
    return GaussianState(xi, cvec), tr.real


def conditional_state_functional(W: GaussianFunctional, M_numeric: GaussianFunctional) -> ConditionalState:
    state, tr = conditional_state(W, M_numeric)
    final = W.meta.get("final_node", W.grid.n_steps)
    F = multiply(W, M_numeric)
    rho = integrate_out(F, [lab for lab in F.labels if lab not in (ket(final), bra(final))])
    return ConditionalState(rho, state, tr)


@dataclass(frozen=True, eq=False)
class ProjectiveLimitLaw:
    """Pr[r] proportional to rho(r_0, r_0) exp(-(i/2) r^T P r).

    ``phase_kernel`` P holds dt^2 w_k w_l sum_ij A_ij(t_k, t_l); ``weight_xi`` and
    ``weight_drift`` define rho on the diagonal: exp(-1/2 s r_0^2 + u r_0).
    """

    grid: TimeGrid
    phase_kernel: np.ndarray
    weight_xi: float
    weight_drift: float
    log_norm: float

    def exponent_kernel(self) -> np.ndarray:
        """Quadratic coefficient of the full limiting exponent over all nodes."""
        K = 1j * np.array(self.phase_kernel, dtype=complex)
        K[0, 0] += self.weight_xi
        return K

    def exponent_linear(self) -> np.ndarray:
        b = np.zeros(self.grid.n_steps + 1, dtype=complex)
        b[0] = self.weight_drift
        return b

    def log_value(self, values) -> complex:
        r = np.asarray(values, dtype=float).reshape(-1)
        return complex(-0.5 * r @ self.exponent_kernel() @ r + self.exponent_linear() @ r + self.log_norm)

    def phase(self, values) -> complex:
        r = np.asarray(values, dtype=float).reshape(-1)
        return complex(np.exp(-0.5j * r @ self.phase_kernel @ r))


def projective_limit_law(model: CLModel, state: GaussianState, grid: TimeGrid) -> ProjectiveLimitLaw:
    kernel = model.kernel_on(grid)
    w = grid.dt * grid.trapezoid_weights()
    P = (w[:, None] * w[None, :]) * kernel.branch_sum()
    # Physical kernels have a real branch sum (the limit is a pure phase); keep
    # complex data otherwise so that the exponent stays exact.
    if np.abs(P.imag).max() <= 1e-12 * (1.0 + np.abs(P).max()):
        P = P.real
    return ProjectiveLimitLaw(
        grid, P, state.diagonal_curvature.real, state.diagonal_drift.real, state.log_norm()
    )


def projective_limit_error(model: CLModel, state: GaussianState, grid: TimeGrid, tau_m: float) -> float:
    """Relative Frobenius distance between the finite-tau record exponent and the limit.

    Both exponents are compared before any normalization: the white-noise part of
    the finite law cancels against the measurement prefactor, leaving a kernel
    that tends to the limiting one as tau_m -> 0.
    """
    W = build_cl_process(model, grid, state, CLOSED)
    M = build_position_measurement(PositionMeasurementSpec(tau_m, grid))
    E = readout_exponent_direct(W, M)
    nodes = [lab.node for lab in E.labels]
    lim = projective_limit_law(model, state, grid)
    K_lim = lim.exponent_kernel()[np.ix_(nodes, nodes)]
    scale = np.linalg.norm(K_lim)
    if scale == 0:
        raise DomainError("limiting kernel vanishes; relative error undefined")
    return float(np.linalg.norm(E.K - K_lim) / scale)


__all__ = [
    "ReadoutLaw",
    "ProjectiveLimitLaw",
    "ConditionalState",
    "compute_readout_law_direct",
    "readout_exponent_direct",
    "born_probability_density",
    "readout_covariance",
    "sample_records",
    "sample_array",
    "conditional_state",
    "conditional_state_functional",
    "projective_limit_law",
    "projective_limit_error",
    "law_from_moments",
    "law_normalization_residual",
    "gaussian_log_mass",
]
