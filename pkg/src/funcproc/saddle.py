"""Readout law of a Caldeira-Leggett process by the classical-trajectory (saddle) route.

The Gaussian path integral is evaluated through fundamental solutions of the
discretized equation of motion, a Green's function, boundary matrices Lambda,
source matrices F and the 3x3 boundary form Omega-check.  The operator is
assembled here on its own, without the functional builders, so that this route
is an independent check of the direct marginalization.

Boundary time derivatives default to the discrete flux (A D)_boundary, which is
the exact discrete counterpart of the continuum derivative and makes the two
routes agree to roundoff.  Second-order one-sided differences are available as
``boundary_derivative="one-sided"``; they carry an O(dt) defect.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .born import ReadoutLaw, gaussian_log_mass
from .errors import AssemblyError, BVPSingularError, DomainError, InvariantError, ValidityError
from .grid import TimeGrid
from .process import CLModel, GaussianState

SIGMA_Z = np.diag([1.0, -1.0])
COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class SaddleData:
    """Fundamental solutions (n+1, 2), Green's function (n+1, n+1, 2, 2), boundary data."""

    grid: TimeGrid
    tau_m: float
    D_i: np.ndarray
    D_i_bar: np.ndarray
    D_f: np.ndarray
    D_f_bar: np.ndarray
    G: np.ndarray
    Lambda_f: np.ndarray
    Lambda_i: np.ndarray
    Lambda_if: np.ndarray
    F_f: np.ndarray
    F_i: np.ndarray
    Omega: np.ndarray
    Omega_check: np.ndarray | None
    operator: np.ndarray
    defects: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.grid.n_steps
        checks = [
            (self.D_f[0], (0, 0)),
            (self.D_f[n], (1, 0)),
            (self.D_f_bar[0], (0, 0)),
            (self.D_f_bar[n], (0, 1)),
            (self.D_i[0], (-1, 0)),
            (self.D_i[n], (0, 0)),
            (self.D_i_bar[0], (0, -1)),
            (self.D_i_bar[n], (0, 0)),
        ]
        for value, want in checks:
            if np.any(value != np.array(want)):
                raise InvariantError("fundamental solution violates its boundary condition")
        if np.any(self.G[0]) or np.any(self.G[n]):
            raise InvariantError("Green's function violates the homogeneous boundary condition")
        if self.Omega_check is not None:
            O = self.Omega_check
            if np.abs(O - O.T).max() > 1e-9 * (1.0 + np.abs(O).max()):
                raise InvariantError("Omega-check is not symmetric")


def assemble_operator(model: CLModel, grid: TimeGrid, tau_m: float) -> np.ndarray:
    """Node-major matrix A with exponent -1/2 X^T A X of exp(i S0 + i S_FV - meas).

    X = (x_0, xbar_0, x_1, xbar_1, ...).  The measurement part adds
    dt w_k / (2 tau_m) on both branch diagonals (nothing when tau_m is infinite).
    """
    n = grid.n_steps + 1
    dt, m = grid.dt, model.mass
    w = grid.trapezoid_weights()
    A = np.zeros((2 * n, 2 * n), dtype=complex)
    branch_sign = (1.0, -1.0)
    for k in range(grid.n_steps):
        for br, s in enumerate(branch_sign):
            i0, i1 = 2 * k + br, 2 * (k + 1) + br
            kin = -1j * s * m / dt
            A[i0, i0] += kin
            A[i1, i1] += kin
            A[i0, i1] -= kin
            A[i1, i0] -= kin
    for k in range(n):
        for br, s in enumerate(branch_sign):
            i = 2 * k + br
            A[i, i] += 1j * s * m * model.omega0**2 * dt * w[k]
            if math.isfinite(tau_m):
                A[i, i] += dt * w[k] / (2.0 * tau_m)
    kernel = model.kernel_on(grid)
    if not kernel.is_zero():
        wdt = dt * w
        for k in range(n):
            for l in range(n):
                A[2 * k : 2 * k + 2, 2 * l : 2 * l + 2] += 1j * wdt[k] * wdt[l] * kernel.blocks[k, l]
    return A


def _solve_interior(A_II: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(A_II)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise BVPSingularError(f"discretized boundary-value operator is singular (condition {cond:.3e})")
    return sla.solve(A_II, rhs)


def _flux_derivatives(A, full, source, m, node, sign):
    """Discrete time derivative at a boundary node: sign * (i/m) sigma_z (A X - source)_node."""
    block = (A @ full - source)[2 * node : 2 * node + 2]
    return sign * (1j / m) * (SIGMA_Z @ block)


def _one_sided(values: np.ndarray, dt: float, at_end: bool) -> np.ndarray:
    """Second-order one-sided difference along axis 0 (needs at least 3 nodes)."""
    if values.shape[0] < 3:
        raise DomainError("one-sided boundary derivatives need at least two steps")
    if at_end:
        return (3 * values[-1] - 4 * values[-2] + values[-3]) / (2 * dt)
    return (-3 * values[0] + 4 * values[1] - values[2]) / (2 * dt)


def compute_saddle_data(
    model: CLModel,
    grid: TimeGrid,
    tau_m: float,
    state: GaussianState | None = None,
    boundary_derivative: str = "flux",
) -> SaddleData:
    """Fundamental solutions, Green's function and boundary matrices.

    ``tau_m`` may be ``math.inf`` (no measurement); the Green's function and the
    F matrices then vanish.
    """
    if not tau_m > 0:
        raise DomainError("tau_m must be positive")
    if boundary_derivative not in ("flux", "one-sided"):
        raise DomainError("boundary_derivative must be 'flux' or 'one-sided'")
    N = grid.n_steps
    n = N + 1
    dt, m = grid.dt, model.mass
    w = grid.trapezoid_weights()
    A = assemble_operator(model, grid, tau_m)
    interior = np.arange(2, 2 * N)
    A_II = A[np.ix_(interior, interior)]

    # four boundary-value problems: columns are D_f, D_f_bar, D_i, D_i_bar
    bc = np.zeros((2 * n, 4), dtype=complex)
    bc[2 * N, 0] = 1.0
    bc[2 * N + 1, 1] = 1.0
    bc[0, 2] = -1.0
    bc[1, 3] = -1.0
    D = bc.copy()
    if interior.size:
        D[interior] = _solve_interior(A_II, -A[np.ix_(interior, [0, 1, 2 * N, 2 * N + 1])] @ bc[[0, 1, 2 * N, 2 * N + 1]])

    # node-impulse problems: source J_l = dt w_l / (2 tau_m) on node l (both branches)
    finite = math.isfinite(tau_m)
    J = np.zeros((2 * n, 2 * n))
    if finite:
        J = np.diag(np.repeat(dt * w / (2.0 * tau_m), 2))
    Gfull = np.zeros((2 * n, 2 * n), dtype=complex)
    if interior.size and finite:
        Gfull[interior] = _solve_interior(A_II, J[interior])
    # G(t_k, s_l) = Gfull[k, l] / (dt w_l)
    G = Gfull.reshape(n, 2, n, 2).transpose(0, 2, 1, 3) / (dt * w)[None, :, None, None]

    if boundary_derivative == "flux":
        dD_end = _flux_derivatives(A, D, 0.0, m, N, 1.0)  # (2, 4)
        dD_start = _flux_derivatives(A, D, 0.0, m, 0, -1.0)
        dG_end = _flux_derivatives(A, Gfull, J, m, N, 1.0) / np.repeat(dt * w, 2)[None, :]
        dG_start = _flux_derivatives(A, Gfull, J, m, 0, -1.0) / np.repeat(dt * w, 2)[None, :]
    else:
        Dn = D.reshape(n, 2, 4)
        dD_end = _one_sided(Dn, dt, True)
        dD_start = _one_sided(Dn, dt, False)
        Gn = Gfull.reshape(n, 2, 2 * n) / np.repeat(dt * w, 2)[None, None, :]
        dG_end = _one_sided(Gn, dt, True)
        dG_start = _one_sided(Gn, dt, False)

    Lambda_f = 0.5 * m * SIGMA_Z @ dD_end[:, 0:2]
    Lambda_i = 0.5 * m * SIGMA_Z @ dD_start[:, 2:4]
    Lambda_if = 0.5 * m * (SIGMA_Z @ dD_start[:, 0:2] + dD_end[:, 2:4].T @ SIGMA_Z)

    Dn = D.reshape(n, 2, 4)
    coef = 0.0 if not finite else 1j / (4.0 * tau_m)
    # F(s_l) as 2x2 blocks: (m/2) sigma_z dG(t, s_l) - (i / 4 tau_m) [D D_bar]^T(s_l)
    dGe = dG_end.reshape(2, n, 2).transpose(1, 0, 2)
    dGs = dG_start.reshape(2, n, 2).transpose(1, 0, 2)
    F_f = 0.5 * m * np.einsum("ab,lbc->lac", SIGMA_Z, dGe) - coef * Dn[:, :, 0:2].transpose(0, 2, 1)
    F_i = 0.5 * m * np.einsum("ab,lbc->lac", SIGMA_Z, dGs) - coef * Dn[:, :, 2:4].transpose(0, 2, 1)

    Omega = np.zeros((3, 3), dtype=complex)
    Omega[:2, :2] = -2.0 * Lambda_i
    Omega[:2, 2] = Lambda_if.sum(axis=1)
    Omega[2, :2] = Lambda_if.sum(axis=1)
    Omega[2, 2] = -2.0 * Lambda_f.sum()
    defects = {"omega_asymmetry": float(np.abs(Omega - Omega.T).max() / (1.0 + np.abs(Omega).max()))}
    if boundary_derivative == "one-sided":
        # finite differences break the exact symmetry; keep the symmetric part
        Omega = 0.5 * (Omega + Omega.T)
    Omega_check = None
    if state is not None:
        Omega_check = 1j * Omega
        Omega_check[:2, :2] += state.xi
    return SaddleData(
        grid, tau_m,
        Dn[:, :, 2].copy(), Dn[:, :, 3].copy(), Dn[:, :, 0].copy(), Dn[:, :, 1].copy(),
        G, Lambda_f, Lambda_i, Lambda_if, F_f, F_i, Omega, Omega_check, A, defects,
    )


def _rank_one_factors(correction: np.ndarray, tau_m: float, wdt: np.ndarray) -> dict:
    """g, h from the leading eigenpair of the boundary correction (in continuum units)."""
    vals, vecs = np.linalg.eigh(correction)
    order = np.argsort(-np.abs(vals))
    lead = vals[order[0]]
    u = vecs[:, order[0]]
    scale = tau_m / (wdt[:, None] * wdt[None, :])
    continuum = scale * correction
    g = math.copysign(math.sqrt(abs(lead)), lead) * u / wdt * math.sqrt(tau_m)
    h = math.sqrt(abs(lead)) * u / wdt * math.sqrt(tau_m)
    residual = np.linalg.norm(continuum - np.outer(g, h)) / max(np.linalg.norm(continuum), 1e-300)
    return {
        "g": g,
        "h": h,
        "rank_one_residual": float(residual),
        "eigenvalues": vals[order[:3]].copy(),
        "numerical_rank": int(np.sum(np.abs(vals) > 1e-12 * max(np.abs(vals).max(), 1e-300))),
    }


def compute_readout_law_saddle(
    model: CLModel,
    state: GaussianState,
    spec,
    grid: TimeGrid | None = None,
    boundary_derivative: str = "flux",
) -> tuple:
    """(ReadoutLaw, SaddleData) from the classical-trajectory assembly."""
    grid = spec.grid if grid is None else grid
    if spec.grid != grid:
        raise DomainError("measurement grid differs from the working grid")
    tau = spec.tau_m
    data = compute_saddle_data(model, grid, tau, state, boundary_derivative)
    n = grid.n_steps + 1
    wdt = grid.dt * grid.trapezoid_weights()
    # sources: v = V r + v0 over (x_i, xbar_i, x_f)
    V = np.zeros((3, n), dtype=complex)
    V[0] = -1j * wdt * data.F_i[:, 0, :].sum(axis=1)
    V[1] = -1j * wdt * data.F_i[:, 1, :].sum(axis=1)
    V[2] = 1j * wdt * data.F_f.sum(axis=(1, 2))
    v0 = np.array([state.c[0], state.c[1], 0.0], dtype=complex)
    O = data.Omega_check
    cond = np.linalg.cond(O)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise AssemblyError(f"Omega-check is singular (condition {cond:.3e})")
    Oinv_V = sla.solve(O, V)
    G_sum = data.G.sum(axis=(2, 3))
    correction = -(V.T @ Oinv_V)
    R = np.diag(wdt / tau) - (1.0 / (2.0 * tau)) * (wdt[:, None] * wdt[None, :]) * G_sum + correction
    b = V.T @ sla.solve(O, v0)
    scale = np.abs(R).max()
    imag_res = float(max(np.abs(R.imag).max(), np.abs(b.imag).max()) / scale)
    if imag_res > 1e-8:
        raise ValidityError(f"saddle law has an imaginary part {imag_res:.3e} relative to R")
    R = 0.5 * (R.real + R.real.T)
    b = b.real
    gh = _rank_one_factors(correction.real, tau, wdt)
    law = ReadoutLaw(
        grid, tuple(range(n)), R, b, gaussian_log_mass(R, b), tau, gh,
        {"imag_residual": imag_res, "boundary_derivative": boundary_derivative, **data.defects},
    )
    return law, data


def route_difference(law_a: ReadoutLaw, law_b: ReadoutLaw) -> dict:
    """Relative R and b differences and absolute logZ difference between two laws."""
    dR = float(np.linalg.norm(law_a.R - law_b.R) / np.linalg.norm(law_a.R))
    db = float(np.linalg.norm(law_a.b - law_b.b) / (1.0 + np.linalg.norm(law_a.b)))
    dz = float(abs(law_a.logZ - law_b.logZ))
    return {"R_rel": dR, "b_rel": db, "logZ_abs": dz}


__all__ = [
    "SaddleData",
    "assemble_operator",
    "compute_saddle_data",
    "compute_readout_law_saddle",
    "route_difference",
]
