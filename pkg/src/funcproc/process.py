"""Process functionals: free action, memory (influence) action, Caldeira-Leggett
type processes, Markovian products, and Gaussian initial states."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CompositionError, DomainError, InvariantError
from .gaussian import GaussianFunctional, constant, from_terms, multiply, relabel
from .grid import TimeGrid, VarLabel, bra, ket, make_grid

CLOSED = "closed"
OPEN_FUTURE = "open-future"
OPEN_BOUNDARY = "open-boundary"
BOUNDARIES = (CLOSED, OPEN_FUTURE, OPEN_BOUNDARY)

# Pure-dephasing structure: exp(i S) = exp(-1/2 (x - xbar) C (x - xbar)).
DEPHASING = -1j * np.array([[1.0, -1.0], [-1.0, 1.0]])


@dataclass(frozen=True, eq=False)
class MemoryKernel:
    """2x2 influence-kernel blocks A(t_k, t_l) on every node pair of a grid."""

    grid: TimeGrid
    blocks: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = self.grid.n_steps + 1
        blocks = np.array(self.blocks, dtype=complex)
        if blocks.shape != (n, n, 2, 2):
            raise InvariantError(f"kernel blocks must have shape {(n, n, 2, 2)}, got {blocks.shape}")
        if not np.all(np.isfinite(blocks)):
            raise InvariantError("kernel blocks must be finite")
        asym = np.abs(blocks - blocks.transpose(1, 0, 3, 2)).max() if n else 0.0
        if asym > 1e-10 * (1.0 + np.abs(blocks).max()):
            raise InvariantError(f"kernel violates A(s,t)^T = A(t,s) (residual {asym:.3e})")
        blocks = 0.5 * (blocks + blocks.transpose(1, 0, 3, 2))
        blocks.setflags(write=False)
        object.__setattr__(self, "blocks", blocks)

    def is_zero(self) -> bool:
        return not np.any(self.blocks)

    def branch_sum(self) -> np.ndarray:
        """sum_ij A_ij(t_k, t_l) as an (N+1) x (N+1) matrix."""
        return self.blocks.sum(axis=(2, 3))

    def truncate(self, last_node: int) -> "MemoryKernel":
        g = self.grid.truncate(last_node)
        return MemoryKernel(g, self.blocks[: last_node + 1, : last_node + 1])


def zero_kernel(grid: TimeGrid) -> MemoryKernel:
    n = grid.n_steps + 1
    return MemoryKernel(grid, np.zeros((n, n, 2, 2), dtype=complex))


def exponential_kernel(grid: TimeGrid, eta: float, gamma: float, structure=None) -> MemoryKernel:
    """A(t, s) = eta * exp(-gamma |t - s|) * B with a 2x2 structure B (default dephasing)."""
    B = DEPHASING if structure is None else np.asarray(structure, dtype=complex)
    if B.shape != (2, 2):
        raise DomainError("kernel structure must be 2x2")
    if gamma < 0 or not math.isfinite(gamma) or not math.isfinite(eta):
        raise DomainError("need finite eta and gamma >= 0")
    t = grid.nodes
    env = eta * np.exp(-gamma * np.abs(t[:, None] - t[None, :]))
    return MemoryKernel(grid, env[:, :, None, None] * B[None, None, :, :])


def single_mode_bath_kernel(grid: TimeGrid, coupling: float, omega: float, mass: float = 1.0) -> MemoryKernel:
    """Influence kernel of one harmonic mode in its ground state, coupled by coupling * x * x_E.

    The time-ordered influence exponent
    -coupling^2 int_{s<t} (x_t - xbar_t)(alpha(t-s) x_s - alpha*(t-s) xbar_s),
    alpha(tau) = exp(-i omega tau) / (2 mass omega), is written as a symmetric
    double integral; the equal-time block is the symmetrized limit.
    """
    if omega <= 0 or mass <= 0:
        raise DomainError("bath frequency and mass must be positive")
    t = grid.nodes
    n = t.size
    blocks = np.zeros((n, n, 2, 2), dtype=complex)

    def q_block(tau):
        a = np.exp(-1j * omega * tau) / (2.0 * mass * omega)
        return coupling**2 * np.array([[a, -np.conj(a)], [-a, np.conj(a)]])

    for k in range(n):
        for l in range(n):
            if k > l:
                M = q_block(t[k] - t[l])
            elif k < l:
                M = q_block(t[l] - t[k]).T
            else:
                Q0 = q_block(0.0)
                M = 0.5 * (Q0 + Q0.T)
            blocks[k, l] = -1j * M
    return MemoryKernel(grid, blocks)


KERNEL_CSV_COLUMNS = ["t_index", "s_index", "a11_re", "a11_im", "a12_re", "a12_im", "a21_re", "a21_im", "a22_re", "a22_im"]


def write_kernel_csv(kernel: MemoryKernel, path) -> None:
    n = kernel.grid.n_steps + 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(KERNEL_CSV_COLUMNS)
        for k in range(n):
            for l in range(n):
                B = kernel.blocks[k, l]
                row = [k, l]
                for v in (B[0, 0], B[0, 1], B[1, 0], B[1, 1]):
                    row += [repr(float(v.real)), repr(float(v.imag))]
                w.writerow(row)


def read_kernel_csv(path, grid: TimeGrid) -> MemoryKernel:
    """Read kernel blocks; node pairs absent from the file are zero."""
    n = grid.n_steps + 1
    blocks = np.zeros((n, n, 2, 2), dtype=complex)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(KERNEL_CSV_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise DomainError(f"kernel file lacks columns {sorted(missing)}")
        for row in reader:
            k, l = int(row["t_index"]), int(row["s_index"])
            if not (0 <= k < n and 0 <= l < n):
                raise DomainError(f"kernel entry ({k},{l}) outside the grid")
            for (i, j), name in zip(((0, 0), (0, 1), (1, 0), (1, 1)), ("a11", "a12", "a21", "a22")):
                blocks[k, l, i, j] = complex(float(row[name + "_re"]), float(row[name + "_im"]))
    return MemoryKernel(grid, blocks)


@dataclass(frozen=True, eq=False)
class CLModel:
    """Mass, bare frequency and memory kernel of a generalized Caldeira-Leggett process."""

    mass: float
    omega0: float
    kernel: MemoryKernel | None = None

    def __post_init__(self):
        if not (self.mass > 0 and math.isfinite(self.mass)):
            raise InvariantError("mass must be positive")
        if not (self.omega0 >= 0 and math.isfinite(self.omega0)):
            raise InvariantError("omega0 must be non-negative")

    def kernel_on(self, grid: TimeGrid) -> MemoryKernel:
        if self.kernel is None:
            return zero_kernel(grid)
        if self.kernel.grid == grid:
            return self.kernel
        n = grid.n_steps + 1
        kg = self.kernel.grid
        if kg.n_steps >= grid.n_steps and abs(kg.t_i - grid.t_i) < 1e-12 and abs(kg.dt - grid.dt) < 1e-12 * max(1.0, kg.dt):
            return MemoryKernel(grid, self.kernel.blocks[:n, :n])
        raise CompositionError("kernel grid does not match the working grid")


@dataclass(frozen=True, eq=False)
class GaussianState:
    """rho(x, xbar) proportional to exp(-1/2 v^T Xi v + c^T v), v = (x, xbar)."""

    xi: np.ndarray
    c: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=complex))

    def __post_init__(self):
        xi = np.array(self.xi, dtype=complex).reshape(2, 2)
        c = np.array(self.c, dtype=complex).reshape(2)
        swap = np.array([[0, 1], [1, 0]])
        scale = 1.0 + np.abs(xi).max() + np.abs(c).max()
        res = max(np.abs(swap @ xi.conj() @ swap - xi).max(), np.abs(swap @ c.conj() - c).max())
        if res > 1e-10 * scale:
            raise InvariantError(f"density kernel is not Hermitian (residual {res:.3e})")
        if np.abs(xi - xi.T).max() > 1e-10 * scale:
            raise InvariantError("Xi must be symmetric")
        if not self.diagonal_curvature.real > 0:
            raise InvariantError("state is not normalizable")
        xi.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "c", c)

    @property
    def diagonal_curvature(self) -> complex:
        return complex(self.xi.sum())

    @property
    def diagonal_drift(self) -> complex:
        return complex(self.c.sum())

    def log_norm(self) -> float:
        """Log-prefactor that makes the trace integral of rho equal one."""
        s = self.diagonal_curvature.real
        u = self.diagonal_drift.real
        return -(0.5 * math.log(2.0 * math.pi / s) + u * u / (2.0 * s))

    def functional(self, node: int = 0, grid: TimeGrid | None = None, normalized: bool = True) -> GaussianFunctional:
        a, b = ket(node), bra(node)
        K = {(a, a): self.xi[0, 0], (b, b): self.xi[1, 1], (a, b): self.xi[0, 1]}
        lin = {a: self.c[0], b: self.c[1]}
        return from_terms([a, b], K, lin, self.log_norm() if normalized else 0.0, grid)

    def moments(self) -> dict:
        """<x>, <p>, <x^2>, <p^2> and symmetrized <xp> of the normalized state (hbar = 1)."""
        s = self.diagonal_curvature.real
        u = self.diagonal_drift.real
        mean = u / s
        var = 1.0 / s
        ex2 = var + mean * mean
        # d/dx log rho at xbar = x equals -(Xi11 + Xi12) x + c1.
        alpha = self.xi[0, 0] + self.xi[0, 1]
        beta = self.c[0]
        d_mean = -alpha * mean + beta
        ep = (-1j * d_mean).real
        second = -self.xi[0, 0] + alpha * alpha * ex2 - 2 * alpha * beta * mean + beta * beta
        ep2 = (-second).real
        exp_ = (-1j * (-alpha * ex2 + beta * mean)).real
        return {"x": mean, "p": ep, "x2": ex2, "p2": ep2, "xp_sym": exp_}


def ground_state(mass: float = 1.0, omega: float = 1.0) -> GaussianState:
    if not omega > 0:
        raise DomainError("ground state needs omega > 0")
    return GaussianState(mass * omega * np.eye(2), np.zeros(2))


def coherent_state(mass: float, omega: float, x0: float, p0: float) -> GaussianState:
    """Displaced oscillator ground state with mean position x0 and momentum p0."""
    w = mass * omega
    return GaussianState(w * np.eye(2), np.array([w * x0 + 1j * p0, w * x0 - 1j * p0]))


def interval_weights(grid: TimeGrid, intervals: Sequence[tuple] | None = None) -> np.ndarray:
    """Trapezoid weights summed over node intervals (zero outside them)."""
    if intervals is None:
        return grid.trapezoid_weights()
    w = np.zeros(grid.n_steps + 1)
    for a, b in intervals:
        if not 0 <= a < b <= grid.n_steps:
            raise DomainError(f"interval ({a},{b}) is not inside the grid")
        w[a : b + 1] += 1.0
        w[a] -= 0.5
        w[b] -= 0.5
    return w


def build_free_action(model: CLModel, grid: TimeGrid, intervals: Sequence[tuple] | None = None) -> GaussianFunctional:
    """exp(i S0) on both branches with forward differences and trapezoid weights.

    S0 = m/2 int (xdot^T sigma_z xdot - omega0^2 x^T sigma_z x).  The log-prefactor
    holds the path-integral measure m / (2 pi dt) per step of the doubled path, which
    makes the closed-future functional trace preserving.
    """
    if intervals is None:
        intervals = [(0, grid.n_steps)]
    m, w0, dt = model.mass, model.omega0, grid.dt
    weights = interval_weights(grid, intervals)
    nodes = sorted({k for a, b in intervals for k in range(a, b + 1)})
    K = {}
    n_steps = 0
    for a, b in intervals:
        for k in range(a, b):
            n_steps += 1
            for lab, sign in ((ket, 1.0), (bra, -1.0)):
                kin = -1j * sign * m / dt
                x0, x1 = lab(k), lab(k + 1)
                K[(x0, x0)] = K.get((x0, x0), 0) + kin
                K[(x1, x1)] = K.get((x1, x1), 0) + kin
                K[(x0, x1)] = K.get((x0, x1), 0) - kin
    if w0 != 0.0:
        for k in nodes:
            for lab, sign in ((ket, 1.0), (bra, -1.0)):
                x = lab(k)
                K[(x, x)] = K.get((x, x), 0) + 1j * sign * m * w0 * w0 * dt * weights[k]
    c = n_steps * math.log(m / (2.0 * math.pi * dt))
    labels = [ket(k) for k in nodes] + [bra(k) for k in nodes]
    return from_terms(labels, K, None, c, grid)


def build_memory_action(kernel: MemoryKernel, grid: TimeGrid, weights: np.ndarray | None = None) -> GaussianFunctional:
    """exp(i S_FV) with S_FV = -1/2 sum_kl dt^2 w_k w_l x_k^T A(t_k, t_l) x_l."""
    if kernel.grid != grid:
        raise CompositionError("kernel grid differs from the working grid")
    if weights is None:
        weights = grid.trapezoid_weights()
    if kernel.is_zero():
        return constant(0.0, grid)
    nodes = [k for k in range(grid.n_steps + 1) if weights[k] != 0.0]
    labels = [ket(k) for k in nodes] + [bra(k) for k in nodes]
    n = len(nodes)
    idx = np.array(nodes, dtype=int)
    wdt = grid.dt * weights[idx]
    A = kernel.blocks[np.ix_(idx, idx)]  # (n, n, 2, 2)
    scaled = 1j * (wdt[:, None] * wdt[None, :])[:, :, None, None] * A
    K = np.zeros((2 * n, 2 * n), dtype=complex)
    for a in range(2):
        for b in range(2):
            K[a * n : (a + 1) * n, b * n : (b + 1) * n] = scaled[:, :, a, b]
    from .grid import Layout

    return GaussianFunctional(Layout(labels), K, np.zeros(2 * n), 0.0, grid)


def build_cl_process(
    model: CLModel,
    grid: TimeGrid,
    state: GaussianState | None,
    boundary: str = CLOSED,
    intervals: Sequence[tuple] | None = None,
) -> GaussianFunctional:
    """W for a CL-type process: exp(i S0 + i S_FV), times rho unless open-boundary.

    ``closed`` records that the final-node identification is to be applied by the
    consumer (Born rule, property checks).  ``intervals`` restricts the dynamics
    to a set of node intervals (used for interleaved operation/process layouts).
    """
    if boundary not in BOUNDARIES:
        raise DomainError(f"boundary must be one of {BOUNDARIES}")
    free = build_free_action(model, grid, intervals)
    memory = build_memory_action(model.kernel_on(grid), grid, interval_weights(grid, intervals))
    W = multiply(free, memory)
    if boundary != OPEN_BOUNDARY:
        if state is None:
            raise DomainError("closed and open-future processes need an initial state")
        W = multiply(W, state.functional(0, grid))
    return W.with_meta(boundary=boundary, final_node=grid.n_steps, model=model, state=state, intervals=intervals)


def _with_grid(F: GaussianFunctional, grid: TimeGrid) -> GaussianFunctional:
    return GaussianFunctional(F.layout, F.K, F.b, F.c, grid, F.meta)


def build_markovian_process(segments, grid: TimeGrid | None = None) -> GaussianFunctional:
    """Open-boundary product of memoryless segment processes.

    ``segments`` holds (model, sub_grid) pairs tiling an interval, or
    (model, (start_node, end_node)) pairs on ``grid``.  A segment whose model is
    None is idle: the functional is constant there.
    """
    segments = list(segments)
    if not segments:
        raise DomainError("need at least one segment")
    if all(isinstance(s[1], TimeGrid) for s in segments):
        subs = [s[1] for s in segments]
        dt = subs[0].dt
        for g0, g1 in zip(subs, subs[1:]):
            if abs(g0.t_f - g1.t_i) > 1e-12 * max(1.0, abs(g0.t_f)):
                raise CompositionError("segments do not tile the interval")
        for g in subs:
            if abs(g.dt - dt) > 1e-12 * dt:
                raise CompositionError("segments use different time steps")
        total = sum(g.n_steps for g in subs)
        grid = make_grid(subs[0].t_i, subs[-1].t_f, total)
        spans, start = [], 0
        for g in subs:
            spans.append((start, start + g.n_steps))
            start += g.n_steps
    else:
        if grid is None:
            raise DomainError("node-interval segments need a grid")
        spans = [tuple(s[1]) for s in segments]
        if spans[0][0] != 0 or spans[-1][1] != grid.n_steps:
            raise CompositionError("segments must cover the whole grid")
        for (a0, b0), (a1, b1) in zip(spans, spans[1:]):
            if b0 != a1:
                raise CompositionError("segments do not tile the interval")
        for a, b in spans:
            if not a < b:
                raise CompositionError("empty segment")
    W = constant(0.0, grid)
    for (model, _), (a, b) in zip(segments, spans):
        if model is None:
            # idle segment: the process acts as the identity there
            continue
        sub = make_grid(float(grid.nodes[a]), float(grid.nodes[b]), b - a)
        if model.kernel is not None and not model.kernel.is_zero():
            raise InvariantError("Markovian segments must have a zero memory kernel")
        seg = build_cl_process(CLModel(model.mass, model.omega0, None), sub, None, OPEN_BOUNDARY)
        seg = relabel(seg, lambda lab, a=a: VarLabel(lab.branch, lab.node + a, lab.kind))
        seg = _with_grid(seg, grid)
        W = multiply(W, seg)
    return W.with_meta(boundary=OPEN_BOUNDARY, final_node=grid.n_steps, segments=spans, model=None, state=None, intervals=None)


__all__ = [
    "MemoryKernel",
    "CLModel",
    "GaussianState",
    "zero_kernel",
    "exponential_kernel",
    "single_mode_bath_kernel",
    "write_kernel_csv",
    "read_kernel_csv",
    "ground_state",
    "coherent_state",
    "interval_weights",
    "build_free_action",
    "build_memory_action",
    "build_cl_process",
    "build_markovian_process",
    "CLOSED",
    "OPEN_FUTURE",
    "OPEN_BOUNDARY",
    "DEPHASING",
]
