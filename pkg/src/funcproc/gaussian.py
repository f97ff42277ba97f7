"""Complex Gaussian functionals exp(-1/2 x^T K x + b^T x + c) and their exact algebra.

Integrals are evaluated in closed form through Schur complements.  Oscillatory
(Fresnel) integrals are the i-epsilon limit of convergent ones, so the same
formula applies as long as the real part of the integrated block is positive
semidefinite.  Variables that enter only linearly produce Dirac deltas; these
are resolved by :func:`integrate_out`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import scipy.linalg as sla

from .errors import (
    CompositionError,
    DivergentIntegralError,
    InvariantError,
    LabelLookupError,
    NumericRangeError,
    PreconditionError,
    SingularMarginalError,
)
from .grid import BRA, KET, READOUT, Layout, TimeGrid, VarLabel

COND_LIMIT = 1e12
SYMMETRY_TOL = 1e-10
LOG_2PI = math.log(2.0 * math.pi)


def wrap_phase(c: complex) -> complex:
    """Reduce the imaginary part of a log-prefactor into (-pi, pi]."""
    c = complex(c)
    im = math.remainder(c.imag, 2.0 * math.pi)
    if im == -math.pi:
        im = math.pi
    return complex(c.real, im)


@dataclass(frozen=True, eq=False)
class GaussianFunctional:
    """F[x] = exp(-1/2 x^T K x + b^T x + c) over the labelled variables of ``layout``."""

    layout: Layout
    K: np.ndarray
    b: np.ndarray
    c: complex = 0j
    grid: TimeGrid | None = None
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.layout)
        K = np.array(self.K, dtype=complex).reshape(n, n)
        b = np.array(self.b, dtype=complex).reshape(n)
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(b)) and np.isfinite(self.c)):
            raise InvariantError("K, b and c must be finite")
        scale = 1.0 + (np.abs(K).max() if n else 0.0)
        if n and np.abs(K - K.T).max() > SYMMETRY_TOL * scale:
            raise InvariantError("K must be complex symmetric")
        K = 0.5 * (K + K.T)
        K.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", wrap_phase(self.c))
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def labels(self):
        return self.layout.labels

    @property
    def size(self) -> int:
        return len(self.layout)

    def index(self, label: VarLabel) -> int:
        return self.layout.index(label)

    def entry(self, a: VarLabel, b: VarLabel) -> complex:
        return complex(self.K[self.index(a), self.index(b)])

    def linear(self, a: VarLabel) -> complex:
        return complex(self.b[self.index(a)])

    def log_value(self, values: Mapping[VarLabel, float] | np.ndarray) -> complex:
        """Complex log of F at a full assignment of the variables."""
        x = self._assignment(values)
        return complex(-0.5 * x @ self.K @ x + self.b @ x + self.c)

    def value(self, values) -> complex:
        lv = self.log_value(values)
        if lv.real > 700:
            raise NumericRangeError("exponent too large to evaluate")
        return complex(np.exp(lv))

    def _assignment(self, values) -> np.ndarray:
        if isinstance(values, Mapping):
            x = np.zeros(self.size)
            missing = set(self.labels) - set(values)
            if missing:
                raise LabelLookupError(f"no value for labels {sorted(missing, key=repr)}")
            for lab, v in values.items():
                x[self.index(lab)] = v
            return x
        x = np.asarray(values, dtype=float).reshape(-1)
        if x.size != self.size:
            raise CompositionError("assignment length does not match the layout")
        return x

    def with_meta(self, **updates) -> "GaussianFunctional":
        meta = dict(self.meta)
        meta.update(updates)
        return GaussianFunctional(self.layout, self.K, self.b, self.c, self.grid, meta)

    def shifted(self, dc: complex) -> "GaussianFunctional":
        return GaussianFunctional(self.layout, self.K, self.b, self.c + dc, self.grid, self.meta)

    def __repr__(self):
        return f"GaussianFunctional(n={self.size}, c={self.c:.6g}, meta={self.meta})"


def constant(value_log: complex = 0.0, grid: TimeGrid | None = None) -> GaussianFunctional:
    """The constant functional exp(value_log) on an empty layout."""
    return GaussianFunctional(Layout([]), np.zeros((0, 0)), np.zeros(0), value_log, grid)


def from_terms(
    labels: Iterable[VarLabel],
    K_entries: Mapping | None = None,
    b_entries: Mapping | None = None,
    c: complex = 0.0,
    grid: TimeGrid | None = None,
    meta: Mapping | None = None,
) -> GaussianFunctional:
    """Assemble a functional from sparse (label, label) -> value entries.

    ``K_entries`` values are added symmetrically: an off-diagonal entry (a, b)
    sets both K[a, b] and K[b, a].
    """
    layout = Layout(labels)
    n = len(layout)
    K = np.zeros((n, n), dtype=complex)
    b = np.zeros(n, dtype=complex)
    for (la, lb), v in (K_entries or {}).items():
        i, j = layout.index(la), layout.index(lb)
        K[i, j] += v
        if i != j:
            K[j, i] += v
    for la, v in (b_entries or {}).items():
        b[layout.index(la)] += v
    return GaussianFunctional(layout, K, b, c, grid, meta or {})


def _merge_grids(F: GaussianFunctional, G: GaussianFunctional, shared) -> TimeGrid | None:
    if F.grid is None:
        return G.grid
    if G.grid is None or F.grid == G.grid:
        return F.grid
    for lab in shared:
        if lab.node > F.grid.n_steps or lab.node > G.grid.n_steps:
            raise CompositionError(f"label {lab!r} lies outside one of the grids")
        tf, tg = F.grid.nodes[lab.node], G.grid.nodes[lab.node]
        if abs(tf - tg) > 1e-12 * max(1.0, abs(tf)):
            raise CompositionError(f"label {lab!r} refers to different times ({tf} vs {tg})")
    return F.grid if F.grid.n_steps >= G.grid.n_steps else G.grid


def embed(F: GaussianFunctional, layout: Layout) -> tuple:
    """(K, b) of F placed into a larger layout (zeros elsewhere)."""
    n = len(layout)
    idx = np.array(layout.indices(F.labels), dtype=int)
    K = np.zeros((n, n), dtype=complex)
    b = np.zeros(n, dtype=complex)
    if idx.size:
        K[np.ix_(idx, idx)] = F.K
        b[idx] = F.b
    return K, b


def multiply(F: GaussianFunctional, G: GaussianFunctional) -> GaussianFunctional:
    """Pointwise product: exponents add on the union of the two layouts."""
    shared = set(F.labels) & set(G.labels)
    grid = _merge_grids(F, G, shared)
    layout = Layout(list(F.labels) + list(G.labels))
    KF, bF = embed(F, layout)
    KG, bG = embed(G, layout)
    meta = dict(G.meta)
    meta.update(F.meta)
    return GaussianFunctional(layout, KF + KG, bF + bG, F.c + G.c, grid, meta)


def multiply_all(*factors: GaussianFunctional) -> GaussianFunctional:
    out = factors[0]
    for f in factors[1:]:
        out = multiply(out, f)
    return out


def log_det_branch(A: np.ndarray) -> complex:
    """log det A on the branch continuously connected to the identity.

    The modulus comes from an LU factorization.  The phase is fixed by the sum
    of principal eigenvalue logarithms, which is the continuous branch whenever
    the real part of A is positive semidefinite (all eigenvalues then lie in the
    closed right half plane).
    """
    n = A.shape[0]
    if n == 0:
        return 0j
    lu, piv = sla.lu_factor(A, check_finite=False)
    d = np.diag(lu)
    if np.any(d == 0):
        raise SingularMarginalError("exactly singular block", float("inf"))
    swaps = int(np.sum(piv != np.arange(n)))
    log_abs = float(np.sum(np.log(np.abs(d))))
    phase_lu = float(np.sum(np.angle(d))) + math.pi * (swaps % 2)
    phase_ref = float(np.sum(np.angle(np.linalg.eigvals(A))))
    k = round((phase_ref - phase_lu) / (2.0 * math.pi))
    return complex(log_abs, phase_lu + 2.0 * math.pi * k)


def _check_integrable(Kvv: np.ndarray) -> None:
    re = 0.5 * (Kvv.real + Kvv.real.T)
    scale = np.abs(Kvv).max()
    lo = np.linalg.eigvalsh(re).min()
    if lo < -1e-9 * scale:
        raise DivergentIntegralError(
            f"integrand grows along a real direction (min eigenvalue of Re K = {lo:.3e})"
        )


def marginalize(F: GaussianFunctional, vars: Iterable[VarLabel], check_convergence: bool = True) -> GaussianFunctional:
    """Integrate F over ``vars`` by the Schur-complement formula."""
    vars = list(dict.fromkeys(vars))
    if not vars:
        return F
    v = np.array(F.layout.indices(vars), dtype=int)
    keep_labels = [lab for lab in F.labels if lab not in set(vars)]
    r = np.array(F.layout.indices(keep_labels), dtype=int)
    Kvv = F.K[np.ix_(v, v)]
    cond = np.linalg.cond(Kvv)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularMarginalError(
            f"cannot integrate over {len(vars)} variables: condition number {cond:.3e}", cond
        )
    if check_convergence:
        _check_integrable(Kvv)
    lu = sla.lu_factor(Kvv, check_finite=False)
    bv = F.b[v]
    Kvr = F.K[np.ix_(v, r)]
    sol_b = sla.lu_solve(lu, bv, check_finite=False)
    if r.size:
        sol_K = sla.lu_solve(lu, Kvr, check_finite=False)
        K_new = F.K[np.ix_(r, r)] - Kvr.T @ sol_K
        b_new = F.b[r] - Kvr.T @ sol_b
    else:
        K_new = np.zeros((0, 0), dtype=complex)
        b_new = np.zeros(0, dtype=complex)
    logdet = log_det_branch(Kvv)
    c_new = F.c + 0.5 * (bv @ sol_b) - 0.5 * (logdet - len(vars) * LOG_2PI)
    return GaussianFunctional(Layout(keep_labels), K_new, b_new, c_new, F.grid, F.meta)


def pin_value(F: GaussianFunctional, var: VarLabel, value: float) -> GaussianFunctional:
    """Substitute a fixed real value for one variable."""
    i = F.index(var)
    keep = [lab for lab in F.labels if lab != var]
    r = np.array(F.layout.indices(keep), dtype=int)
    s = float(value)
    K_new = F.K[np.ix_(r, r)]
    b_new = F.b[r] - s * F.K[r, i]
    c_new = F.c + F.b[i] * s - 0.5 * F.K[i, i] * s * s
    return GaussianFunctional(Layout(keep), K_new, b_new, c_new, F.grid, F.meta)


def pin_equal(F: GaussianFunctional, a: VarLabel, b: VarLabel) -> GaussianFunctional:
    """Multiply by delta(a - b) and integrate over ``b``; ``a`` survives."""
    ia = F.index(a)
    ib = F.index(b)
    if ia == ib:
        return F
    K = np.array(F.K)
    K[ia, :] += K[ib, :]
    K[:, ia] += K[:, ib]
    bb = np.array(F.b)
    bb[ia] += bb[ib]
    keep = [i for i in range(F.size) if i != ib]
    labels = [F.labels[i] for i in keep]
    return GaussianFunctional(Layout(labels), K[np.ix_(keep, keep)], bb[keep], F.c, F.grid, F.meta)


def substitute(F: GaussianFunctional, target: VarLabel, combination: Mapping[VarLabel, float]) -> GaussianFunctional:
    """Replace ``target`` by the linear combination sum_z coef_z * z."""
    it = F.index(target)
    keep = [lab for lab in F.labels if lab != target]
    layout = Layout(keep)
    P = np.zeros((F.size, len(keep)), dtype=complex)
    for j, lab in enumerate(layout.labels):
        P[F.index(lab), j] = 1.0
    for lab, coef in combination.items():
        if lab == target:
            raise PreconditionError("a variable cannot be expressed through itself")
        P[it, layout.index(lab)] += coef
    K_new = P.T @ F.K @ P
    b_new = P.T @ F.b
    return GaussianFunctional(layout, K_new, b_new, F.c, F.grid, F.meta)


def drop_free(F: GaussianFunctional, var: VarLabel, tol: float = 1e-12) -> GaussianFunctional:
    """Remove a variable the functional does not depend on."""
    i = F.index(var)
    scale = 1.0 + np.abs(F.K).max()
    if np.abs(F.K[i]).max() > tol * scale or abs(F.b[i]) > tol * scale:
        raise PreconditionError(f"functional depends on {var!r}")
    keep = [lab for lab in F.labels if lab != var]
    r = np.array(F.layout.indices(keep), dtype=int)
    return GaussianFunctional(Layout(keep), F.K[np.ix_(r, r)], F.b[r], F.c, F.grid, F.meta)


@dataclass
class DeltaFactor:
    """Result of integrating a variable that enters only linearly.

    The integral equals ``exp(log_prefactor) * delta(sum_z coeffs[z] * z)`` times
    the remaining functional; ``residual`` measures how far the variable was from
    entering purely linearly with a purely imaginary coefficient.
    """

    coeffs: dict
    residual: float
    log_prefactor: float = LOG_2PI


def fresnel_delta(F: GaussianFunctional, var: VarLabel) -> tuple:
    """Integrate out a variable with vanishing quadratic coefficient.

    Returns ``(rest, DeltaFactor)``.  ``rest`` no longer contains ``var``; the
    constant 2*pi is not yet added (it is part of the delta factor).
    """
    i = F.index(var)
    row = F.K[i]
    scale = max(np.abs(row).max(), abs(F.b[i]), 1e-300)
    others = [j for j in range(F.size) if j != i]
    re_part = np.abs(row[others].real).max() if others else 0.0
    residual = max(abs(row[i]), abs(F.b[i]), re_part) / scale
    coeffs = {}
    for j in others:
        a = -row[j].imag
        if a != 0.0:
            coeffs[F.labels[j]] = float(a)
    keep = [F.labels[j] for j in others]
    r = np.array(others, dtype=int)
    rest = GaussianFunctional(Layout(keep), F.K[np.ix_(r, r)], F.b[r], F.c, F.grid, F.meta)
    return rest, DeltaFactor(coeffs, float(residual))


def resolve_delta(F: GaussianFunctional, delta: DeltaFactor, solve_for: VarLabel) -> GaussianFunctional:
    """Integrate ``solve_for`` against the delta, substituting its root."""
    a_p = delta.coeffs[solve_for]
    combo = {lab: -a / a_p for lab, a in delta.coeffs.items() if lab != solve_for}
    G = substitute(F, solve_for, combo)
    return G.shifted(delta.log_prefactor - math.log(abs(a_p)))


FRESNEL_TOL = 1e-9


def integrate_out(F: GaussianFunctional, vars: Iterable[VarLabel], order: list | None = None) -> GaussianFunctional:
    """Integrate over ``vars``, resolving Fresnel deltas when the block is singular.

    Tries the block Schur formula first.  If the block is singular, variables
    are eliminated one at a time (in ``order``, default latest node first):
    variables with a quadratic term are integrated directly, variables that
    enter only linearly generate a delta which is resolved against another
    variable still to be integrated.
    """
    vars = list(dict.fromkeys(vars))
    try:
        return marginalize(F, vars)
    except DivergentIntegralError:
        raise
    except SingularMarginalError:
        pass
    pending = list(order) if order is not None else sorted(vars, key=lambda l: (-l.node, l.branch != KET, l.kind))
    G = F
    while pending:
        progressed = False
        for v in pending:
            i = G.index(v)
            row_scale = np.abs(G.K[i]).max()
            if row_scale == 0.0:
                raise SingularMarginalError(f"functional does not depend on {v!r}; integral diverges", float("inf"))
            if abs(G.K[i, i]) > FRESNEL_TOL * row_scale:
                G = marginalize(G, [v])
                pending.remove(v)
                progressed = True
                break
            rest, delta = fresnel_delta(G, v)
            if delta.residual > 1e-6:
                raise SingularMarginalError(f"variable {v!r} is neither Gaussian nor a pure delta", float("inf"))
            targets = [lab for lab in pending if lab != v and lab in delta.coeffs]
            if not targets:
                continue
            p = max(targets, key=lambda lab: abs(delta.coeffs[lab]))
            G = resolve_delta(rest, delta, p)
            pending.remove(v)
            pending.remove(p)
            progressed = True
            break
        if not progressed:
            raise SingularMarginalError("delta constraint cannot be resolved by the integrated variables", float("inf"))
    return G


def swap_branches(label: VarLabel) -> VarLabel:
    if label.kind == READOUT:
        return label
    return label.partner()


def relabel(F: GaussianFunctional, mapping) -> GaussianFunctional:
    """Rename variables by a function or dict (must stay injective)."""
    fn = mapping if callable(mapping) else (lambda lab: mapping.get(lab, lab))
    new_labels = [fn(lab) for lab in F.labels]
    if len(set(new_labels)) != len(new_labels):
        raise CompositionError("relabelling is not injective")
    layout = Layout(new_labels)
    perm = np.array([layout.index(lab) for lab in new_labels], dtype=int)
    n = F.size
    K = np.zeros((n, n), dtype=complex)
    b = np.zeros(n, dtype=complex)
    K[np.ix_(perm, perm)] = F.K
    b[perm] = F.b
    return GaussianFunctional(layout, K, b, F.c, F.grid, F.meta)


def hermitian_adjoint(F: GaussianFunctional) -> GaussianFunctional:
    """F*[x, xbar] with ket and bra swapped: F is Hermitian iff this equals F."""
    G = relabel(F, swap_branches)
    return GaussianFunctional(G.layout, G.K.conj(), G.b.conj(), np.conj(G.c), G.grid, G.meta)


def data_distance(F: GaussianFunctional, G: GaussianFunctional, include_constant: bool = True) -> float:
    """Max entry difference of (K, b) and of c modulo 2*pi*i, on identical layouts."""
    if F.layout != G.layout:
        raise CompositionError("layouts differ")
    d = 0.0
    if F.size:
        d = max(np.abs(F.K - G.K).max(), np.abs(F.b - G.b).max())
    if include_constant:
        d = max(d, abs(wrap_phase(F.c - G.c)))
    return float(d)


def hermitian_residual(F: GaussianFunctional) -> float:
    scale = 1.0 + (np.abs(F.K).max() if F.size else 0.0)
    return data_distance(F, hermitian_adjoint(F)) / scale


@dataclass
class PositivityReport:
    min_eig: float
    max_eig: float
    hermitian_residual: float
    passed: bool

    @property
    def pass_(self) -> bool:
        return self.passed


def positivity_sample_check(
    F: GaussianFunctional,
    ket_labels,
    bra_labels,
    n_samples: int = 64,
    seed=0,
    width: float = 1.0,
) -> PositivityReport:
    """Gram-matrix test of F as a kernel between ket and bra trajectories.

    ``ket_labels[i]`` and ``bra_labels[i]`` receive the same coordinate of each
    sample trajectory.  Q_jk = F[ket <- u_j, bra <- u_k] must be Hermitian and
    positive semidefinite.
    """
    ket_labels = list(ket_labels)
    bra_labels = list(bra_labels)
    if n_samples < 2:
        raise PreconditionError("need at least two samples")
    if len(ket_labels) != len(bra_labels):
        raise PreconditionError("ket and bra label lists must pair up")
    if set(ket_labels) & set(bra_labels) or set(F.labels) != set(ket_labels) | set(bra_labels):
        raise PreconditionError("ket and bra labels must partition the layout")
    ik = np.array(F.layout.indices(ket_labels), dtype=int)
    ib = np.array(F.layout.indices(bra_labels), dtype=int)
    rng = np.random.default_rng(seed)
    U = width * rng.standard_normal((n_samples, len(ket_labels)))
    Kkk = F.K[np.ix_(ik, ik)]
    Kkb = F.K[np.ix_(ik, ib)]
    Kbb = F.K[np.ix_(ib, ib)]
    qk = -0.5 * np.einsum("ji,il,jl->j", U, Kkk, U) + U @ F.b[ik]
    qb = -0.5 * np.einsum("ji,il,jl->j", U, Kbb, U) + U @ F.b[ib]
    logQ = qk[:, None] + qb[None, :] - U @ Kkb @ U.T + F.c
    if logQ.real.max() > 700:
        raise NumericRangeError("kernel values overflow; shift c down and retry")
    Q = np.exp(logQ)
    qmax = np.abs(Q).max()
    herm = float(np.abs(Q - Q.conj().T).max() / qmax) if qmax > 0 else 0.0
    eig = np.linalg.eigvalsh(0.5 * (Q + Q.conj().T))
    lo, hi = float(eig.min()), float(eig.max())
    passed = herm <= 1e-8 and hi > 0 and lo >= -1e-8 * hi
    return PositivityReport(lo, hi, herm, bool(passed))


def quadratic_moments(F: GaussianFunctional) -> tuple:
    """Mean and covariance of the normalized real Gaussian exp(-1/2 x^T K x + b^T x).

    K must be real symmetric positive definite up to roundoff.
    """
    K = F.K.real
    cov = np.linalg.inv(K)
    return cov @ F.b.real, cov


def total_integral(F: GaussianFunctional) -> complex:
    """Integral of F over all of its variables."""
    G = integrate_out(F, list(F.labels))
    return complex(np.exp(G.c))


__all__ = [
    "GaussianFunctional",
    "constant",
    "from_terms",
    "multiply",
    "multiply_all",
    "marginalize",
    "integrate_out",
    "pin_value",
    "pin_equal",
    "substitute",
    "fresnel_delta",
    "resolve_delta",
    "DeltaFactor",
    "drop_free",
    "relabel",
    "hermitian_adjoint",
    "hermitian_residual",
    "data_distance",
    "positivity_sample_check",
    "PositivityReport",
    "log_det_branch",
    "wrap_phase",
    "total_integral",
    "BRA",
    "KET",
]
