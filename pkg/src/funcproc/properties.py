"""Numerical checks of causality, trace preservation, normalization and divisibility."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .gaussian import (
    LOG_2PI,
    GaussianFunctional,
    fresnel_delta,
    integrate_out,
    multiply,
    pin_equal,
)
from .grid import Layout, bra, ket
from .process import CLOSED, OPEN_BOUNDARY, CLModel, build_cl_process

EXACT_THRESHOLD = 1e-8
MEMORY_THRESHOLD = 1e-3
STRUCTURE_TOL = 1e-6


@dataclass
class CheckReport:
    name: str
    residual: float
    threshold: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.residual <= self.threshold)

    @property
    def pass_(self) -> bool:
        return self.passed

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, complex):
                return {"re": v.real, "im": v.imag}
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v

        return {
            "name": self.name,
            "residual": float(self.residual),
            "threshold": float(self.threshold),
            "pass": self.passed,
            "details": {k: clean(v) for k, v in self.details.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class _Elimination:
    functional: GaussianFunctional
    structural: float
    levels: list
    broken_at: int | None = None


def _close_and_eliminate(F: GaussianFunctional, first: int, last: int) -> _Elimination:
    """Identify ket/bra at ``first`` and walk the identification down to ``last``.

    At each level the merged variable must have no quadratic term and a linear
    row proportional to (x - xbar) of the previous node.  Integrating it gives a
    delta that identifies the previous pair.
    """
    G = pin_equal(F, ket(first), bra(first))
    levels = []
    structural = 0.0
    for k in range(first, last, -1):
        v = ket(k)
        rest, delta = fresnel_delta(G, v)
        a = delta.coeffs.get(ket(k - 1), 0.0)
        a_bar = delta.coeffs.get(bra(k - 1), 0.0)
        stray = [abs(c) for lab, c in delta.coeffs.items() if lab not in (ket(k - 1), bra(k - 1))]
        scale = max(abs(a), 1e-300)
        level_res = max(delta.residual, abs(a + a_bar) / scale, max(stray, default=0.0) / scale)
        if a == 0.0:
            level_res = max(level_res, 1.0)
        levels.append(level_res)
        structural = max(structural, level_res)
        if level_res > STRUCTURE_TOL:
            return _Elimination(G, structural, levels, k)
        G = rest.shifted(LOG_2PI - math.log(abs(a)))
        G = pin_equal(G, ket(k - 1), bra(k - 1))
    return _Elimination(G, structural, levels)


def _nodes(F: GaussianFunctional) -> list:
    return sorted({lab.node for lab in F.labels})


def _truncated_reference(W: GaussianFunctional, node: int) -> GaussianFunctional:
    model: CLModel | None = W.meta.get("model")
    if model is None or W.grid is None:
        raise PreconditionError("functional carries no build recipe; pass a reference builder")
    sub = W.grid.truncate(node)
    kernel = None if model.kernel is None else model.kernel.truncate(node)
    intervals = W.meta.get("intervals")
    if intervals is not None:
        intervals = [(a, min(b, node)) for a, b in intervals if a < node]
    sub_model = CLModel(model.mass, model.omega0, kernel)
    return build_cl_process(sub_model, sub, W.meta.get("state"), W.meta.get("boundary", CLOSED), intervals)


def check_causality(W: GaussianFunctional, t_prime_node: int, reference=None, threshold: float = EXACT_THRESHOLD) -> CheckReport:
    """Tracing the future beyond t' must leave the truncated process closed at t'.

    ``reference(node)`` builds the truncated functional; by default it is rebuilt
    from the recipe stored in ``W.meta``.
    """
    N = max(_nodes(W))
    if not 0 < t_prime_node < N:
        raise PreconditionError(f"t' must be an interior node, got {t_prime_node}")
    elim = _close_and_eliminate(W, N, t_prime_node)
    details = {"structural_residual": elim.structural, "levels": elim.levels}
    if elim.broken_at is not None:
        details["broken_at_node"] = elim.broken_at
        return CheckReport("causality", max(elim.structural, 1.0), threshold, details)
    past = elim.functional
    ref = reference(t_prime_node) if reference is not None else _truncated_reference(W, t_prime_node)
    ref = pin_equal(ref, ket(t_prime_node), bra(t_prime_node))
    if ref.layout != past.layout:
        details["layout_mismatch"] = True
        return CheckReport("causality", 1.0, threshold, details)
    scale = 1.0 + np.abs(ref.K).max()
    dK = float(np.abs(past.K - ref.K).max() / scale)
    db = float(np.abs(past.b - ref.b).max() / scale)
    details.update(K_residual=dK, b_residual=db, constant_difference=complex(past.c - ref.c))
    return CheckReport("causality", max(dK, db, elim.structural), threshold, details)


def check_trace_preserving(W_open: GaussianFunctional, threshold: float = 1e-9) -> CheckReport:
    """Closing the final node and tracing everything must leave exactly delta(x_i - xbar_i)."""
    if W_open.meta.get("boundary", OPEN_BOUNDARY) != OPEN_BOUNDARY:
        raise PreconditionError("trace preservation is checked on open-boundary functionals")
    nodes = _nodes(W_open)
    first, last = max(nodes), min(nodes)
    elim = _close_and_eliminate(W_open, first, last)
    details = {"structural_residual": elim.structural, "levels": elim.levels}
    if elim.broken_at is not None:
        details["broken_at_node"] = elim.broken_at
        return CheckReport("trace-preserving", max(elim.structural, 1.0), threshold, details)
    G = elim.functional
    kres = float(np.abs(G.K).max()) if G.size else 0.0
    bres = float(np.abs(G.b).max()) if G.size else 0.0
    cres = abs(complex(np.exp(G.c)) - 1.0)
    details.update(K_residual=kres, b_residual=bres, constant_residual=cres)
    return CheckReport("trace-preserving", max(kres, bres, cres, elim.structural), threshold, details)


def check_normalization(W: GaussianFunctional, operation: GaussianFunctional | None = None, threshold: float = EXACT_THRESHOLD) -> CheckReport:
    """|integral of W (times an operation family, records included) - 1| with the final node closed."""
    if W.meta.get("boundary") != CLOSED:
        raise PreconditionError("normalization is checked on closed-boundary functionals")
    F = W if operation is None else multiply(W, operation)
    N = W.meta.get("final_node", max(_nodes(W)))
    F = pin_equal(F, ket(N), bra(N))
    G = integrate_out(F, list(F.labels))
    value = complex(np.exp(G.c))
    return CheckReport("normalization", abs(value - 1.0), threshold, {"value": value})


def _segment_factor(W: GaussianFunctional, lo: int, hi: int, split: int) -> GaussianFunctional:
    """Restriction of W to nodes lo..hi with the cut-node block halved."""
    labels = [lab for lab in W.labels if lo <= lab.node <= hi]
    idx = np.array(W.layout.indices(labels), dtype=int)
    K = np.array(W.K[np.ix_(idx, idx)])
    b = np.array(W.b[idx])
    for i, la in enumerate(labels):
        if la.node == split:
            b[i] *= 0.5
            for j, lb in enumerate(labels):
                if lb.node == split:
                    K[i, j] *= 0.5
    N = max(_nodes(W))
    c = W.c * (hi - lo) / N
    return GaussianFunctional(Layout(labels), K, b, c, W.grid, {"boundary": OPEN_BOUNDARY})


def check_divisibility(W_open: GaussianFunctional, t_prime_node: int, threshold: float = MEMORY_THRESHOLD) -> CheckReport:
    """Cross couplings between strictly-past and strictly-future interior nodes."""
    if W_open.meta.get("boundary", OPEN_BOUNDARY) != OPEN_BOUNDARY:
        raise PreconditionError("divisibility is checked on open-boundary functionals")
    nodes = _nodes(W_open)
    first, last = min(nodes), max(nodes)
    if not first < t_prime_node < last:
        raise PreconditionError(f"t' must be an interior node, got {t_prime_node}")
    past = [i for i, lab in enumerate(W_open.labels) if first < lab.node < t_prime_node]
    future = [i for i, lab in enumerate(W_open.labels) if t_prime_node < lab.node < last]
    scale = float(np.abs(W_open.K).max())
    cross = float(np.abs(W_open.K[np.ix_(past, future)]).max()) if past and future else 0.0
    residual = cross / scale if scale > 0 else 0.0
    details = {"cross_block_max": cross, "kernel_max": scale}
    if residual <= threshold:
        for name, (lo, hi) in (("past", (first, t_prime_node)), ("future", (t_prime_node, last))):
            factor = _segment_factor(W_open, lo, hi, t_prime_node)
            details[f"{name}_factor_trace_residual"] = check_trace_preserving(factor).residual
    return CheckReport("divisibility", residual, threshold, details)


__all__ = [
    "CheckReport",
    "check_causality",
    "check_trace_preserving",
    "check_normalization",
    "check_divisibility",
]
