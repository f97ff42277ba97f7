"""Discrete-time process matrices and testers recovered from functionals that
act on complementary, interleaved time intervals."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import CompositionError, ConstancyError, DomainError, PreconditionError, ValidityError
from .gaussian import (
    LOG_2PI,
    GaussianFunctional,
    drop_free,
    fresnel_delta,
    integrate_out,
    marginalize,
    multiply,
    pin_equal,
)
from .grid import READOUT, Layout, TimeGrid, VarLabel, bra, ket
from .measurement import PositionMeasurementSpec, ReadoutRecord, build_position_measurement
from .process import CLOSED, CLModel, GaussianState, build_cl_process, build_free_action
from .properties import CheckReport

PROCESS = "process"
TESTER = "tester-element"
CONSTANCY_TOL = 1e-10


@dataclass(frozen=True)
class IntervalPartition:
    """Grid nodes t_0 < t_1 < ... splitting the grid into alternating intervals.

    [t_0, t_1] is an operation interval, [t_1, t_2] a process interval, and so
    on.  The last interval may be of either kind.
    """

    grid: TimeGrid
    cuts: tuple

    def __post_init__(self):
        cuts = tuple(int(c) for c in self.cuts)
        if len(cuts) < 2:
            raise DomainError("a partition needs at least one interval")
        if cuts[0] != 0 or cuts[-1] != self.grid.n_steps:
            raise DomainError("partition must tile the whole grid")
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise DomainError("partition nodes must be strictly increasing")
        object.__setattr__(self, "cuts", cuts)

    def intervals(self) -> list:
        return list(zip(self.cuts, self.cuts[1:]))

    def operation_intervals(self) -> list:
        return self.intervals()[0::2]

    def process_intervals(self) -> list:
        return self.intervals()[1::2]

    def slot_labels(self) -> list:
        return [ket(k) for k in self.cuts] + [bra(k) for k in self.cuts]

    def truncate(self, n_intervals: int) -> "IntervalPartition":
        """Partition made of the first ``n_intervals`` intervals."""
        cuts = self.cuts[: n_intervals + 1]
        return IntervalPartition(self.grid.truncate(cuts[-1]), cuts)


@dataclass(frozen=True, eq=False)
class DiscreteGaussianKernel:
    """Matrix elements <x_0 x_1 ...|O|xbar_0 xbar_1 ...> as a Gaussian in the slot variables."""

    functional: GaussianFunctional
    role: str
    partition: IntervalPartition
    closed_final: bool = False

    def __post_init__(self):
        if self.role not in (PROCESS, TESTER):
            raise DomainError(f"unknown role {self.role!r}")
        slots = set(self.partition.slot_labels())
        trajectory = {lab for lab in self.functional.labels if lab.kind != READOUT}
        if trajectory != slots:
            raise CompositionError("kernel variables must be exactly the partition slots")
        from .gaussian import hermitian_residual

        if not any(lab.kind == READOUT for lab in self.functional.labels):
            res = hermitian_residual(self.functional)
            if res > 1e-9:
                raise ValidityError(f"kernel is not Hermitian (residual {res:.3e})")

    @property
    def slot_labels(self) -> list:
        return [lab for lab in self.functional.labels if lab.kind != READOUT]

    @property
    def K(self):
        return self.functional.K

    @property
    def b(self):
        return self.functional.b

    @property
    def c(self):
        return self.functional.c

    def to_json(self) -> str:
        F = self.functional
        return json.dumps(
            {
                "role": self.role,
                "closed_final": self.closed_final,
                "partition": list(self.partition.cuts),
                "grid": [F.grid.t_i, F.grid.t_f, F.grid.n_steps] if F.grid is not None else None,
                "slots": [[lab.branch, lab.node, lab.kind] for lab in F.labels],
                "K_re": F.K.real.tolist(),
                "K_im": F.K.imag.tolist(),
                "b_re": F.b.real.tolist(),
                "b_im": F.b.imag.tolist(),
                "c": [F.c.real, F.c.imag],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "DiscreteGaussianKernel":
        from .grid import make_grid

        d = json.loads(text)
        grid = make_grid(*d["grid"])
        labels = [VarLabel(b, n, k) for b, n, k in d["slots"]]
        F = GaussianFunctional(
            Layout(labels),
            np.array(d["K_re"]) + 1j * np.array(d["K_im"]),
            np.array(d["b_re"]) + 1j * np.array(d["b_im"]),
            complex(*d["c"]),
            grid,
        )
        return cls(F, d["role"], IntervalPartition(grid, tuple(d["partition"])), d["closed_final"])


def _complement(partition: IntervalPartition, role: str) -> list:
    return partition.operation_intervals() if role == PROCESS else partition.process_intervals()


def _own(partition: IntervalPartition, role: str) -> list:
    return partition.process_intervals() if role == PROCESS else partition.operation_intervals()


def constancy_residual(F: GaussianFunctional, partition: IntervalPartition, role: str) -> dict:
    """Max |K row| + |b| of interior nodes of each complementary interval."""
    out = {}
    for a, b in _complement(partition, role):
        res = 0.0
        for lab in F.labels:
            if a < lab.node < b and lab.kind != READOUT:
                i = F.index(lab)
                res = max(res, float(np.abs(F.K[i]).max()), abs(F.b[i]))
        out[(a, b)] = res
    return out


def reconstruct_discrete(F: GaussianFunctional, partition: IntervalPartition, role: str = PROCESS) -> DiscreteGaussianKernel:
    """Integrate the interior nodes of the functional's own intervals, keeping the slots."""
    if F.grid is not None and F.grid != partition.grid:
        raise CompositionError("functional and partition use different grids")
    for interval, res in constancy_residual(F, partition, role).items():
        if res > CONSTANCY_TOL:
            raise ConstancyError(f"functional is not constant on interval {interval} (residual {res:.3e})")
    slots = set(partition.slot_labels())
    interior = [lab for lab in F.labels if lab.kind != READOUT and lab not in slots]
    G = integrate_out(F, interior) if interior else F
    # slots the functional never touches enter with zero coefficients
    missing = [lab for lab in partition.slot_labels() if lab not in G.layout]
    if missing:
        layout = Layout(list(G.labels) + missing)
        from .gaussian import embed

        K, b = embed(G, layout)
        G = GaussianFunctional(layout, K, b, G.c, partition.grid, G.meta)
    closed = role == PROCESS
    return DiscreteGaussianKernel(G.with_meta(role=role), role, partition, closed)


def build_interleaved_process(
    model: CLModel, state: GaussianState | None, partition: IntervalPartition, boundary: str = CLOSED
) -> GaussianFunctional:
    """CL process that acts only on the process intervals of the partition."""
    return build_cl_process(model, partition.grid, state, boundary, partition.process_intervals())


def build_interleaved_tester(
    model: CLModel, spec: PositionMeasurementSpec, partition: IntervalPartition, record: ReadoutRecord | None = None
) -> GaussianFunctional:
    """Free evolution plus position measurement on the operation intervals."""
    ops = partition.operation_intervals()
    free = build_free_action(model, partition.grid, ops)
    meas = build_position_measurement(spec, record, intervals=ops)
    return multiply(free, meas).with_meta(intervals=ops)


def marginalize_records(M: DiscreteGaussianKernel) -> DiscreteGaussianKernel:
    """Sum of the tester elements over all records."""
    records = [lab for lab in M.functional.labels if lab.kind == READOUT]
    return DiscreteGaussianKernel(marginalize(M.functional, records), M.role, M.partition, M.closed_final)


def discrete_born(W: DiscreteGaussianKernel, M: DiscreteGaussianKernel) -> float:
    """Trace pairing of a process kernel with a tester element."""
    if W.role != PROCESS or M.role != TESTER:
        raise CompositionError("need a process kernel and a tester element")
    if W.slot_labels != M.slot_labels or W.partition.cuts != M.partition.cuts:
        raise CompositionError("process and tester slots do not match")
    if any(lab.kind == READOUT for lab in M.functional.labels):
        raise PreconditionError("tester element still carries free record labels")
    F = multiply(W.functional, M.functional)
    last = W.partition.cuts[-1]
    if W.closed_final:
        F = pin_equal(F, ket(last), bra(last))
    G = integrate_out(F, list(F.labels))
    value = complex(np.exp(G.c))
    if abs(value.imag) > 1e-8 * max(abs(value.real), 1e-300) or value.real < -1e-10:
        raise ValidityError(f"pairing is not a probability: {value}")
    return float(value.real)


def truncated_process_kernels(model: CLModel, state: GaussianState, partition: IntervalPartition) -> dict:
    """Reconstructions of the process cut at the end of each process interval but the last.

    Keys are the last retained node; t_0 maps to the bare initial state.
    """
    out = {partition.cuts[0]: state.functional(partition.cuts[0])}
    for _, end in partition.process_intervals()[:-1]:
        cuts = partition.cuts[: partition.cuts.index(end) + 1]
        sub = IntervalPartition(partition.grid.truncate(end), cuts)
        kernel = None if model.kernel is None else model.kernel.truncate(end)
        W = build_interleaved_process(CLModel(model.mass, model.omega0, kernel), state, sub)
        out[end] = reconstruct_discrete(W, sub, PROCESS).functional
    return out


def discrete_causality_check(W: DiscreteGaussianKernel, shorter_kernels: dict | None = None, threshold: float = 1e-7) -> CheckReport:
    """Trace the last output, find an identity on the previous input, and iterate.

    Each level closes the end of a process interval, integrates the merged
    variable (which must produce delta(x - xbar) on the interval start), drops
    that input (which must then be free) and compares the remainder with the
    corresponding entry of ``shorter_kernels`` when given.  The last level
    integrates the bare initial state, which must have unit trace.
    """
    details = {"levels": []}
    if W.role != PROCESS:
        raise PreconditionError("causality applies to process kernels")
    if not W.closed_final:
        details["final_identity"] = False
        return CheckReport("discrete-causality", 1.0, threshold, details)
    G = W.functional
    scale = 1.0 + np.abs(G.K).max()
    # slots after the last process interval are not touched by the process
    procs = W.partition.process_intervals()
    last_end = procs[-1][1] if procs else 0
    for k in W.partition.cuts:
        if k > last_end:
            for lab in (ket(k), bra(k)):
                G = drop_free(G, lab)
    worst = 0.0
    for a, b in reversed(procs):
        G = pin_equal(G, ket(b), bra(b))
        rest, delta = fresnel_delta(G, ket(b))
        alpha = delta.coeffs.get(ket(a), 0.0)
        stray = max((abs(v) for lab, v in delta.coeffs.items() if lab not in (ket(a), bra(a))), default=0.0)
        if alpha == 0.0:
            details["levels"].append({"node": b, "structural": 1.0})
            return CheckReport("discrete-causality", 1.0, threshold, details)
        structural = max(delta.residual, abs(alpha + delta.coeffs.get(bra(a), 0.0)) / abs(alpha), stray / abs(alpha))
        G = pin_equal(rest.shifted(LOG_2PI - math.log(abs(alpha))), ket(a), bra(a))
        i = G.index(ket(a))
        free_res = float(max(np.abs(G.K[i]).max(), abs(G.b[i])) / scale)
        level = {"node": b, "structural": structural, "input_dependence": free_res}
        if free_res > 1e-6:
            details["levels"].append(level)
            return CheckReport("discrete-causality", max(free_res, structural, 1.0), threshold, details)
        G = _drop_zero(G, ket(a))
        cmp_res = 0.0
        prev_end = max((lab.node for lab in G.labels), default=0)
        if shorter_kernels is not None and prev_end in shorter_kernels:
            ref = shorter_kernels[prev_end]
            if ref.layout != G.layout:
                raise CompositionError(f"shorter kernel at node {prev_end} has different slots")
            cmp_res = float(max(np.abs(ref.K - G.K).max(), np.abs(ref.b - G.b).max()) / scale)
            cmp_res = max(cmp_res, abs(complex(ref.c - G.c)))
        level["comparison"] = cmp_res
        details["levels"].append(level)
        worst = max(worst, structural, free_res, cmp_res)
    first = W.partition.cuts[0]
    G = pin_equal(G, ket(first), bra(first))
    if np.any(G.K) or np.any(G.b):
        # initial state present: it must have unit trace
        G = marginalize(G, [ket(first)])
        trace_res = abs(complex(np.exp(G.c)) - 1.0)
    else:
        # open past: what remains must be the identity
        trace_res = abs(complex(np.exp(G.c)) - 1.0)
    details["initial_trace_residual"] = trace_res
    worst = max(worst, trace_res)
    return CheckReport("discrete-causality", worst, threshold, details)


def _drop_zero(G: GaussianFunctional, lab: VarLabel) -> GaussianFunctional:
    if lab not in G.layout:
        return G
    keep = [l for l in G.labels if l != lab]
    r = np.array(G.layout.indices(keep), dtype=int)
    return GaussianFunctional(Layout(keep), G.K[np.ix_(r, r)], G.b[r], G.c, G.grid, G.meta)


def discrete_markov_residual(W: DiscreteGaussianKernel) -> float:
    """Largest coupling between slots of different process intervals."""
    procs = W.partition.process_intervals()
    F = W.functional
    worst = 0.0
    for i, (a, b) in enumerate(procs):
        for c, d in procs[i + 1 :]:
            ia = [F.index(lab) for lab in F.labels if a <= lab.node <= b]
            ib = [F.index(lab) for lab in F.labels if c <= lab.node <= d]
            if ia and ib:
                worst = max(worst, float(np.abs(F.K[np.ix_(ia, ib)]).max()))
    return worst


__all__ = [
    "IntervalPartition",
    "DiscreteGaussianKernel",
    "reconstruct_discrete",
    "build_interleaved_process",
    "build_interleaved_tester",
    "discrete_born",
    "discrete_causality_check",
    "truncated_process_kernels",
    "marginalize_records",
    "discrete_markov_residual",
    "constancy_residual",
    "PROCESS",
    "TESTER",
]
