"""Uniform time grids and labels for doubled (ket/bra) trajectory variables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import DomainError, LabelLookupError

KET = "ket"
BRA = "bra"
BRANCHES = (KET, BRA)

TRAJECTORY = "trajectory"
BOUNDARY_INITIAL = "boundary-initial"
BOUNDARY_FINAL = "boundary-final"
READOUT = "readout"
KINDS = (TRAJECTORY, BOUNDARY_INITIAL, BOUNDARY_FINAL, READOUT)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of ``n_steps + 1`` nodes on ``[t_i, t_f]``."""

    t_i: float
    t_f: float
    n_steps: int
    nodes: np.ndarray = field(repr=False, compare=False)

    @property
    def dt(self) -> float:
        return (self.t_f - self.t_i) / self.n_steps

    def __eq__(self, other):
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return (self.t_i, self.t_f, self.n_steps) == (other.t_i, other.t_f, other.n_steps)

    def __hash__(self):
        return hash((self.t_i, self.t_f, self.n_steps))

    def trapezoid_weights(self) -> np.ndarray:
        """Dimensionless trapezoid weights (1/2 at the two endpoints)."""
        w = np.ones(self.n_steps + 1)
        w[0] = w[-1] = 0.5
        return w

    def truncate(self, last_node: int) -> "TimeGrid":
        """Sub-grid covering nodes ``0..last_node`` with the same spacing."""
        if not 1 <= last_node <= self.n_steps:
            raise DomainError(f"cannot truncate grid at node {last_node}")
        return make_grid(self.t_i, float(self.nodes[last_node]), last_node)

    def node_of(self, t: float) -> int:
        """Index of the node at time ``t``; raises if ``t`` is not a node."""
        k = int(round((t - self.t_i) / self.dt))
        if k < 0 or k > self.n_steps or abs(self.nodes[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise DomainError(f"time {t} is not a grid node")
        return k


def make_grid(t_i: float, t_f: float, n_steps: int) -> TimeGrid:
    """Build a uniform grid; rejects non-finite input, empty intervals, n_steps < 1."""
    if not (math.isfinite(t_i) and math.isfinite(t_f)):
        raise DomainError("grid endpoints must be finite")
    if isinstance(n_steps, bool) or int(n_steps) != n_steps:
        raise DomainError("n_steps must be an integer")
    n_steps = int(n_steps)
    if n_steps < 1:
        raise DomainError("n_steps must be at least 1")
    if not t_f > t_i:
        raise DomainError(f"need t_f > t_i, got t_i={t_i}, t_f={t_f}")
    dt = (t_f - t_i) / n_steps
    nodes = t_i + dt * np.arange(n_steps + 1)
    nodes[-1] = t_f
    nodes.setflags(write=False)
    return TimeGrid(float(t_i), float(t_f), n_steps, nodes)


@dataclass(frozen=True)
class VarLabel:
    """One real variable: branch (ket/bra), node index and kind."""

    branch: str
    node: int
    kind: str = TRAJECTORY

    def __post_init__(self):
        if self.branch not in BRANCHES:
            raise DomainError(f"unknown branch {self.branch!r}")
        if self.kind not in KINDS:
            raise DomainError(f"unknown kind {self.kind!r}")
        if int(self.node) != self.node or self.node < 0:
            raise DomainError(f"node must be a non-negative integer, got {self.node}")

    def partner(self) -> "VarLabel":
        """Same slot on the opposite branch."""
        return VarLabel(BRA if self.branch == KET else KET, self.node, self.kind)

    def __repr__(self):
        tag = "" if self.kind == TRAJECTORY else f",{self.kind}"
        return f"{self.branch}[{self.node}{tag}]"


def ket(node: int, kind: str = TRAJECTORY) -> VarLabel:
    return VarLabel(KET, node, kind)


def bra(node: int, kind: str = TRAJECTORY) -> VarLabel:
    return VarLabel(BRA, node, kind)


def readout(node: int) -> VarLabel:
    return VarLabel(KET, node, READOUT)


_GROUP = {
    (TRAJECTORY, KET): 0,
    (TRAJECTORY, BRA): 1,
    (BOUNDARY_INITIAL, KET): 2,
    (BOUNDARY_INITIAL, BRA): 3,
    (BOUNDARY_FINAL, KET): 4,
    (BOUNDARY_FINAL, BRA): 5,
    (READOUT, KET): 6,
    (READOUT, BRA): 7,
}


def label_sort_key(label: VarLabel):
    return (_GROUP[(label.kind, label.branch)], label.node)


class Layout:
    """Ordered set of labels: ket trajectory, bra trajectory, boundary, readout."""

    __slots__ = ("labels", "_index")

    def __init__(self, labels: Iterable[VarLabel]):
        labels = sorted(set(labels), key=label_sort_key)
        self.labels = tuple(labels)
        self._index = {lab: i for i, lab in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def __contains__(self, label):
        return label in self._index

    def __eq__(self, other):
        return isinstance(other, Layout) and self.labels == other.labels

    def __hash__(self):
        return hash(self.labels)

    def __repr__(self):
        return f"Layout({list(self.labels)})"

    def index(self, label: VarLabel) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise LabelLookupError(f"label {label!r} is not in the layout") from None

    def indices(self, labels: Iterable[VarLabel]) -> list:
        return [self.index(lab) for lab in labels]

    def label_at(self, i: int) -> VarLabel:
        return self.labels[i]

    def select(self, predicate) -> list:
        return [lab for lab in self.labels if predicate(lab)]


def flat_index(label: VarLabel, layout: Layout) -> int:
    """0-based position of ``label`` in ``layout``."""
    return layout.index(label)


def trajectory_layout(grid: TimeGrid, nodes: Iterable[int] | None = None) -> Layout:
    """Ket and bra trajectory labels for the given nodes (default: all)."""
    if nodes is None:
        nodes = range(grid.n_steps + 1)
    nodes = list(nodes)
    return Layout([ket(k) for k in nodes] + [bra(k) for k in nodes])
