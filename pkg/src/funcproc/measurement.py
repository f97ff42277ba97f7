"""Operation functionals: continuous weak position measurement and Gaussian Kraus functionals."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CompositionError, DivergentIntegralError, DomainError, InvariantError
from .gaussian import GaussianFunctional, from_terms, marginalize, pin_equal
from .grid import TimeGrid, bra, ket, make_grid, readout
from .process import interval_weights


@dataclass(frozen=True, eq=False)
class ReadoutRecord:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size != self.grid.n_steps + 1:
            raise InvariantError(f"record has {v.size} values, grid has {self.grid.n_steps + 1} nodes")
        if not np.all(np.isfinite(v)):
            raise InvariantError("record values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def write_record_csv(record: ReadoutRecord, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "r"])
        for t, r in zip(record.grid.nodes, record.values):
            w.writerow([repr(float(t)), repr(float(r))])


def read_record_csv(path, grid: TimeGrid | None = None) -> ReadoutRecord:
    """Read a (t, r) record.  Without a grid, the grid is inferred from the times."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"t", "r"} <= set(reader.fieldnames):
            raise DomainError("record file needs columns t,r")
        rows = [(float(row["t"]), float(row["r"])) for row in reader]
    if len(rows) < 2:
        raise DomainError("record needs at least two samples")
    times = np.array([t for t, _ in rows])
    if grid is None:
        grid = make_grid(times[0], times[-1], len(rows) - 1)
    if times.size != grid.n_steps + 1 or np.abs(times - grid.nodes).max() > 1e-9 * max(1.0, np.abs(grid.nodes).max()):
        raise CompositionError("record times do not match the grid nodes")
    return ReadoutRecord(grid, np.array([r for _, r in rows]))


@dataclass(frozen=True)
class PositionMeasurementSpec:
    tau_m: float
    grid: TimeGrid

    def __post_init__(self):
        if not (self.tau_m > 0 and math.isfinite(self.tau_m)):
            raise InvariantError("tau_m must be positive and finite")


def _measurement_strengths(spec: PositionMeasurementSpec, node_weights) -> np.ndarray:
    w = spec.grid.trapezoid_weights() if node_weights is None else np.asarray(node_weights, dtype=float)
    if w.shape != (spec.grid.n_steps + 1,) or np.any(w < 0):
        raise DomainError("node weights must be non-negative, one per node")
    return spec.grid.dt * w / (4.0 * spec.tau_m)


def build_position_measurement(
    spec: PositionMeasurementSpec,
    record: ReadoutRecord | None = None,
    node_weights=None,
    intervals=None,
    normalized: bool = True,
) -> GaussianFunctional:
    """exp(-1/(4 tau_m) sum_k dt w_k [(r_k - x_k)^2 + (r_k - xbar_k)^2]).

    Without a record, r_k stay free as readout labels.  ``normalized`` adds
    1/2 log(2 a_k / pi) per node (a_k = dt w_k / (4 tau_m)) so that the record
    integral of M on the diagonal x = xbar is one.  ``intervals`` or
    ``node_weights`` replace the trapezoid weights (nodes of weight zero are
    not measured).
    """
    if record is not None and record.grid != spec.grid:
        raise CompositionError("record grid differs from the measurement grid")
    if intervals is not None:
        node_weights = interval_weights(spec.grid, intervals)
    a = _measurement_strengths(spec, node_weights)
    nodes = [k for k in range(spec.grid.n_steps + 1) if a[k] > 0]
    K, lin = {}, {}
    c = 0.0
    labels = []
    for k in nodes:
        x, xb = ket(k), bra(k)
        labels += [x, xb]
        K[(x, x)] = 2 * a[k]
        K[(xb, xb)] = 2 * a[k]
        if normalized:
            c += 0.5 * math.log(2 * a[k] / math.pi)
        if record is None:
            r = readout(k)
            labels.append(r)
            K[(r, r)] = 4 * a[k]
            K[(x, r)] = -2 * a[k]
            K[(xb, r)] = -2 * a[k]
        else:
            rv = record.values[k]
            lin[x] = 2 * a[k] * rv
            lin[xb] = 2 * a[k] * rv
            c -= 2 * a[k] * rv * rv
    return from_terms(labels, K, lin, c, spec.grid, {"tau_m": spec.tau_m, "symbolic": record is None})


@dataclass(frozen=True, eq=False)
class KrausSpec:
    """Per-node generator H(x) = k2 x^2 + k1 x + k0 with complex coefficients.

    ``weights`` are the dimensionless quadrature weights (default trapezoid);
    nodes with weight zero carry no generator.
    """

    grid: TimeGrid
    k2: np.ndarray
    k1: np.ndarray
    k0: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        n = self.grid.n_steps + 1
        for name in ("k2", "k1", "k0"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=complex), (n,)).copy()
            if not np.all(np.isfinite(v)):
                raise InvariantError(f"{name} must be finite")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        w = self.grid.trapezoid_weights() if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != (n,):
            raise InvariantError("one weight per node required")
        object.__setattr__(self, "weights", w)


def build_kraus_functional(spec: KrausSpec) -> GaussianFunctional:
    """K[x] K*[xbar]: exp(-i sum dt w H(x_k)) on the ket branch, conjugate on the bra branch."""
    dt = spec.grid.dt
    K, lin, labels = {}, {}, []
    c = 0j
    for k in range(spec.grid.n_steps + 1):
        wk = dt * spec.weights[k]
        if wk == 0.0:
            continue
        x, xb = ket(k), bra(k)
        labels += [x, xb]
        K[(x, x)] = 2j * wk * spec.k2[k]
        K[(xb, xb)] = np.conj(K[(x, x)])
        lin[x] = -1j * wk * spec.k1[k]
        lin[xb] = np.conj(lin[x])
        c += -1j * wk * spec.k0[k] + np.conj(-1j * wk * spec.k0[k])
    return from_terms(labels, K, lin, c, spec.grid, {"kraus": True})


def position_kraus_spec(spec: PositionMeasurementSpec, record: ReadoutRecord, node_weights=None) -> KrausSpec:
    """Generator -i (r - x)^2 / (4 tau_m), plus the constant that normalizes the record law."""
    grid = spec.grid
    w = grid.trapezoid_weights() if node_weights is None else np.asarray(node_weights, dtype=float)
    a = _measurement_strengths(spec, w)
    r = record.values
    s = -1j / (4.0 * spec.tau_m)
    k0 = np.zeros(grid.n_steps + 1, dtype=complex)
    mask = w > 0
    k0[mask] = s * r[mask] ** 2 + 1j * 0.25 * np.log(2 * a[mask] / math.pi) / (grid.dt * w[mask])
    return KrausSpec(grid, np.full(grid.n_steps + 1, s), -2 * s * r, k0, w)


@dataclass(frozen=True, eq=False)
class RecordKrausSpec:
    """Generator with a free record: H(x, r) = h_xx x^2 + h_xr x r + h_rr r^2 + h_x x + h_r r + h_0."""

    grid: TimeGrid
    h_xx: np.ndarray
    h_xr: np.ndarray
    h_rr: np.ndarray
    h_x: np.ndarray = 0.0
    h_r: np.ndarray = 0.0
    h_0: np.ndarray = 0.0

    def __post_init__(self):
        n = self.grid.n_steps + 1
        for name in ("h_xx", "h_xr", "h_rr", "h_x", "h_r", "h_0"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=complex), (n,)).copy()
            if not np.all(np.isfinite(v)):
                raise InvariantError(f"{name} must be finite")
            object.__setattr__(self, name, v)

    @classmethod
    def from_position(cls, spec: PositionMeasurementSpec) -> "RecordKrausSpec":
        n = spec.grid.n_steps + 1
        s = -1j / (4.0 * spec.tau_m)
        a = _measurement_strengths(spec, None)
        h0 = 1j * 0.25 * np.log(2 * a / math.pi) / (spec.grid.dt * spec.grid.trapezoid_weights())
        return cls(spec.grid, np.full(n, s), np.full(n, -2 * s), np.full(n, s), 0.0, 0.0, h0)


def build_record_kraus_functional(spec: RecordKrausSpec) -> GaussianFunctional:
    """K_r[x] K_r*[xbar] with the record r_k left as shared readout labels."""
    dt = spec.grid.dt
    w = spec.grid.trapezoid_weights()
    K, lin, labels = {}, {}, []
    c = 0j
    for k in range(spec.grid.n_steps + 1):
        wk = dt * w[k]
        x, xb, r = ket(k), bra(k), readout(k)
        labels += [x, xb, r]
        # ket exponent -i wk H(x, r), bra exponent +i wk H*(xbar, r)
        K[(x, x)] = 2j * wk * spec.h_xx[k]
        K[(xb, xb)] = np.conj(K[(x, x)])
        K[(x, r)] = 1j * wk * spec.h_xr[k]
        K[(xb, r)] = np.conj(K[(x, r)])
        K[(r, r)] = 2j * wk * spec.h_rr[k] + np.conj(2j * wk * spec.h_rr[k])
        lin[x] = -1j * wk * spec.h_x[k]
        lin[xb] = np.conj(lin[x])
        lin[r] = -1j * wk * spec.h_r[k] + np.conj(-1j * wk * spec.h_r[k])
        c += -1j * wk * spec.h_0[k] + np.conj(-1j * wk * spec.h_0[k])
    return from_terms(labels, K, lin, c, spec.grid, {"kraus": True, "symbolic": True})


@dataclass
class KrausNormalizationReport:
    residual: float
    passed: bool
    log_constant: complex
    details: dict = field(default_factory=dict)

    @property
    def pass_(self) -> bool:
        return self.passed


def check_kraus_normalization(spec, threshold: float = 1e-10) -> KrausNormalizationReport:
    """Integrate K_r^dagger K_r over the record on the diagonal x = xbar.

    The result must not depend on x.  For position measurements, whose
    normalization is built in, the constant must also be one.
    """
    if isinstance(spec, PositionMeasurementSpec):
        F = build_position_measurement(spec)
        expect_unit = True
        grid = spec.grid
    elif isinstance(spec, RecordKrausSpec):
        F = build_record_kraus_functional(spec)
        expect_unit = False
        grid = spec.grid
    else:
        raise DomainError("expected a PositionMeasurementSpec or RecordKrausSpec")
    for k in range(grid.n_steps + 1):
        if ket(k) in F.layout:
            F = pin_equal(F, ket(k), bra(k))
    records = [lab for lab in F.labels if lab.kind == "readout"]
    try:
        G = marginalize(F, records)
    except DivergentIntegralError:
        raise
    kres = float(np.abs(G.K).max()) if G.size else 0.0
    bres = float(np.abs(G.b).max()) if G.size else 0.0
    residual = max(kres, bres)
    if expect_unit:
        residual = max(residual, abs(G.c))
    return KrausNormalizationReport(residual, residual <= threshold, G.c, {"K_residual": kres, "b_residual": bres})


__all__ = [
    "ReadoutRecord",
    "PositionMeasurementSpec",
    "KrausSpec",
    "RecordKrausSpec",
    "build_position_measurement",
    "build_kraus_functional",
    "build_record_kraus_functional",
    "position_kraus_spec",
    "check_kraus_normalization",
    "KrausNormalizationReport",
    "read_record_csv",
    "write_record_csv",
]
