"""Experiment configuration: parsing, validation and construction of model objects."""

from __future__ import annotations

import cmath
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .grid import TimeGrid, make_grid
from .measurement import PositionMeasurementSpec
from .process import (
    CLModel,
    GaussianState,
    coherent_state,
    exponential_kernel,
    ground_state,
    read_kernel_csv,
    single_mode_bath_kernel,
)

TASK_KINDS = (
    "law-direct",
    "law-saddle",
    "covariance",
    "sample",
    "conditional",
    "projective-limit",
    "check",
    "recover",
    "oracle",
)
CHECK_KINDS = ("causality", "trace", "normalization", "divisibility", "positivity", "kraus")
KERNEL_TYPES = ("zero", "exp", "bath", "file")


def parse_complex(value, where: str) -> complex:
    """Accepts numbers, strings such as "1-0.5j", or [re, im] pairs."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got a boolean")
    z = None
    if isinstance(value, (int, float, complex)):
        z = complex(value)
    elif isinstance(value, str):
        try:
            z = complex(value.replace(" ", ""))
        except ValueError:
            pass
    elif isinstance(value, (list, tuple)) and len(value) == 2:
        z = complex(_number(value[0], where), _number(value[1], where))
    if z is None:
        raise ConfigError(f"{where}: cannot read {value!r} as a complex number")
    if not cmath.isfinite(z):
        raise ConfigError(f"{where}: value must be finite")
    return z


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{where}: expected a real number, got {value!r}") from None
        else:
            raise ConfigError(f"{where}: expected a real number, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"{where}: value must be finite")
    return float(value)


def _mapping(value, where: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected a mapping")
    return value


@dataclass(frozen=True)
class GridConfig:
    t_i: float
    t_f: float
    n_steps: int

    def build(self) -> TimeGrid:
        return make_grid(self.t_i, self.t_f, self.n_steps)


@dataclass(frozen=True)
class KernelConfig:
    type: str = "zero"
    eta: float = 0.0
    gamma: float = 0.0
    structure: tuple | None = None
    coupling: float = 0.0
    omega: float = 1.0
    path: Path | None = None


@dataclass(frozen=True)
class ModelConfig:
    m: float = 1.0
    omega0: float = 1.0
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def build(self, grid: TimeGrid) -> CLModel:
        k = self.kernel
        if k.type == "zero":
            kernel = None
        elif k.type == "exp":
            kernel = exponential_kernel(grid, k.eta, k.gamma, None if k.structure is None else np.array(k.structure).reshape(2, 2))
        elif k.type == "bath":
            kernel = single_mode_bath_kernel(grid, k.coupling, k.omega, self.m)
        else:
            kernel = read_kernel_csv(k.path, grid)
        return CLModel(self.m, self.omega0, kernel)


@dataclass(frozen=True)
class StateConfig:
    xi: tuple
    c: tuple

    def build(self) -> GaussianState:
        return GaussianState(np.array(self.xi).reshape(2, 2), np.array(self.c))


@dataclass(frozen=True)
class TaskConfig:
    kind: str
    params: dict
    name: str


@dataclass(frozen=True)
class ExperimentConfig:
    grid: GridConfig
    model: ModelConfig
    state: StateConfig
    tau_m: float | None
    tasks: tuple
    output_dir: Path
    output_format: str
    source: Path | None
    digest: str

    def build_grid(self) -> TimeGrid:
        return self.grid.build()

    def build_model(self, grid: TimeGrid | None = None) -> CLModel:
        return self.model.build(self.build_grid() if grid is None else grid)

    def build_state(self) -> GaussianState:
        return self.state.build()

    def measurement_spec(self, grid: TimeGrid | None = None) -> PositionMeasurementSpec:
        if self.tau_m is None:
            raise ConfigError("this task needs measurement.tau_m")
        return PositionMeasurementSpec(self.tau_m, self.build_grid() if grid is None else grid)


def _resolve(path, base: Path | None, where: str) -> Path:
    p = Path(str(path)).expanduser()
    if not p.is_absolute() and base is not None:
        p = base / p
    if not p.is_file():
        raise ConfigError(f"{where}: file not found: {p}")
    return p


def _parse_grid(raw) -> GridConfig:
    raw = _mapping(raw, "grid")
    missing = [k for k in ("t_i", "t_f", "n_steps") if k not in raw]
    if missing:
        raise ConfigError(f"grid: missing {', '.join(missing)}")
    n = raw["n_steps"]
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise ConfigError("grid.n_steps must be a positive integer")
    t_i, t_f = _number(raw["t_i"], "grid.t_i"), _number(raw["t_f"], "grid.t_f")
    if not t_f > t_i:
        raise ConfigError("grid: t_f must exceed t_i")
    return GridConfig(t_i, t_f, n)


def _parse_model(raw, base) -> ModelConfig:
    raw = _mapping(raw, "model")
    m = _number(raw.get("m", 1.0), "model.m")
    omega0 = _number(raw.get("omega0", 1.0), "model.omega0")
    if m <= 0 or omega0 < 0:
        raise ConfigError("model: need m > 0 and omega0 >= 0")
    k = _mapping(raw.get("kernel"), "model.kernel")
    ktype = str(k.get("type", "zero"))
    if ktype not in KERNEL_TYPES:
        raise ConfigError(f"model.kernel.type must be one of {', '.join(KERNEL_TYPES)}")
    structure = None
    if k.get("structure") is not None:
        entries = k["structure"]
        if not isinstance(entries, (list, tuple)) or len(entries) != 4:
            raise ConfigError("model.kernel.structure needs 4 complex entries (row-major 2x2)")
        structure = tuple(parse_complex(e, "model.kernel.structure") for e in entries)
    path = None
    if ktype == "file":
        if "path" not in k:
            raise ConfigError("model.kernel: type 'file' needs a path")
        path = _resolve(k["path"], base, "model.kernel.path")
    if ktype == "exp" and ("eta" not in k or "gamma" not in k):
        raise ConfigError("model.kernel: type 'exp' needs eta and gamma")
    kernel = KernelConfig(
        ktype,
        _number(k.get("eta", 0.0), "model.kernel.eta"),
        _number(k.get("gamma", 0.0), "model.kernel.gamma"),
        structure,
        _number(k.get("coupling", 0.0), "model.kernel.coupling"),
        _number(k.get("omega", 1.0), "model.kernel.omega"),
        path,
    )
    return ModelConfig(m, omega0, kernel)


def _parse_state(raw, model: ModelConfig) -> StateConfig:
    raw = _mapping(raw, "state")
    if "xi" in raw:
        xi = raw["xi"]
        if not isinstance(xi, (list, tuple)) or len(xi) != 4:
            raise ConfigError("state.xi needs 4 complex entries (row-major 2x2)")
        c = raw.get("c", [0, 0])
        if not isinstance(c, (list, tuple)) or len(c) != 2:
            raise ConfigError("state.c needs 2 complex entries")
        state = StateConfig(
            tuple(parse_complex(v, "state.xi") for v in xi), tuple(parse_complex(v, "state.c") for v in c)
        )
    else:
        kind = raw.get("type", "ground")
        omega = _number(raw.get("omega", model.omega0 if model.omega0 > 0 else 1.0), "state.omega")
        if kind == "ground":
            g = ground_state(model.m, omega)
        elif kind == "coherent":
            g = coherent_state(model.m, omega, _number(raw.get("x0", 0.0), "state.x0"), _number(raw.get("p0", 0.0), "state.p0"))
        else:
            raise ConfigError("state.type must be 'ground' or 'coherent' (or give xi and c)")
        state = StateConfig(tuple(g.xi.reshape(-1)), tuple(g.c))
    try:
        state.build()
    except Exception as exc:  # invalid density kernel
        raise ConfigError(f"state: {exc}") from None
    return state


def _parse_task(raw, index: int, base, counts: dict, default_seed: int = 0) -> TaskConfig:
    if isinstance(raw, str):
        kind, params = raw, {}
    elif isinstance(raw, dict) and "task" in raw:
        params = {k: v for k, v in raw.items() if k != "task"}
        kind = raw["task"]
    elif isinstance(raw, dict) and len(raw) == 1:
        kind, params = next(iter(raw.items()))
        params = _mapping(params, f"tasks[{index}]")
    else:
        raise ConfigError(f"tasks[{index}]: expected a task name or a one-key mapping")
    if kind not in TASK_KINDS:
        raise ConfigError(f"tasks[{index}]: unknown task {kind!r}")
    params = dict(params)
    where = f"tasks[{index}] ({kind})"
    if kind == "sample":
        n = params.get("n", 1000)
        if isinstance(n, bool) or not isinstance(n, int) or n < 1:
            raise ConfigError(f"{where}: n must be a positive integer")
        params["n"] = n
        params["seed"] = int(params.get("seed", default_seed))
    elif kind == "conditional":
        if "record_path" in params:
            params["record_path"] = _resolve(params["record_path"], base, where + ".record_path")
        else:
            params["seed"] = int(params.get("seed", default_seed))
    elif kind == "check":
        ck = params.get("kind", params.get("check"))
        if ck not in CHECK_KINDS:
            raise ConfigError(f"{where}: kind must be one of {', '.join(CHECK_KINDS)}")
        nested = _mapping(params.get("params"), where + ".params")
        # options may sit beside the kind or inside a params mapping
        extra = {k: v for k, v in params.items() if k not in ("kind", "check", "params")}
        params = {"kind": ck, "params": {**extra, **nested}}
        if ck == "positivity":
            params["params"]["seed"] = int(params["params"].get("seed", default_seed))
    elif kind == "recover":
        cuts = params.get("partition")
        if not isinstance(cuts, (list, tuple)) or len(cuts) < 2 or not all(isinstance(c, int) for c in cuts):
            raise ConfigError(f"{where}: partition must be a list of node indices")
        params["partition"] = tuple(cuts)
        params["seed"] = int(params.get("seed", default_seed))
    elif kind == "oracle":
        cut = params.get("cutoffs", [16, 16, 8])
        if not isinstance(cut, (list, tuple)) or len(cut) != 3:
            raise ConfigError(f"{where}: cutoffs needs three integers")
        params["cutoffs"] = tuple(int(c) for c in cut)
        params["bins"] = int(params.get("bins", 16))
        params["steps"] = int(params.get("steps", 2))
    elif kind == "projective-limit":
        taus = params.get("tau_values", [1e-1, 1e-2, 1e-3])
        params["tau_values"] = tuple(_number(t, where + ".tau_values") for t in taus)
    base_name = f"check-{params['kind']}" if kind == "check" else kind
    counts[base_name] = counts.get(base_name, 0) + 1
    name = base_name if counts[base_name] == 1 else f"{base_name}-{counts[base_name]}"
    return TaskConfig(kind, params, name)


def parse_config(data: dict, source: Path | None = None, digest: str = "") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at top level")
    base = source.parent if source is not None else None
    grid = _parse_grid(data.get("grid"))
    model = _parse_model(data.get("model"), base)
    state = _parse_state(data.get("state"), model)
    meas = _mapping(data.get("measurement"), "measurement")
    tau = None
    if "tau_m" in meas:
        tau = _number(meas["tau_m"], "measurement.tau_m")
        if not tau > 0:
            raise ConfigError("measurement.tau_m must be positive")
    raw_tasks = data.get("tasks")
    if not isinstance(raw_tasks, list) or not raw_tasks:
        raise ConfigError("tasks must be a nonempty list")
    counts: dict = {}
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    tasks = tuple(_parse_task(t, i, base, counts, seed) for i, t in enumerate(raw_tasks))
    out = _mapping(data.get("output"), "output")
    out_dir = Path(str(out.get("dir", "out")))
    if not out_dir.is_absolute() and base is not None:
        out_dir = base / out_dir
    fmt = str(out.get("format", "csv"))
    if fmt not in ("csv", "json"):
        raise ConfigError("output.format must be 'csv' or 'json'")
    unknown = set(data) - {"grid", "model", "state", "measurement", "tasks", "output", "seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    return ExperimentConfig(grid, model, state, tau, tasks, out_dir, fmt, source, digest)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = path.read_bytes()
    try:
        data = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return parse_config(data, path.resolve(), hashlib.sha256(raw).hexdigest())
