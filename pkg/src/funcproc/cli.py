"""Config-driven experiment runner: ``funcproc run <config> [--out-dir D] [--validate]``."""

from __future__ import annotations

import argparse
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, TaskConfig, load_config
from .errors import ConfigError, FuncProcError
from .io import write_json, write_matrix, write_table, write_vector

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_PARSE = 2
EXIT_NUMERIC = 3


class TaskFailure(Exception):
    def __init__(self, task: str, cause: Exception):
        super().__init__(f"task {task!r} failed: {type(cause).__name__}: {cause}")
        self.task = task
        self.cause = cause


class RunContext:
    """Shared, lazily built objects for one config run."""

    def __init__(self, config: ExperimentConfig, out_dir: Path):
        self.config = config
        self.out_dir = out_dir
        self.grid = config.build_grid()
        self.model = config.build_model(self.grid)
        self.state = config.build_state()
        self.laws: dict = {}
        self.artifacts: list = []
        self.residuals: dict = {}
        self.checks: dict = {}
        self.seeds: dict = {}

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.artifacts.append(name)
        return p

    def spec(self):
        return self.config.measurement_spec(self.grid)

    def process(self, boundary: str):
        from .process import OPEN_BOUNDARY, build_cl_process

        state = None if boundary == OPEN_BOUNDARY else self.state
        return build_cl_process(self.model, self.grid, state, boundary)

    def law(self, route: str = "direct"):
        if route not in self.laws:
            if route == "direct":
                from .born import compute_readout_law_direct
                from .measurement import build_position_measurement
                from .process import CLOSED

                self.laws[route] = compute_readout_law_direct(self.process(CLOSED), build_position_measurement(self.spec()))
            else:
                from .saddle import compute_readout_law_saddle

                self.laws[route] = compute_readout_law_saddle(self.model, self.state, self.spec(), self.grid)[0]
        return self.laws[route]

    def record_check(self, task: str, name: str, residual: float, threshold: float, passed: bool | None = None):
        self.residuals.setdefault(task, {})[name] = float(residual)
        self.checks[f"{task}:{name}"] = bool(residual <= threshold) if passed is None else bool(passed)


def _suffix(task: TaskConfig) -> str:
    return "" if task.name == task.kind else task.name[len(task.kind):]


def _law_outputs(ctx: RunContext, task: TaskConfig, law, prefix: str):
    from .born import law_normalization_residual

    sfx = _suffix(task)
    write_matrix(ctx.path(f"{prefix}R{sfx}.csv"), law.R, law.nodes, law.nodes, "row_node", "col_node")
    write_vector(ctx.path(f"{prefix}b{sfx}.csv"), law.b, law.nodes)
    summary = {"logZ": law.logZ, "nodes": list(law.nodes), "diagnostics": law.diagnostics}
    ctx.record_check(task.name, "law_normalization", law_normalization_residual(law), 1e-8)
    return summary


def task_law_direct(ctx: RunContext, task: TaskConfig):
    law = ctx.law("direct")
    summary = _law_outputs(ctx, task, law, "")
    _route_equality(ctx)
    write_json(ctx.path(f"law_direct{_suffix(task)}.json"), summary)


def task_law_saddle(ctx: RunContext, task: TaskConfig):
    law = ctx.law("saddle")
    summary = _law_outputs(ctx, task, law, "saddle_")
    summary["gh"] = {k: v for k, v in (law.gh_data or {}).items() if k != "eigenvalues"}
    if law.gh_data:
        write_table(ctx.path(f"saddle_gh{_suffix(task)}.csv"), {"node": np.array(law.nodes), "g": law.gh_data["g"], "h": law.gh_data["h"]})
    _route_equality(ctx)
    write_json(ctx.path(f"law_saddle{_suffix(task)}.json"), summary)


def _route_equality(ctx: RunContext):
    if "direct" in ctx.laws and "saddle" in ctx.laws and "route-equality" not in ctx.residuals:
        from .saddle import route_difference

        diff = route_difference(ctx.laws["direct"], ctx.laws["saddle"])
        for k, v in diff.items():
            ctx.record_check("route-equality", k, v, 1e-6)


def task_covariance(ctx: RunContext, task: TaskConfig):
    from .born import readout_covariance

    cov, mean = readout_covariance(ctx.law(task.params.get("route", "direct")))
    nodes = ctx.law().nodes
    write_matrix(ctx.path(f"covariance{_suffix(task)}.csv"), cov, nodes, nodes, "row_node", "col_node")
    write_vector(ctx.path(f"mean{_suffix(task)}.csv"), mean, nodes)


def task_sample(ctx: RunContext, task: TaskConfig):
    from .born import sample_array

    law = ctx.law(task.params.get("route", "direct"))
    n, seed = task.params["n"], task.params["seed"]
    ctx.seeds[task.name] = seed
    S = sample_array(law, n, seed)
    cols = {"sample": np.arange(n)}
    cols.update({f"r{k}": S[:, i] for i, k in enumerate(law.nodes)})
    write_table(ctx.path(f"samples{_suffix(task)}.csv"), cols)
    if n >= 2:
        emp = np.cov(S, rowvar=False).reshape(law.size, law.size)
        cov = law.covariance()
        ctx.residuals.setdefault(task.name, {})["covariance_max_rel"] = float(
            np.abs(emp - cov).max() / np.abs(cov).max()
        )


def task_conditional(ctx: RunContext, task: TaskConfig):
    from .born import born_probability_density, conditional_state, sample_records
    from .measurement import ReadoutRecord, build_position_measurement, read_record_csv
    from .process import CLOSED, OPEN_FUTURE

    if "record_path" in task.params:
        records = [read_record_csv(task.params["record_path"], ctx.grid)]
    else:
        seed = task.params["seed"]
        ctx.seeds[task.name] = seed
        records = sample_records(ctx.law(), int(task.params.get("n", 1)), seed)
    Wf, Wc = ctx.process(OPEN_FUTURE), ctx.process(CLOSED)
    rows = []
    worst = 0.0
    for i, rec in enumerate(records):
        assert isinstance(rec, ReadoutRecord)
        M = build_position_measurement(ctx.spec(), rec)
        st, tr = conditional_state(Wf, M)
        born = born_probability_density(Wc, M).real
        rel = abs(tr - born) / abs(born)
        worst = max(worst, rel)
        mom = st.moments()
        rows.append((i, tr, born, mom["x"], mom["p"], mom["x2"], mom["p2"], mom["xp_sym"]))
    arr = np.array(rows, dtype=float)
    names = ["record", "trace", "born", "x", "p", "x2", "p2", "xp_sym"]
    cols = {nm: arr[:, j] for j, nm in enumerate(names)}
    cols["record"] = arr[:, 0].astype(int)
    write_table(ctx.path(f"conditional{_suffix(task)}.csv"), cols)
    ctx.record_check(task.name, "trace_vs_born_rel", worst, 1e-9)


def task_projective_limit(ctx: RunContext, task: TaskConfig):
    from .born import projective_limit_error

    taus = task.params["tau_values"]
    errs = np.array([projective_limit_error(ctx.model, ctx.state, ctx.grid, t) for t in taus])
    write_table(ctx.path(f"projective_limit{_suffix(task)}.csv"), {"tau_m": np.array(taus), "relative_error": errs})
    order = np.argsort(taus)[::-1]
    monotone = bool(np.all(np.diff(errs[order]) <= 0))
    ctx.residuals.setdefault(task.name, {})["final_relative_error"] = float(errs[order][-1])
    ctx.checks[f"{task.name}:monotone"] = monotone
    ctx.checks[f"{task.name}:final_relative_error"] = bool(errs[order][-1] <= float(task.params.get("threshold", 0.05)))


def task_check(ctx: RunContext, task: TaskConfig):
    from .process import CLOSED, OPEN_BOUNDARY
    from .properties import check_causality, check_divisibility, check_normalization, check_trace_preserving

    kind = task.params["kind"]
    p = task.params["params"]
    N = ctx.grid.n_steps
    reports = []
    if kind == "causality":
        W = ctx.process(CLOSED)
        nodes = p.get("nodes", list(range(1, N)))
        reports = [check_causality(W, int(k), threshold=float(p.get("threshold", 1e-8))) for k in nodes]
    elif kind == "trace":
        reports = [check_trace_preserving(ctx.process(OPEN_BOUNDARY), float(p.get("threshold", 1e-9)))]
    elif kind == "normalization":
        from .measurement import build_position_measurement

        op = build_position_measurement(ctx.spec()) if ctx.config.tau_m is not None and p.get("with_measurement", True) else None
        reports = [check_normalization(ctx.process(CLOSED), op, float(p.get("threshold", 1e-8)))]
    elif kind == "divisibility":
        node = int(p.get("node", N // 2))
        rep = check_divisibility(ctx.process(OPEN_BOUNDARY), node, float(p.get("threshold", 1e-3)))
        expect = p.get("expect", "divisible")
        if expect not in ("divisible", "indivisible"):
            raise ConfigError("divisibility expect must be 'divisible' or 'indivisible'")
        ok = rep.passed if expect == "divisible" else not rep.passed
        ctx.record_check(task.name, "divisibility", rep.residual, rep.threshold, ok)
        write_json(ctx.path(f"{task.name}.json"), [rep.to_dict() | {"expect": expect, "expectation_met": ok}])
        return
    elif kind == "positivity":
        reports = _positivity_reports(ctx, task.name, p)
    elif kind == "kraus":
        from .measurement import check_kraus_normalization

        rep = check_kraus_normalization(ctx.spec(), float(p.get("threshold", 1e-12)))
        ctx.record_check(task.name, "kraus", rep.residual, float(p.get("threshold", 1e-12)), rep.passed)
        write_json(ctx.path(f"{task.name}.json"), [{"name": "kraus", "residual": rep.residual, "pass": rep.passed}])
        return
    worst = max(r.residual for r in reports)
    ctx.record_check(task.name, kind, worst, reports[0].threshold, all(r.passed for r in reports))
    write_json(ctx.path(f"{task.name}.json"), [r.to_dict() for r in reports])


def _positivity_reports(ctx: RunContext, task_name: str, p: dict) -> list:
    from .born import sample_records
    from .gaussian import positivity_sample_check
    from .grid import BRA, KET
    from .measurement import build_position_measurement
    from .process import CLOSED
    from .properties import CheckReport

    n = int(p.get("samples", 64))
    seed = int(p.get("seed", 0))
    ctx.seeds[task_name] = seed
    targets = [("W", ctx.process(CLOSED))]
    if ctx.config.tau_m is not None:
        rec = sample_records(ctx.law(), 1, seed)[0]
        targets.append(("M_r", build_position_measurement(ctx.spec(), rec)))
    out = []
    for name, F in targets:
        kets = [lab for lab in F.labels if lab.branch == KET]
        bras = [lab.__class__(BRA, lab.node, lab.kind) for lab in kets]
        rep = positivity_sample_check(F, kets, bras, n, seed)
        scale = max(abs(rep.max_eig), 1e-300)
        residual = max(0.0, -rep.min_eig / scale)
        out.append(CheckReport(f"positivity-{name}", residual, 1e-8, {"min_eig": rep.min_eig, "max_eig": rep.max_eig, "hermitian_residual": rep.hermitian_residual, "sampler_pass": rep.passed}))
    return out


def task_recover(ctx: RunContext, task: TaskConfig):
    from .born import born_probability_density
    from .discrete import (
        PROCESS,
        TESTER,
        IntervalPartition,
        build_interleaved_process,
        build_interleaved_tester,
        constancy_residual,
        discrete_born,
        discrete_causality_check,
        discrete_markov_residual,
        reconstruct_discrete,
        truncated_process_kernels,
    )
    from .measurement import ReadoutRecord
    from .process import CLOSED

    part = IntervalPartition(ctx.grid, task.params["partition"])
    seed = int(task.params.get("seed", 0))
    ctx.seeds[task.name] = seed
    record = ReadoutRecord(ctx.grid, np.random.default_rng(seed).standard_normal(ctx.grid.n_steps + 1))
    W = build_interleaved_process(ctx.model, ctx.state, part, CLOSED)
    M = build_interleaved_tester(ctx.model, ctx.spec(), part, record)
    cres = max(max(constancy_residual(W, part, PROCESS).values(), default=0.0), max(constancy_residual(M, part, TESTER).values(), default=0.0))
    Wd = reconstruct_discrete(W, part, PROCESS)
    Md = reconstruct_discrete(M, part, TESTER)
    disc = discrete_born(Wd, Md)
    cont = born_probability_density(W, M).real
    causal = discrete_causality_check(Wd, truncated_process_kernels(ctx.model, ctx.state, part))
    markov = discrete_markov_residual(Wd)
    ctx.record_check(task.name, "constancy", cres, 1e-10)
    ctx.record_check(task.name, "discrete_vs_continuous_rel", abs(disc - cont) / abs(cont), 1e-6)
    ctx.record_check(task.name, "discrete_causality", causal.residual, causal.threshold, causal.passed)
    ctx.residuals[task.name]["markov_residual"] = markov
    (ctx.path(f"discrete_process{_suffix(task)}.json")).write_text(Wd.to_json() + "\n")
    write_json(ctx.path(f"recover{_suffix(task)}.json"), {"discrete_born": disc, "continuous_born": cont, "markov_residual": markov, "causality": causal.to_dict()})


def task_oracle(ctx: RunContext, task: TaskConfig):
    from .fock import (
        build_fock_model,
        engine_binned_distribution,
        engine_final_moments,
        engine_setup,
        oracle_record_distribution,
        oracle_reduced_state,
        state_moments,
        total_variation,
    )
    from .grid import make_grid

    p = task.params
    if ctx.config.model.m != 1.0:
        raise ConfigError("the oracle task assumes m = 1")
    gs = ctx.state
    mom0 = gs.moments()
    kw = dict(
        omega0=ctx.config.model.omega0,
        omega_env=float(p.get("omega_env", 1.5)),
        coupling=float(p.get("coupling", 0.1)),
        meter_coupling=float(p.get("meter_coupling", 0.1)),
        x0=mom0["x"],
        p0=mom0["p"],
        n_bins=p["bins"],
    )
    grid = make_grid(ctx.grid.t_i, ctx.grid.t_f, p["steps"])
    model = build_fock_model(cutoffs=p["cutoffs"], **kw)
    setup = engine_setup(model, grid, int(p.get("nodes_per_step", 32)))
    oracle_m = state_moments(oracle_reduced_state(model, grid), model.x_S, model.p_S)
    engine_m = engine_final_moments(model, setup)
    bigger = tuple(c + 4 for c in p["cutoffs"][:2]) + (p["cutoffs"][2],)
    model_big = build_fock_model(cutoffs=bigger, **kw)
    big_m = state_moments(oracle_reduced_state(model_big, grid), model_big.x_S, model_big.p_S)
    P = oracle_record_distribution(model, grid)
    Q = engine_binned_distribution(model, setup)
    keys = sorted(P)
    cols = {f"bin{j}": np.array([k[j] for k in keys], dtype=int) for j in range(len(keys[0]))}
    cols["oracle"] = np.array([P[k] for k in keys])
    cols["engine"] = np.array([Q.get(k, 0.0) for k in keys])
    write_table(ctx.path(f"oracle_distribution{_suffix(task)}.csv"), cols)
    names = ["x", "p", "x2", "p2", "xp_sym"]
    write_table(
        ctx.path(f"oracle_moments{_suffix(task)}.csv"),
        {"moment": np.arange(len(names)), "oracle": np.array([oracle_m[k] for k in names]), "engine": np.array([engine_m[k] for k in names]), "oracle_larger_cutoff": np.array([big_m[k] for k in names])},
    )
    ctx.record_check(task.name, "moment_rel", moment_discrepancy(oracle_m, engine_m), 0.02)
    ctx.record_check(task.name, "total_variation", total_variation(P, Q), 0.05)
    ctx.record_check(task.name, "cutoff_convergence", moment_discrepancy(big_m, oracle_m), 0.005)


def moment_discrepancy(ref: dict, other: dict) -> float:
    """Largest relative moment difference; first moments are scaled by the spread."""
    sx = np.sqrt(max(ref["x2"] - ref["x"] ** 2, 1e-300))
    sp = np.sqrt(max(ref["p2"] - ref["p"] ** 2, 1e-300))
    scale = {"x": max(abs(ref["x"]), sx), "p": max(abs(ref["p"]), sp), "x2": abs(ref["x2"]), "p2": abs(ref["p2"]), "xp_sym": sx * sp}
    return float(max(abs(other[k] - ref[k]) / scale[k] for k in scale))


TASKS = {
    "law-direct": task_law_direct,
    "law-saddle": task_law_saddle,
    "covariance": task_covariance,
    "sample": task_sample,
    "conditional": task_conditional,
    "projective-limit": task_projective_limit,
    "check": task_check,
    "recover": task_recover,
    "oracle": task_oracle,
}


def _versions() -> dict:
    import scipy
    import yaml

    return {"funcproc": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "pyyaml": yaml.__version__, "python": platform.python_version()}


def run_config(path, out_dir=None) -> int:
    """Execute every task; returns the process exit status."""
    try:
        config = load_config(path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    out = Path(out_dir) if out_dir is not None else config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    try:
        ctx = RunContext(config, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except FuncProcError as exc:
        print(f"error: model setup: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    status = EXIT_OK
    failed_task = None
    for task in config.tasks:
        try:
            TASKS[task.kind](ctx, task)
        except ConfigError as exc:
            print(f"error: task {task.name}: {exc}", file=sys.stderr)
            status, failed_task = EXIT_PARSE, task.name
            break
        except (FuncProcError, np.linalg.LinAlgError) as exc:
            print(f"error: task {task.name}: {type(exc).__name__}: {exc}", file=sys.stderr)
            status, failed_task = EXIT_NUMERIC, task.name
            break
    all_pass = all(ctx.checks.values())
    if status == EXIT_OK and not all_pass:
        status = EXIT_CHECK_FAILED
    manifest = {
        "config": str(config.source),
        "config_sha256": config.digest,
        "versions": _versions(),
        "seeds": ctx.seeds,
        "tasks": [t.name for t in config.tasks],
        "failed_task": failed_task,
        "residuals": ctx.residuals,
        "checks": ctx.checks,
        "all_checks_pass": all_pass,
        "artifacts": ctx.artifacts,
        "exit_status": status,
    }
    write_json(out / "manifest.json", manifest)
    for key, ok in sorted(ctx.checks.items()):
        print(f"{'PASS' if ok else 'FAIL'} {key}")
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="funcproc", description="Run Gaussian process-functional experiments from a config file.")
    parser.add_argument("--version", action="version", version=f"funcproc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute the tasks of a config file")
    run.add_argument("config", help="YAML experiment config")
    run.add_argument("--out-dir", default=None, help="override output.dir")
    run.add_argument("--validate", action="store_true", help="parse and validate only")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_PARSE
    if args.validate:
        try:
            cfg = load_config(args.config)
            cfg.build_model(cfg.build_grid())
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_PARSE
        except FuncProcError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"ok: {len(cfg.tasks)} task(s)")
        return EXIT_OK
    return run_config(args.config, args.out_dir)


if __name__ == "__main__":
    sys.exit(main())
