"""Outer alternation driver, enumeration oracle, output files, and the CLI.

The driver alternates the continuous stage and the switching stage until two
consecutive continuous solutions agree, then verifies the final binary switch
set actually admits a feasible operating point.  Everything the CLI writes is
deterministic for a fixed case, config, and seed; wall-clock numbers go to a
separate report file so result and trace files can be compared byte for byte.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .ao1_opf import solve_ao1
from .ao2_sbqp import VARIANT_TAGS, Ao2Error, Ao2Variant, PenaltySchedule, SbqpTrace, run_ao2
from .grid_model import (
    Branch,
    CaseError,
    GridCase,
    ScenarioConfig,
    apply_scenario,
    build_admittance,
    parse_case,
    parse_kv_config,
    scenario_from_mapping,
    serialize_case,
)
from .power_equations import (
    InputVector,
    State,
    SwitchVector,
    constraints_C,
    hessian_Q,
    jacobians,
    network,
    node_outflow,
    objective_E,
    phi,
)

FEAS_TOL = 1e-6
ORACLE_CAP = 20
FORMAT_VERSION = 1


class DriverError(RuntimeError):
    """The alternation could not deliver a valid binary operating point.

    kind is "infeasible" when the final switch set admits no feasible
    continuous solution and "no-convergence" when an iteration budget ran
    out first; best carries the last complete iterate when one exists.
    """

    def __init__(self, message: str, kind: str, best=None):
        super().__init__(message)
        self.kind = kind
        self.best = best


@dataclass(frozen=True)
class SolverConfig:
    """Everything the driver needs besides the case itself."""

    schedule: PenaltySchedule = PenaltySchedule()
    variant: Ao2Variant = Ao2Variant()
    outer_eps: float = 1e-6
    outer_max_iters: int = 20
    seed: int = 2025
    scenario: ScenarioConfig | None = None

    def __post_init__(self):
        if self.outer_eps <= 0.0:
            raise ValueError("outer_eps must be positive")
        if self.outer_max_iters < 1:
            raise ValueError("outer_max_iters must be at least 1")


@dataclass(frozen=True, eq=False)
class SolveResult:
    state: State
    input: InputVector
    switches: SwitchVector
    objective: float
    supplied_active: float
    supplied_reactive: float
    outer_iterations: int
    ao2_traces: tuple[SbqpTrace, ...]
    timings: dict = field(default_factory=dict)

    @property
    def inner_iterations(self) -> int:
        return sum(len(t.rows) for t in self.ao2_traces)

    @property
    def phi_final(self) -> float:
        return phi(self.switches.y)


def _package(work, ao1, y, traces, outer, t_ao1, t_ao2, t0) -> SolveResult:
    net = network(work)
    yv = y.y
    return SolveResult(
        state=ao1.state,
        input=ao1.input,
        switches=y,
        objective=float(np.sum(yv * net.rank * net.pd)),
        supplied_active=float(np.sum(yv * net.pd)),
        supplied_reactive=float(np.sum(yv * net.qd)),
        outer_iterations=outer,
        ao2_traces=tuple(traces),
        timings={
            "ao1_s": t_ao1,
            "ao2_s": t_ao2,
            "total_s": time.perf_counter() - t0,
        },
    )


def run_ao_sbqp(case: GridCase, cfg: SolverConfig | None = None) -> SolveResult:
    """Alternate both stages until consecutive continuous solutions agree.

    The switch set starts at all-ones so an adequate case exits with full
    service.  A continuous solve that cannot close its residuals mid-run is
    tolerated (its iterate and duals still steer the switching stage); only
    the final solve at the settled binary switches must converge feasibly.
    """
    cfg = SolverConfig() if cfg is None else cfg
    work = apply_scenario(case, cfg.scenario) if cfg.scenario is not None else case
    net = network(work)
    t0 = time.perf_counter()
    t_ao1 = t_ao2 = 0.0

    y = SwitchVector(np.ones(net.n_dem))
    warm = None
    prev_xu = None
    traces: list[SbqpTrace] = []
    ao1 = None
    y_solved = y
    outer = 0
    converged = False

    for _ in range(cfg.outer_max_iters):
        tick = time.perf_counter()
        ao1 = solve_ao1(work, y, warm=warm)
        t_ao1 += time.perf_counter() - tick
        outer += 1
        y_solved = y
        xu = np.concatenate([ao1.state.as_vector(), ao1.input.as_vector()])
        if prev_xu is not None and float(np.max(np.abs(xu - prev_xu), initial=0.0)) <= cfg.outer_eps:
            converged = True
            break
        prev_xu = xu
        warm = (ao1.state, ao1.input)
        tick = time.perf_counter()
        try:
            y, trace = run_ao2(work, (ao1.state, ao1.input, y), ao1.duals, cfg.schedule, cfg.variant)
        except Ao2Error as exc:
            t_ao2 += time.perf_counter() - tick
            best = _package(work, ao1, y_solved, traces + [exc.trace], outer, t_ao1, t_ao2, t0)
            raise DriverError(f"switching stage stalled: {exc}", "no-convergence", best) from exc
        t_ao2 += time.perf_counter() - tick
        traces.append(trace)

    best = _package(work, ao1, y_solved, traces, outer, t_ao1, t_ao2, t0)
    if not converged:
        raise DriverError(
            f"operating point still moving after {outer} outer iterations", "no-convergence", best
        )
    resid = constraints_C(work, ao1.state, ao1.input, y_solved)
    worst = int(np.argmax(resid))
    if ao1.status != "converged" or float(resid[worst]) > FEAS_TOL:
        raise DriverError(
            "final switch set admits no feasible operating point "
            f"(continuous stage {ao1.status}, worst violation {float(resid[worst]):.3e} at row {worst})",
            "infeasible",
            best,
        )
    return best


@dataclass(frozen=True, eq=False)
class OracleEntry:
    switches: tuple[int, ...]
    feasible: bool
    objective: float


def enumerate_oracle(case: GridCase, cfg: SolverConfig | None = None) -> list[OracleEntry]:
    """Solve the continuous stage for every binary switch set.

    Returns every configuration with its served-priority objective, feasible
    entries first, best objective first; ties break on the switch pattern so
    the order is reproducible.  Refuses cases with more than ORACLE_CAP
    switchable demands.
    """
    cfg = SolverConfig() if cfg is None else cfg
    work = apply_scenario(case, cfg.scenario) if cfg.scenario is not None else case
    net = network(work)
    if net.n_dem > ORACLE_CAP:
        raise ValueError(
            f"enumeration needs 2^{net.n_dem} continuous solves; the cap is 2^{ORACLE_CAP}"
        )
    entries = []
    for code in range(2 ** net.n_dem):
        bits = np.array([(code >> k) & 1 for k in range(net.n_dem)], dtype=float)
        y = SwitchVector(bits)
        res = solve_ao1(work, y)
        feasible = res.status == "converged" and float(
            np.max(constraints_C(work, res.state, res.input, y), initial=0.0)
        ) <= FEAS_TOL
        entries.append(
            OracleEntry(
                switches=tuple(int(b) for b in bits),
                feasible=bool(feasible),
                objective=float(np.sum(bits * net.rank * net.pd)),
            )
        )
    entries.sort(key=lambda e: (not e.feasible, -e.objective, e.switches))
    return entries


# -- output documents --------------------------------------------------------

def _render_floats(values) -> str:
    return ",".join(repr(float(v)) for v in np.asarray(values, dtype=float))


def result_document(result: SolveResult, config: SolverConfig | None = None) -> dict:
    """Flat mapping of everything a result file records, in file order."""
    doc: dict = {"format": FORMAT_VERSION}
    if config is not None:
        doc["variant"] = config.variant.tag
        doc["full_rows"] = config.variant.full_rows
        doc["single_shot"] = config.variant.single_shot
        doc["seed"] = config.seed
    doc["outer_iterations"] = result.outer_iterations
    doc["inner_iterations"] = result.inner_iterations
    doc["phi_final"] = float(result.phi_final)
    doc["objective"] = float(result.objective)
    doc["supplied_active"] = float(result.supplied_active)
    doc["supplied_reactive"] = float(result.supplied_reactive)
    doc["switches"] = [int(round(v)) for v in result.switches.y]
    doc["state_v"] = [float(v) for v in result.state.v]
    doc["state_theta"] = [float(v) for v in result.state.theta]
    doc["input_pg"] = [float(v) for v in result.input.pg]
    doc["input_qg"] = [float(v) for v in result.input.qg]
    return doc


_RESULT_SCHEMA = {
    "format": "int",
    "variant": "str",
    "full_rows": "bool",
    "single_shot": "bool",
    "seed": "int",
    "outer_iterations": "int",
    "inner_iterations": "int",
    "phi_final": "float",
    "objective": "float",
    "supplied_active": "float",
    "supplied_reactive": "float",
    "switches": "int-list",
    "state_v": "float-list",
    "state_theta": "float-list",
    "input_pg": "float-list",
    "input_qg": "float-list",
}


def render_result_document(doc: dict, format: str = "kv") -> str:
    if format == "json":
        return json.dumps(doc, indent=2) + "\n"
    if format != "kv":
        raise ValueError(f"unknown format {format!r}")
    lines = []
    for key, value in doc.items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, int):
            text = str(value)
        elif isinstance(value, float):
            text = repr(value)
        elif isinstance(value, str):
            text = value
        else:
            kind = _RESULT_SCHEMA.get(key, "float-list")
            if kind == "int-list":
                text = ",".join(str(int(v)) for v in value)
            else:
                text = _render_floats(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def parse_result_document(text: str) -> dict:
    """Inverse of render_result_document for both formats; values are typed."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        doc = json.loads(stripped)
        return {k: (tuple(v) if isinstance(v, list) else v) for k, v in doc.items()}
    out: dict = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        kind = _RESULT_SCHEMA.get(key)
        if kind is None:
            raise ValueError(f"unknown result key {key!r}")
        if kind == "int":
            out[key] = int(value)
        elif kind == "float":
            out[key] = float(value)
        elif kind == "bool":
            if value not in ("true", "false"):
                raise ValueError(f"{key}: expected true or false, got {value!r}")
            out[key] = value == "true"
        elif kind == "str":
            out[key] = value
        elif kind == "int-list":
            out[key] = tuple(int(v) for v in value.split(",")) if value else ()
        else:
            out[key] = tuple(float(v) for v in value.split(",")) if value else ()
    return out


def render_trace_table(result: SolveResult) -> str:
    """CSV of every switching-stage iteration across all outer passes."""
    n = result.switches.y.size
    header = ["stage", "iteration"] + [f"y_{k}" for k in range(n)] + [
        "phi", "rho", "alpha", "kind", "status", "psi",
    ]
    lines = [",".join(header)]
    for stage, trace in enumerate(result.ao2_traces):
        for row in trace.rows:
            cells = [str(stage), str(row.iteration)]
            cells += [repr(float(v)) for v in row.y]
            cells += [repr(float(row.phi)), repr(float(row.rho)), repr(float(row.alpha))]
            cells += [row.kind, row.status, repr(float(row.psi))]
            lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def parse_trace_table(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(",")
    n = sum(1 for h in header if h.startswith("y_"))
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        rows.append(
            {
                "stage": int(cells[0]),
                "iteration": int(cells[1]),
                "y": np.array([float(c) for c in cells[2:2 + n]]),
                "phi": float(cells[2 + n]),
                "rho": float(cells[3 + n]),
                "alpha": float(cells[4 + n]),
                "kind": cells[5 + n],
                "status": cells[6 + n],
                "psi": float(cells[7 + n]),
            }
        )
    return rows


def emit_outputs(result: SolveResult, out_dir, format: str = "kv",
                 config: SolverConfig | None = None) -> dict[str, Path]:
    """Write result, trace, and report files; returns {name: path}.

    The result and trace files are byte-identical across repeat runs with the
    same inputs; timing lives only in report.kv.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    suffix = "json" if format == "json" else "kv"
    paths = {
        "result": out / f"result.{suffix}",
        "trace": out / "trace.csv",
        "report": out / "report.kv",
    }
    paths["result"].write_bytes(render_result_document(result_document(result, config), format).encode())
    paths["trace"].write_bytes(render_trace_table(result).encode())
    report = [
        f"outer_iterations = {result.outer_iterations}",
        f"inner_iterations = {result.inner_iterations}",
        f"phi_final = {repr(float(result.phi_final))}",
        f"wall_ao1_s = {repr(float(result.timings.get('ao1_s', 0.0)))}",
        f"wall_ao2_s = {repr(float(result.timings.get('ao2_s', 0.0)))}",
        f"wall_total_s = {repr(float(result.timings.get('total_s', 0.0)))}",
    ]
    paths["report"].write_bytes(("\n".join(report) + "\n").encode())
    return paths


# -- derivative and conservation self-checks ---------------------------------

@dataclass(frozen=True)
class CheckRow:
    name: str
    ok: bool
    detail: str


def _central(f, z, h=1e-6):
    cols = []
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        cols.append((np.asarray(f(zp)) - np.asarray(f(zm))) / (2 * h))
    return np.stack(cols, axis=-1)


def _rel_err(analytic, fd) -> float:
    scale = max(1.0, float(np.max(np.abs(analytic), initial=0.0)))
    return float(np.max(np.abs(analytic - fd), initial=0.0)) / scale


def _interior_point(net, rng):
    state = State(
        v=rng.uniform(0.96, 1.04, net.n_bus),
        theta=np.where(np.arange(net.n_bus) == net.slack, 0.0, rng.uniform(-0.25, 0.25, net.n_bus)),
    )
    span_l, span_u = net.u_lower, net.u_upper
    u = InputVector.from_vector(span_l + rng.uniform(0.1, 0.9, 2 * net.n_gen) * (span_u - span_l))
    y = SwitchVector(rng.uniform(0.05, 0.95, net.n_dem))
    return state, u, y


def self_check(case: GridCase, seed: int = 2025, points: int = 20, states: int = 100) -> list[CheckRow]:
    """Compare analytic derivatives with central differences and test that a
    lossless copy of the network conserves active power exactly."""
    net = network(case)
    Y = build_admittance(case)
    rng = np.random.default_rng(seed)
    nx, nu = 2 * net.n_bus, 2 * net.n_gen
    worst = {"outflow-jacobian": 0.0, "objective-gradient": 0.0,
             "constraint-jacobian": 0.0, "switch-curvature": 0.0}

    def split(z):
        return (State.from_vector(z[:nx]), InputVector.from_vector(z[nx:nx + nu]),
                SwitchVector(z[nx + nu:]))

    for _ in range(points):
        state, u, y = _interior_point(net, rng)
        dP, dE, dC = jacobians(case, state, u, y)
        fd_p = _central(lambda xv: node_outflow(case, Y, State.from_vector(xv)), state.as_vector())
        worst["outflow-jacobian"] = max(worst["outflow-jacobian"], _rel_err(dP, fd_p))
        z0 = np.concatenate([state.as_vector(), u.as_vector(), y.y])
        fd_e = _central(lambda z: objective_E(case, *split(z)), z0)
        worst["objective-gradient"] = max(worst["objective-gradient"], _rel_err(dE, fd_e))
        fd_c = _central(lambda z: constraints_C(case, *split(z)), z0)
        worst["constraint-jacobian"] = max(worst["constraint-jacobian"], _rel_err(dC, fd_c))
        duals = rng.uniform(-1.0, 1.0, net.n_c_rows)

        def grad_l0_y(yy):
            _, dE2, dC2 = jacobians(case, state, u, SwitchVector(yy))
            return (dE2 - duals @ dC2)[nx + nu:]

        Qd = hessian_Q(case, state, u, y, duals)
        worst["switch-curvature"] = max(worst["switch-curvature"], _rel_err(Qd, _central(grad_l0_y, y.y.copy())))

    checks = [
        CheckRow(name, err <= 1e-6, f"max relative error {err:.3e} over {points} points")
        for name, err in worst.items()
    ]

    twin = replace(case, branches=tuple(
        Branch(from_bus=b.from_bus, to_bus=b.to_bus, g=0.0, b=b.b) for b in case.branches
    ))
    Yt = build_admittance(twin)
    net_t = network(twin)
    worst_sum = 0.0
    for _ in range(states):
        state = State(v=rng.uniform(0.9, 1.1, net_t.n_bus), theta=rng.uniform(-0.6, 0.6, net_t.n_bus))
        worst_sum = max(worst_sum, abs(float(node_outflow(twin, Yt, state)[0::2].sum())))
    checks.append(CheckRow(
        "lossless-active-sum", worst_sum <= 1e-10,
        f"max |sum| {worst_sum:.3e} over {states} states",
    ))
    return checks


# -- config files and the command line ----------------------------------------

_CONFIG_KEYS = {
    "variant", "full_rows", "single_shot", "rho0", "beta", "rho_max", "eps",
    "outer_eps", "outer_max_iters", "seed", "scenario",
}


def _parse_bool(key: str, value: str) -> bool:
    if value not in ("true", "false"):
        raise ValueError(f"{key}: expected true or false, got {value!r}")
    return value == "true"


def config_from_mapping(mapping: dict[str, str], variant: str | None = None,
                        seed: int | None = None) -> SolverConfig:
    """Build a SolverConfig from flat key = value text.

    scenario.* keys configure the stress transform and imply scenario = stress;
    an explicit seed (flag or config key) also drives the scenario rank draw
    unless scenario.rank_seed pins it, so one --seed flag controls the run.
    """
    scen_over = {k.split(".", 1)[1]: v for k, v in mapping.items() if k.startswith("scenario.")}
    unknown = set(mapping) - _CONFIG_KEYS - {f"scenario.{k}" for k in scen_over}
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")

    schedule = PenaltySchedule(
        rho0=float(mapping.get("rho0", 1.0)),
        beta=float(mapping.get("beta", 10.0)),
        rho_max=float(mapping.get("rho_max", 1e12)),
        eps=float(mapping.get("eps", 1e-6)),
    )
    tag = variant if variant is not None else mapping.get("variant", "mixed")
    var = Ao2Variant(
        tag=tag,
        full_rows=_parse_bool("full_rows", mapping.get("full_rows", "false")),
        single_shot=_parse_bool("single_shot", mapping.get("single_shot", "false")),
    )
    explicit_seed = seed is not None or "seed" in mapping
    run_seed = seed if seed is not None else int(mapping.get("seed", 2025))

    mode = mapping.get("scenario", "stress" if scen_over else "none")
    if mode not in ("none", "stress"):
        raise ValueError(f"scenario: expected none or stress, got {mode!r}")
    scenario = None
    if mode == "stress":
        scenario = scenario_from_mapping(scen_over)
        if explicit_seed and "rank_seed" not in scen_over:
            scenario = replace(scenario, rank_seed=run_seed)

    return SolverConfig(
        schedule=schedule,
        variant=var,
        outer_eps=float(mapping.get("outer_eps", 1e-6)),
        outer_max_iters=int(mapping.get("outer_max_iters", 20)),
        seed=run_seed,
        scenario=scenario,
    )


def _load(args) -> tuple[GridCase, SolverConfig]:
    case = parse_case(Path(args.case).read_text())
    mapping = parse_kv_config(Path(args.config).read_text()) if args.config else {}
    cfg = config_from_mapping(mapping, variant=getattr(args, "variant", None), seed=args.seed)
    return case, cfg


def _cmd_solve(args) -> int:
    case, cfg = _load(args)
    try:
        result = run_ao_sbqp(case, cfg)
    except DriverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.best is not None:
            best = exc.best
            print(
                f"best iterate: objective {best.objective:.6f}, "
                f"served {best.supplied_active:.4f} p.u. active, "
                f"{int(np.sum(best.switches.y < 0.5))} of {best.switches.y.size} demands off",
                file=sys.stderr,
            )
        return 2 if exc.kind == "infeasible" else 3
    paths = emit_outputs(result, args.out_dir, args.format, cfg)
    off = int(np.sum(result.switches.y < 0.5))
    print(f"objective {result.objective:.6f}  served {result.supplied_active:.4f} p.u. active  "
          f"{off} of {result.switches.y.size} demands off")
    print(f"outer iterations {result.outer_iterations}  "
          f"switching iterations {result.inner_iterations}  "
          f"phi {result.phi_final:.3e}")
    for name in ("result", "trace", "report"):
        print(f"wrote {paths[name]}")
    return 0


def _cmd_oracle(args) -> int:
    case, cfg = _load(args)
    try:
        entries = enumerate_oracle(case, cfg)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(entries[0].switches) if entries else 0
    lines = [",".join([f"y_{k}" for k in range(n)] + ["feasible", "objective"])]
    for e in entries:
        lines.append(",".join([str(b) for b in e.switches]
                              + ["true" if e.feasible else "false", repr(e.objective)]))
    path = out / "oracle.csv"
    path.write_bytes(("\n".join(lines) + "\n").encode())
    feasible = [e for e in entries if e.feasible]
    print(f"{len(entries)} configurations, {len(feasible)} feasible")
    for e in feasible[:5]:
        print(f"  y={''.join(str(b) for b in e.switches)}  objective {e.objective:.6f}")
    print(f"wrote {path}")
    return 0


def _cmd_check(args) -> int:
    case, cfg = _load(args)
    checks = self_check(case, seed=cfg.seed)
    for row in checks:
        print(f"{'PASS' if row.ok else 'FAIL'} {row.name}: {row.detail}")
    return 0 if all(row.ok for row in checks) else 2


def _cmd_scenario(args) -> int:
    case, cfg = _load(args)
    scenario = cfg.scenario
    if scenario is None:
        scenario = ScenarioConfig(rank_seed=cfg.seed)
    sys.stdout.write(serialize_case(apply_scenario(case, scenario)))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridshed",
        description="Optimal demand shut-off for islanded grids with insufficient generation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, out_dir=False, fmt=False, variant=False):
        sp.add_argument("--case", required=True, help="case file in .m table format")
        sp.add_argument("--config", help="solver config file, key = value lines")
        sp.add_argument("--seed", type=int, help="run seed, overrides the config")
        if variant:
            sp.add_argument("--variant", choices=VARIANT_TAGS, help="switch subproblem model")
        if out_dir:
            sp.add_argument("--out-dir", default=".", help="directory for output files")
        if fmt:
            sp.add_argument("--format", choices=("kv", "json"), default="kv",
                            help="result document format")

    sp = sub.add_parser("solve", help="run the alternating solver")
    common(sp, out_dir=True, fmt=True, variant=True)
    sp.set_defaults(func=_cmd_solve)

    sp = sub.add_parser("oracle", help="enumerate every switch set (small cases)")
    common(sp, out_dir=True)
    sp.set_defaults(func=_cmd_oracle)

    sp = sub.add_parser("check", help="finite-difference and conservation self-checks")
    common(sp)
    sp.set_defaults(func=_cmd_check)

    sp = sub.add_parser("scenario", help="print the stressed variant of a case")
    common(sp)
    sp.set_defaults(func=_cmd_scenario)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, CaseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
