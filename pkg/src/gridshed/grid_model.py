"""Grid case model: file parsing, admittance construction, scenario transforms.

The case format is a plain-text subset of the MATPOWER layout: the
``baseMVA`` scalar plus the ``bus``, ``gen`` and ``branch`` matrices, read at
their standard column positions (documented in the README). Unknown columns
are ignored. Demands and generator limits are normalized to per unit at
parse time; branch series impedance r + jx is converted to the series
admittance g = r/(r^2+x^2), b = -x/(r^2+x^2).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_THETA_BOUND = math.pi / 2.0

# column positions in the source tables (0-based)
BUS_ID, BUS_TYPE, BUS_PD, BUS_QD = 0, 1, 2, 3
BUS_VMAX, BUS_VMIN = 11, 12
GEN_BUS, GEN_QMAX, GEN_QMIN, GEN_PMAX, GEN_PMIN = 0, 3, 4, 8, 9
BR_FROM, BR_TO, BR_R, BR_X = 0, 1, 2, 3
SLACK_TYPE = 3


class CaseError(ValueError):
    """Invalid grid case data."""


class ParseError(CaseError):
    """Malformed case text; carries the offending line number."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class MalformedRowError(ParseError):
    pass


class UnknownBusError(ParseError):
    pass


class DuplicateBranchError(ParseError):
    pass


class ZeroImpedanceError(ParseError):
    pass


class ScenarioError(CaseError):
    """Scenario transform produced an invalid case."""


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float
    v_max: float
    theta_min: float = -DEFAULT_THETA_BOUND
    theta_max: float = DEFAULT_THETA_BOUND
    is_slack: bool = False

    def __post_init__(self):
        if not self.v_min > 0:
            raise CaseError(f"bus {self.id}: v_min must be positive")
        if self.v_min > self.v_max:
            raise CaseError(f"bus {self.id}: v_min > v_max")
        if self.theta_min > self.theta_max:
            raise CaseError(f"bus {self.id}: theta_min > theta_max")


@dataclass(frozen=True)
class Branch:
    """Series element with admittance g + jb.

    The source impedance r + jx is kept alongside so serialization can emit
    the original numbers; when constructed from (g, b) alone it is derived.
    """

    from_bus: int
    to_bus: int
    g: float
    b: float
    r: float | None = None
    x: float | None = None

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus}: self loop")
        if self.r is None or self.x is None:
            mag2 = self.g * self.g + self.b * self.b
            if mag2 == 0.0:
                raise CaseError(f"branch {self.from_bus}-{self.to_bus}: zero admittance")
            object.__setattr__(self, "r", self.g / mag2)
            object.__setattr__(self, "x", -self.b / mag2)


@dataclass(frozen=True)
class Generator:
    bus: int
    pg_min: float
    pg_max: float
    qg_min: float
    qg_max: float

    def __post_init__(self):
        if self.pg_min > self.pg_max or self.qg_min > self.qg_max:
            raise CaseError(f"generator at bus {self.bus}: empty bound interval")


@dataclass(frozen=True)
class DemandSpec:
    bus: int
    pd: float
    qd: float
    rank: float = 1.0

    def __post_init__(self):
        if not self.rank > 0:
            raise CaseError(f"demand at bus {self.bus}: rank must be positive")
        if self.pd < 0 or not math.isfinite(self.pd) or not math.isfinite(self.qd):
            raise CaseError(f"demand at bus {self.bus}: bad pd/qd")


@dataclass(frozen=True)
class GridCase:
    """A grid case: buses, branches, generators, switchable demands.

    Collections are kept sorted by bus id; all quantities are per unit on
    ``base_mva``.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    demands: tuple[DemandSpec, ...]
    base_mva: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(sorted(self.buses, key=lambda b: b.id)))
        object.__setattr__(
            self, "branches", tuple(sorted(self.branches, key=lambda b: (b.from_bus, b.to_bus)))
        )
        object.__setattr__(self, "generators", tuple(sorted(self.generators, key=lambda g: g.bus)))
        object.__setattr__(self, "demands", tuple(sorted(self.demands, key=lambda d: d.bus)))
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise CaseError("duplicate bus ids")
        known = set(ids)
        slacks = [b.id for b in self.buses if b.is_slack]
        if len(slacks) != 1:
            raise CaseError(f"expected exactly one slack bus, found {len(slacks)}")
        seen_pairs = set()
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise CaseError(f"branch {br.from_bus}-{br.to_bus}: unknown bus reference")
            pair = frozenset((br.from_bus, br.to_bus))
            if pair in seen_pairs:
                raise CaseError(f"branch {br.from_bus}-{br.to_bus}: duplicate branch")
            seen_pairs.add(pair)
        gen_buses = [g.bus for g in self.generators]
        if len(set(gen_buses)) != len(gen_buses):
            raise CaseError("duplicate generator bus")
        for g in self.generators:
            if g.bus not in known:
                raise CaseError(f"generator at bus {g.bus}: unknown bus reference")
        dem_buses = [d.bus for d in self.demands]
        if len(set(dem_buses)) != len(dem_buses):
            raise CaseError("duplicate demand bus")
        if not self.demands:
            raise CaseError("demand set is empty")
        for d in self.demands:
            if d.bus not in known:
                raise CaseError(f"demand at bus {d.bus}: unknown bus reference")
        if not self.base_mva > 0:
            raise CaseError("base_mva must be positive")

    @property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses)

    @property
    def slack_bus(self) -> Bus:
        return next(b for b in self.buses if b.is_slack)

    @property
    def generator_buses(self) -> tuple[int, ...]:
        return tuple(g.bus for g in self.generators)

    @property
    def demand_buses(self) -> tuple[int, ...]:
        return tuple(d.bus for d in self.demands)

    def slack_voltage(self) -> float:
        # magnitude pinned at the reference bus: 1.0 clipped into its band
        s = self.slack_bus
        return min(max(1.0, s.v_min), s.v_max)


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Real and imaginary parts of the complex Laplacian G + jB."""

    G: np.ndarray
    B: np.ndarray


@dataclass(frozen=True)
class ScenarioConfig:
    """Demand-to-capacity mismatch transform.

    Defaults reproduce the stress scenario used throughout the tests:
    +2.5 p.u. total active and +0.7 p.u. total reactive demand spread
    proportionally over loaded buses, reactive generator bounds halved,
    active upper bounds cut to 70%, ranks redrawn uniformly from
    {1..rank_levels}, and a switch at every bus. In ``multiplicative``
    mode pd_shift/qd_shift act as per-bus factors instead. rank_seed None
    keeps the existing ranks.
    """

    pd_shift: float = 2.5
    qd_shift: float = 0.7
    shift_mode: str = "additive-total"
    qg_bound_scale: float = 0.5
    pg_upper_scale: float = 0.7
    rank_levels: int = 5
    rank_seed: int | None = 6
    demand_set_mode: str = "all-buses"

    def __post_init__(self):
        if self.shift_mode not in ("additive-total", "multiplicative"):
            raise CaseError(f"unknown shift_mode {self.shift_mode!r}")
        if self.demand_set_mode not in ("all-buses", "loaded-buses"):
            raise CaseError(f"unknown demand_set_mode {self.demand_set_mode!r}")
        for name in ("qg_bound_scale", "pg_upper_scale"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise CaseError(f"{name} must lie in (0, 1]")
        if self.rank_levels < 1:
            raise CaseError("rank_levels must be >= 1")


_ASSIGN_RE = re.compile(r"^\s*(?:mpc\.)?(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    return line.split("%", 1)[0]


def _parse_matrix_rows(name, lines, start_idx):
    """Collect the numeric rows of ``name = [ ... ];`` starting at start_idx."""
    rows = []
    i = start_idx
    while i < len(lines):
        raw = _strip_comment(lines[i][1]).strip()
        i += 1
        if not raw:
            continue
        done = raw.endswith("];") or raw == "]"
        raw = raw.replace("];", " ").replace("]", " ").strip()
        for chunk in raw.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                rows.append(([float(t) for t in chunk.split()], lines[i - 1][0]))
            except ValueError:
                raise MalformedRowError(f"bad numeric row in {name}", lines[i - 1][0])
        if done:
            return rows, i
    raise MalformedRowError(f"unterminated matrix {name}", lines[start_idx - 1][0])


def _require(row, line_no, name, n_cols):
    if len(row) < n_cols:
        raise MalformedRowError(f"{name} row needs at least {n_cols} columns, got {len(row)}", line_no)


def parse_case(text: str) -> GridCase:
    """Parse case text into a validated GridCase (all quantities p.u.)."""
    lines = list(enumerate(text.splitlines(), start=1))
    base_mva = 100.0
    tables: dict[str, list] = {}
    i = 0
    while i < len(lines):
        line_no, raw = lines[i]
        stripped = _strip_comment(raw).strip()
        i += 1
        if not stripped or stripped.startswith("function"):
            continue
        m = _ASSIGN_RE.match(stripped)
        if not m:
            continue
        name, rest = m.group(1), m.group(2).strip()
        if rest.startswith("["):
            rest = rest[1:].strip()
            rows = []
            if rest:
                # rows may start on the assignment line itself
                lines.insert(i, (line_no, rest))
            rows, i = _parse_matrix_rows(name, lines, i)
            tables[name] = rows
        else:
            value = rest.rstrip(";").strip()
            if name == "baseMVA":
                try:
                    base_mva = float(value)
                except ValueError:
                    raise MalformedRowError("baseMVA is not numeric", line_no)
    if "bus" not in tables:
        raise MalformedRowError("missing bus table", None)

    buses = []
    bus_ids = set()
    for row, ln in tables["bus"]:
        _require(row, ln, "bus", BUS_VMIN + 1)
        buses.append(
            Bus(
                id=int(row[BUS_ID]),
                v_min=row[BUS_VMIN],
                v_max=row[BUS_VMAX],
                is_slack=int(row[BUS_TYPE]) == SLACK_TYPE,
            )
        )
        bus_ids.add(int(row[BUS_ID]))

    branches = []
    seen = set()
    for row, ln in tables.get("branch", []):
        _require(row, ln, "branch", BR_X + 1)
        f, t = int(row[BR_FROM]), int(row[BR_TO])
        if f not in bus_ids or t not in bus_ids:
            raise UnknownBusError(f"branch references unknown bus {f if f not in bus_ids else t}", ln)
        if frozenset((f, t)) in seen:
            raise DuplicateBranchError(f"duplicate branch {f}-{t}", ln)
        seen.add(frozenset((f, t)))
        r, x = row[BR_R], row[BR_X]
        den = r * r + x * x
        if den == 0.0:
            raise ZeroImpedanceError(f"branch {f}-{t} has zero impedance", ln)
        branches.append(Branch(from_bus=f, to_bus=t, g=r / den, b=-x / den, r=r, x=x))

    gens = []
    for row, ln in tables.get("gen", []):
        _require(row, ln, "gen", GEN_PMIN + 1)
        bus = int(row[GEN_BUS])
        if bus not in bus_ids:
            raise UnknownBusError(f"generator references unknown bus {bus}", ln)
        gens.append(
            Generator(
                bus=bus,
                pg_min=row[GEN_PMIN] / base_mva,
                pg_max=row[GEN_PMAX] / base_mva,
                qg_min=row[GEN_QMIN] / base_mva,
                qg_max=row[GEN_QMAX] / base_mva,
            )
        )

    ranks: dict[int, float] = {}
    for row, ln in tables.get("demand_rank", []):
        _require(row, ln, "demand_rank", 2)
        bus = int(row[0])
        if bus not in bus_ids:
            raise UnknownBusError(f"demand_rank references unknown bus {bus}", ln)
        ranks[bus] = row[1]

    # optional exact per-unit tables written by serialize_case; they win over
    # the MVA-scaled columns, which round-trip only approximately
    demand_pu: dict[int, tuple[float, float]] = {}
    for row, ln in tables.get("demand_pu", []):
        _require(row, ln, "demand_pu", 3)
        bus = int(row[0])
        if bus not in bus_ids:
            raise UnknownBusError(f"demand_pu references unknown bus {bus}", ln)
        demand_pu[bus] = (row[1], row[2])
    gen_pu: dict[int, tuple[float, float, float, float]] = {}
    for row, ln in tables.get("gen_pu", []):
        _require(row, ln, "gen_pu", 5)
        bus = int(row[0])
        if bus not in bus_ids:
            raise UnknownBusError(f"gen_pu references unknown bus {bus}", ln)
        gen_pu[bus] = (row[1], row[2], row[3], row[4])
    theta_bounds: dict[int, tuple[float, float]] = {}
    for row, ln in tables.get("theta_bound", []):
        _require(row, ln, "theta_bound", 3)
        bus = int(row[0])
        if bus not in bus_ids:
            raise UnknownBusError(f"theta_bound references unknown bus {bus}", ln)
        theta_bounds[bus] = (row[1], row[2])
    branch_pu: dict[tuple[int, int], tuple[float, float]] = {}
    for row, ln in tables.get("branch_pu", []):
        _require(row, ln, "branch_pu", 4)
        branch_pu[(int(row[0]), int(row[1]))] = (row[2], row[3])
    if branch_pu:
        branches = [
            replace(br, g=branch_pu[(br.from_bus, br.to_bus)][0],
                    b=branch_pu[(br.from_bus, br.to_bus)][1])
            if (br.from_bus, br.to_bus) in branch_pu
            else br
            for br in branches
        ]

    if theta_bounds:
        buses = [
            replace(b, theta_min=theta_bounds[b.id][0], theta_max=theta_bounds[b.id][1])
            if b.id in theta_bounds
            else b
            for b in buses
        ]
    if gen_pu:
        gens = [
            Generator(bus=g.bus, pg_min=gen_pu[g.bus][0], pg_max=gen_pu[g.bus][1],
                      qg_min=gen_pu[g.bus][2], qg_max=gen_pu[g.bus][3])
            if g.bus in gen_pu
            else g
            for g in gens
        ]

    demands = []
    for row, ln in tables["bus"]:
        bus = int(row[BUS_ID])
        pd, qd = demand_pu.get(bus, (row[BUS_PD] / base_mva, row[BUS_QD] / base_mva))
        if pd != 0.0 or qd != 0.0 or bus in ranks or bus in demand_pu:
            demands.append(DemandSpec(bus=bus, pd=pd, qd=qd, rank=ranks.get(bus, 1.0)))

    try:
        return GridCase(
            buses=tuple(buses),
            branches=tuple(branches),
            generators=tuple(gens),
            demands=tuple(demands),
            base_mva=base_mva,
        )
    except CaseError as exc:
        raise ParseError(str(exc), None) from exc


def _fmt(x: float) -> str:
    return format(x, ".17g")


def serialize_case(case: GridCase) -> str:
    """Emit case text that parses back to an equal GridCase."""
    out = ["function mpc = case", "", f"mpc.baseMVA = {_fmt(case.base_mva)};", ""]
    demand_by_bus = {d.bus: d for d in case.demands}
    gen_buses = set(case.generator_buses)
    out.append("%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin")
    out.append("mpc.bus = [")
    for b in case.buses:
        d = demand_by_bus.get(b.id)
        pd = d.pd * case.base_mva if d else 0.0
        qd = d.qd * case.base_mva if d else 0.0
        btype = SLACK_TYPE if b.is_slack else (2 if b.id in gen_buses else 1)
        out.append(
            f"\t{b.id}\t{btype}\t{_fmt(pd)}\t{_fmt(qd)}\t0\t0\t1\t1\t0\t0\t1\t{_fmt(b.v_max)}\t{_fmt(b.v_min)};"
        )
    out.append("];\n")
    out.append("%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin")
    out.append("mpc.gen = [")
    for g in case.generators:
        out.append(
            f"\t{g.bus}\t0\t0\t{_fmt(g.qg_max * case.base_mva)}\t{_fmt(g.qg_min * case.base_mva)}"
            f"\t1\t{_fmt(case.base_mva)}\t1\t{_fmt(g.pg_max * case.base_mva)}\t{_fmt(g.pg_min * case.base_mva)};"
        )
    out.append("];\n")
    out.append("%\tfbus\ttbus\tr\tx")
    out.append("mpc.branch = [")
    for br in case.branches:
        out.append(f"\t{br.from_bus}\t{br.to_bus}\t{_fmt(br.r)}\t{_fmt(br.x)};")
    out.append("];\n")
    out.append("% switchable demands: bus, priority rank")
    out.append("mpc.demand_rank = [")
    for d in case.demands:
        out.append(f"\t{d.bus}\t{_fmt(d.rank)};")
    out.append("];\n")
    out.append("% exact per-unit values; the MVA columns above are informational")
    out.append("mpc.demand_pu = [")
    for d in case.demands:
        out.append(f"\t{d.bus}\t{_fmt(d.pd)}\t{_fmt(d.qd)};")
    out.append("];\n")
    out.append("mpc.gen_pu = [")
    for g in case.generators:
        out.append(
            f"\t{g.bus}\t{_fmt(g.pg_min)}\t{_fmt(g.pg_max)}\t{_fmt(g.qg_min)}\t{_fmt(g.qg_max)};"
        )
    out.append("];\n")
    out.append("mpc.branch_pu = [")
    for br in case.branches:
        out.append(f"\t{br.from_bus}\t{br.to_bus}\t{_fmt(br.g)}\t{_fmt(br.b)};")
    out.append("];")
    nondefault = [
        b for b in case.buses
        if (b.theta_min, b.theta_max) != (-DEFAULT_THETA_BOUND, DEFAULT_THETA_BOUND)
    ]
    if nondefault:
        out.append("\nmpc.theta_bound = [")
        for b in nondefault:
            out.append(f"\t{b.id}\t{_fmt(b.theta_min)}\t{_fmt(b.theta_max)};")
        out.append("];")
    return "\n".join(out) + "\n"


def build_admittance(case: GridCase) -> AdmittanceMatrix:
    """Assemble the dense Laplacian admittance matrix."""
    n = len(case.buses)
    index = {b.id: i for i, b in enumerate(case.buses)}
    G = np.zeros((n, n))
    B = np.zeros((n, n))
    for br in case.branches:
        k, l = index[br.from_bus], index[br.to_bus]
        G[k, l] -= br.g
        G[l, k] -= br.g
        B[k, l] -= br.b
        B[l, k] -= br.b
        G[k, k] += br.g
        G[l, l] += br.g
        B[k, k] += br.b
        B[l, l] += br.b
    return AdmittanceMatrix(G=G, B=B)


def apply_scenario(case: GridCase, cfg: ScenarioConfig) -> GridCase:
    """Apply the mismatch transform; deterministic for a given (case, cfg)."""
    demands = list(case.demands)
    if cfg.demand_set_mode == "loaded-buses":
        demands = [d for d in demands if d.pd != 0.0 or d.qd != 0.0]
    if cfg.shift_mode == "additive-total":
        pd_total = sum(d.pd for d in demands)
        qd_total = sum(d.qd for d in demands)
        if cfg.pd_shift != 0.0 and pd_total <= 0.0:
            raise ScenarioError("additive pd_shift requires positive total active demand")
        if cfg.qd_shift != 0.0 and qd_total <= 0.0:
            raise ScenarioError("additive qd_shift requires positive total reactive demand")
        demands = [
            replace(
                d,
                pd=d.pd * (1.0 + cfg.pd_shift / pd_total) if cfg.pd_shift != 0.0 else d.pd,
                qd=d.qd * (1.0 + cfg.qd_shift / qd_total) if cfg.qd_shift != 0.0 else d.qd,
            )
            for d in demands
        ]
    else:
        try:
            demands = [replace(d, pd=d.pd * cfg.pd_shift, qd=d.qd * cfg.qd_shift) for d in demands]
        except CaseError as exc:
            raise ScenarioError(str(exc)) from exc
    if cfg.demand_set_mode == "all-buses":
        have = {d.bus for d in demands}
        demands += [DemandSpec(bus=b.id, pd=0.0, qd=0.0) for b in case.buses if b.id not in have]
    demands.sort(key=lambda d: d.bus)
    if cfg.rank_seed is not None:
        rng = np.random.default_rng(cfg.rank_seed)
        draws = rng.integers(1, cfg.rank_levels + 1, size=len(demands))
        demands = [replace(d, rank=float(r)) for d, r in zip(demands, draws)]
    gens = [
        replace(
            g,
            pg_max=g.pg_max * cfg.pg_upper_scale,
            qg_min=g.qg_min * cfg.qg_bound_scale,
            qg_max=g.qg_max * cfg.qg_bound_scale,
        )
        for g in case.generators
    ]
    try:
        return GridCase(
            buses=case.buses,
            branches=case.branches,
            generators=tuple(gens),
            demands=tuple(demands),
            base_mva=case.base_mva,
        )
    except CaseError as exc:
        raise ScenarioError(str(exc)) from exc


def parse_kv_config(text: str) -> dict[str, str]:
    """Parse a flat ``key = value`` config file; '#' starts a comment."""
    out: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CaseError(f"config line {line_no}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_SCENARIO_FIELDS = {
    "pd_shift": float,
    "qd_shift": float,
    "shift_mode": str,
    "qg_bound_scale": float,
    "pg_upper_scale": float,
    "rank_levels": int,
    "rank_seed": lambda s: None if s.lower() == "none" else int(s),
    "demand_set_mode": str,
}


def scenario_from_mapping(mapping: dict[str, str]) -> ScenarioConfig:
    kwargs = {}
    for key, conv in _SCENARIO_FIELDS.items():
        if key in mapping:
            kwargs[key] = conv(mapping[key])
    return ScenarioConfig(**kwargs)
