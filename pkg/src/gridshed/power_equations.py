"""AC power flow quantities and their derivatives.

Layout conventions, frozen because dual variables index into them:

* state vector x: per-bus (v, theta) pairs in ascending bus id,
  ``x = [v_1, th_1, v_2, th_2, ...]``, length 2N including the slack bus
* input vector u: per-generator (pg, qg) pairs in ascending bus id, length 2G
* power vectors: per-bus (active, reactive) pairs, length 2N
* constraint stack C, length 8N + 4G, in this fixed row order:
  P - S (2N), S - P (2N), x_lo - x (2N), x - x_hi (2N),
  u_lo - u (2G), u - u_hi (2G)
* combined derivative column order: x, then u, then y (one column per demand)
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grid_model import AdmittanceMatrix, GridCase, build_admittance

Y_BOX_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class State:
    """Voltage magnitudes and angles per bus (ascending bus id)."""

    v: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        if self.v.shape != self.theta.shape or self.v.ndim != 1:
            raise ValueError("v and theta must be 1-d arrays of equal length")

    def as_vector(self) -> np.ndarray:
        out = np.empty(2 * self.v.size)
        out[0::2] = self.v
        out[1::2] = self.theta
        return out

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "State":
        x = np.asarray(x, dtype=float)
        return cls(v=x[0::2].copy(), theta=x[1::2].copy())


@dataclass(frozen=True, eq=False)
class InputVector:
    """Generator injections per generator (ascending bus id)."""

    pg: np.ndarray
    qg: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pg", np.asarray(self.pg, dtype=float))
        object.__setattr__(self, "qg", np.asarray(self.qg, dtype=float))
        if self.pg.shape != self.qg.shape or self.pg.ndim != 1:
            raise ValueError("pg and qg must be 1-d arrays of equal length")

    def as_vector(self) -> np.ndarray:
        out = np.empty(2 * self.pg.size)
        out[0::2] = self.pg
        out[1::2] = self.qg
        return out

    @classmethod
    def from_vector(cls, u: np.ndarray) -> "InputVector":
        u = np.asarray(u, dtype=float)
        return cls(pg=u[0::2].copy(), qg=u[1::2].copy())


@dataclass(frozen=True, eq=False)
class SwitchVector:
    """One switch value per demand node, ordered like case.demands."""

    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        if self.y.ndim != 1:
            raise ValueError("y must be a 1-d array")
        if self.y.size and (self.y.min() < -Y_BOX_TOL or self.y.max() > 1.0 + Y_BOX_TOL):
            raise ValueError("switch values must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class Network:
    """Precomputed index arrays shared by every evaluation routine."""

    n_bus: int
    n_gen: int
    n_dem: int
    G: np.ndarray
    B: np.ndarray
    slack: int                 # bus position of the slack
    slack_v: float
    gen_pos: np.ndarray        # bus position of each generator
    dem_pos: np.ndarray        # bus position of each demand
    pd: np.ndarray
    qd: np.ndarray
    rank: np.ndarray
    dem_pg_col: np.ndarray     # pg column in u per demand, -1 when no generator there
    x_lower: np.ndarray
    x_upper: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray

    @property
    def n_c_rows(self) -> int:
        return 8 * self.n_bus + 4 * self.n_gen

    @property
    def n_cols(self) -> int:
        return 2 * self.n_bus + 2 * self.n_gen + self.n_dem


@lru_cache(maxsize=32)
def network(case: GridCase) -> Network:
    admittance = build_admittance(case)
    index = {b.id: i for i, b in enumerate(case.buses)}
    n = len(case.buses)
    ngen = len(case.generators)
    gen_pos = np.array([index[g.bus] for g in case.generators], dtype=int)
    dem_pos = np.array([index[d.bus] for d in case.demands], dtype=int)
    pg_col = {g.bus: 2 * j for j, g in enumerate(case.generators)}
    dem_pg_col = np.array([pg_col.get(d.bus, -1) for d in case.demands], dtype=int)
    x_lower = np.empty(2 * n)
    x_upper = np.empty(2 * n)
    x_lower[0::2] = [b.v_min for b in case.buses]
    x_upper[0::2] = [b.v_max for b in case.buses]
    x_lower[1::2] = [b.theta_min for b in case.buses]
    x_upper[1::2] = [b.theta_max for b in case.buses]
    u_lower = np.empty(2 * ngen)
    u_upper = np.empty(2 * ngen)
    u_lower[0::2] = [g.pg_min for g in case.generators]
    u_upper[0::2] = [g.pg_max for g in case.generators]
    u_lower[1::2] = [g.qg_min for g in case.generators]
    u_upper[1::2] = [g.qg_max for g in case.generators]
    return Network(
        n_bus=n,
        n_gen=ngen,
        n_dem=len(case.demands),
        G=admittance.G,
        B=admittance.B,
        slack=index[case.slack_bus.id],
        slack_v=case.slack_voltage(),
        gen_pos=gen_pos,
        dem_pos=dem_pos,
        pd=np.array([d.pd for d in case.demands]),
        qd=np.array([d.qd for d in case.demands]),
        rank=np.array([d.rank for d in case.demands]),
        dem_pg_col=dem_pg_col,
        x_lower=x_lower,
        x_upper=x_upper,
        u_lower=u_lower,
        u_upper=u_upper,
    )


def flat_state(case: GridCase) -> State:
    """All magnitudes at the slack voltage, all angles zero."""
    n = len(case.buses)
    return State(v=np.full(n, case.slack_voltage()), theta=np.zeros(n))


def line_flow(case: GridCase, state: State, k: int, l: int) -> tuple[float, float]:
    """Complex power leaving bus k over branch (k, l), as an (active, reactive) pair."""
    br = next(
        (b for b in case.branches
         if (b.from_bus == k and b.to_bus == l) or (b.from_bus == l and b.to_bus == k)),
        None,
    )
    if br is None:
        raise ValueError(f"no branch between buses {k} and {l}")
    index = {b.id: i for i, b in enumerate(case.buses)}
    vk, vl = state.v[index[k]], state.v[index[l]]
    th = state.theta[index[k]] - state.theta[index[l]]
    g, b = br.g, br.b
    p = vk * vk * g - vk * vl * (g * np.cos(th) + b * np.sin(th))
    q = -vk * vk * b - vk * vl * (g * np.sin(th) - b * np.cos(th))
    return float(p), float(q)


def _trig_parts(net: Network, state: State):
    th = state.theta[:, None] - state.theta[None, :]
    c, s = np.cos(th), np.sin(th)
    A1 = net.G * c + net.B * s
    A2 = net.G * s - net.B * c
    return A1, A2


def node_outflow(case: GridCase, admittance: AdmittanceMatrix, state: State) -> np.ndarray:
    """Stacked (active, reactive) outflow per bus: row sums of the trig-weighted Laplacian."""
    th = state.theta[:, None] - state.theta[None, :]
    c, s = np.cos(th), np.sin(th)
    v = state.v
    p = v * ((admittance.G * c + admittance.B * s) @ v)
    q = v * ((admittance.G * s - admittance.B * c) @ v)
    out = np.empty(2 * v.size)
    out[0::2] = p
    out[1::2] = q
    return out


def supply(case: GridCase, input: InputVector, y: SwitchVector) -> np.ndarray:
    """Stacked injections: generation minus y^2-scaled demand."""
    net = network(case)
    out = np.zeros(2 * net.n_bus)
    out[2 * net.gen_pos] += input.pg
    out[2 * net.gen_pos + 1] += input.qg
    y2 = y.y * y.y
    out[2 * net.dem_pos] -= y2 * net.pd
    out[2 * net.dem_pos + 1] -= y2 * net.qd
    return out


def _active_outflow(net: Network, state: State) -> np.ndarray:
    A1, _ = _trig_parts(net, state)
    return state.v * (A1 @ state.v)


def objective_E(case: GridCase, state: State, input: InputVector, y: SwitchVector) -> float:
    """Weighted delivery objective; demand buses without a generator take pg = 0."""
    net = network(case)
    p_act = _active_outflow(net, state)[net.dem_pos]
    pg_at_dem = np.where(net.dem_pg_col >= 0, input.pg[net.dem_pg_col // 2], 0.0)
    return float(np.sum(y.y * net.rank * (pg_at_dem - p_act)))


def constraints_C(case: GridCase, state: State, input: InputVector, y: SwitchVector) -> np.ndarray:
    """Inequality stack, feasible iff every entry is <= 0."""
    net = network(case)
    P = node_outflow(case, AdmittanceMatrix(G=net.G, B=net.B), state)
    S = supply(case, input, y)
    x = state.as_vector()
    u = input.as_vector()
    return np.concatenate([
        P - S,
        S - P,
        net.x_lower - x,
        x - net.x_upper,
        net.u_lower - u,
        u - net.u_upper,
    ])


def _outflow_jacobian(net: Network, state: State) -> np.ndarray:
    """d(node_outflow)/dx with interleaved rows and columns, shape (2N, 2N)."""
    v = state.v
    A1, A2 = _trig_parts(net, state)
    a1v = A1 @ v
    a2v = A2 @ v
    p = v * a1v
    q = v * a2v
    dP_dv = v[:, None] * A1
    np.fill_diagonal(dP_dv, a1v + v * np.diag(net.G))
    dP_dth = v[:, None] * v[None, :] * A2
    np.fill_diagonal(dP_dth, -q - v * v * np.diag(net.B))
    dQ_dv = v[:, None] * A2
    np.fill_diagonal(dQ_dv, a2v - v * np.diag(net.B))
    dQ_dth = -v[:, None] * v[None, :] * A1
    np.fill_diagonal(dQ_dth, p - v * v * np.diag(net.G))
    n = net.n_bus
    out = np.empty((2 * n, 2 * n))
    out[0::2, 0::2] = dP_dv
    out[0::2, 1::2] = dP_dth
    out[1::2, 0::2] = dQ_dv
    out[1::2, 1::2] = dQ_dth
    return out


def jacobians(case: GridCase, state: State, input: InputVector, y: SwitchVector):
    """Analytic first derivatives.

    Returns (dP_dx, dE, dC): the outflow Jacobian (2N x 2N), the objective
    gradient over (x, u, y), and the constraint Jacobian over (x, u, y).
    """
    net = network(case)
    n, ngen, ndem = net.n_bus, net.n_gen, net.n_dem
    nx, nu = 2 * n, 2 * ngen
    dP_dx = _outflow_jacobian(net, state)

    # objective: E = sum_D y r (pg - P_act); P_act rows are the even rows of dP_dx
    w_dem = y.y * net.rank
    dE = np.zeros(net.n_cols)
    dE[:nx] = -(w_dem[:, None] * dP_dx[2 * net.dem_pos, :]).sum(axis=0)
    has_gen = net.dem_pg_col >= 0
    dE_u = np.zeros(nu)
    np.add.at(dE_u, net.dem_pg_col[has_gen], w_dem[has_gen])
    dE[nx:nx + nu] = dE_u
    p_act = _active_outflow(net, state)[net.dem_pos]
    pg_at_dem = np.where(has_gen, input.pg[net.dem_pg_col // 2], 0.0)
    dE[nx + nu:] = net.rank * (pg_at_dem - p_act)

    # supply derivatives: d(S)/du is a selector, d(S)/dy = -2y (pd, qd) per demand bus
    dS_du = np.zeros((nx, nu))
    dS_du[2 * net.gen_pos, 0::2] = np.eye(ngen)
    dS_du[2 * net.gen_pos + 1, 1::2] = np.eye(ngen)
    dS_dy = np.zeros((nx, ndem))
    dS_dy[2 * net.dem_pos, np.arange(ndem)] = -2.0 * y.y * net.pd
    dS_dy[2 * net.dem_pos + 1, np.arange(ndem)] = -2.0 * y.y * net.qd

    dC = np.zeros((net.n_c_rows, net.n_cols))
    r = 0
    dC[r:r + nx, :nx] = dP_dx
    dC[r:r + nx, nx:nx + nu] = -dS_du
    dC[r:r + nx, nx + nu:] = -dS_dy
    r += nx
    dC[r:r + nx] = -dC[:nx]
    r += nx
    dC[r:r + nx, :nx] = -np.eye(nx)
    r += nx
    dC[r:r + nx, :nx] = np.eye(nx)
    r += nx
    dC[r:r + nu, nx:nx + nu] = -np.eye(nu)
    r += nu
    dC[r:r + nu, nx:nx + nu] = np.eye(nu)
    return dP_dx, dE, dC


def hessian_Q(case: GridCase, state: State, input: InputVector, y: SwitchVector,
              duals: np.ndarray) -> np.ndarray:
    """y-Hessian of E - duals @ C; diagonal since only the y^2 demand terms curve."""
    net = network(case)
    duals = np.asarray(duals, dtype=float)
    if duals.shape != (net.n_c_rows,):
        raise ValueError(f"duals must have length {net.n_c_rows}")
    nx = 2 * net.n_bus
    lam_p = duals[2 * net.dem_pos] - duals[nx + 2 * net.dem_pos]
    lam_q = duals[2 * net.dem_pos + 1] - duals[nx + 2 * net.dem_pos + 1]
    return np.diag(-2.0 * (lam_p * net.pd + lam_q * net.qd))


def phi(y: np.ndarray) -> float:
    y = np.asarray(y, dtype=float)
    return float(np.dot(y, 1.0 - y))


def grad_phi(y: np.ndarray) -> np.ndarray:
    return 1.0 - 2.0 * np.asarray(y, dtype=float)
