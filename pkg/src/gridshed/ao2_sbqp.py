"""Sequential Boolean QP over the demand switches.

The continuous stage hands over an operating point plus constraint duals;
this module builds small quadratic subproblems in the switch step, drives
them under a growing complementarity penalty, and returns a binary switch
vector once phi(y) = sum y(1 - y) is inside tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_model import GridCase
from .power_equations import (
    InputVector,
    State,
    SwitchVector,
    constraints_C,
    grad_phi,
    hessian_Q,
    jacobians,
    network,
    phi,
)
from .qp_core import QpProblem, solve_qp

VARIANT_TAGS = ("mixed", "relaxed-one", "relaxed-two")
CURVATURE_FLOOR = 1e-6
DEGENERATE_DEN = 1e-12
ZERO_ROW_TOL = 1e-12


class Ao2Error(RuntimeError):
    """Penalty cap reached before complementarity; carries the partial trace."""

    def __init__(self, message: str, trace: "SbqpTrace", y: np.ndarray):
        super().__init__(message)
        self.trace = trace
        self.y = y


@dataclass(frozen=True)
class PenaltySchedule:
    """Homotopy controls: start at rho0, grow by beta, stop at |phi| <= eps."""

    rho0: float = 1.0
    beta: float = 10.0
    rho_max: float = 1e12
    eps: float = 1e-6

    def __post_init__(self):
        if not self.rho0 > 0.0:
            raise ValueError("rho0 must be positive")
        if not self.beta > 1.0:
            raise ValueError("beta must be greater than 1")
        if not self.eps > 0.0:
            raise ValueError("eps must be positive")
        if self.rho_max < self.rho0:
            raise ValueError("rho_max must be at least rho0")


@dataclass(frozen=True)
class Ao2Variant:
    """Subproblem family for the switching stage.

    mixed        second-order model of the served-demand objective, curvature
                 taken from the continuous-stage duals, penalty linearized at
                 the incumbent
    relaxed-one  quadratic rank objective with the penalty kept exact
    relaxed-two  quadratic rank objective with the penalty linearized at the
                 incumbent

    full_rows swaps the three aggregate feasibility rows for the full
    linearized constraint block (workable on small cases only).  single_shot
    applies to relaxed-one: take each subproblem solution as-is instead of
    blending it through the line search.
    """

    tag: str = "mixed"
    full_rows: bool = False
    single_shot: bool = False

    def __post_init__(self):
        if self.tag not in VARIANT_TAGS:
            raise ValueError(f"unknown variant tag {self.tag!r}")
        if self.single_shot and self.tag != "relaxed-one":
            raise ValueError("single_shot applies to relaxed-one only")


@dataclass(frozen=True, eq=False)
class SbqpTraceRow:
    iteration: int
    y: np.ndarray
    phi: float
    rho: float
    alpha: float
    status: str
    kind: str
    psi: float


@dataclass(frozen=True, eq=False)
class SbqpTrace:
    """Per-iteration record of the penalty loop; row 0 is the seeding solve."""

    rows: tuple[SbqpTraceRow, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        if not self.rows:
            raise ValueError("trace must be nonempty")

    @property
    def final_phi(self) -> float:
        return self.rows[-1].phi

    @property
    def penalty_iterations(self) -> int:
        return sum(1 for row in self.rows if row.rho > 0.0)

    def phis(self) -> np.ndarray:
        return np.array([row.phi for row in self.rows])


def _switch_array(y) -> np.ndarray:
    if isinstance(y, SwitchVector):
        return y.y
    return np.asarray(y, dtype=float)


def snap_binary(y: np.ndarray, tol: float) -> np.ndarray:
    """Replace coordinates within tol of 0 or 1 by the exact endpoint."""
    out = np.asarray(y, dtype=float).copy()
    out[np.abs(out) <= tol] = 0.0
    out[np.abs(out - 1.0) <= tol] = 1.0
    return out


def step_length(y_hat, direction, anchor) -> tuple[float, str]:
    """Step size zeroing the linearized complementarity residual.

    Solves (y_hat + alpha * direction) @ grad_phi(anchor) = 0 for alpha when
    the denominator is safely nonzero ("exact"), otherwise falls back to a
    unit step ("fallback").  Either way alpha is clipped so the update stays
    inside [0, 1]; clipping appends "-clipped" to the kind.
    """
    y = _switch_array(y_hat)
    d = _switch_array(direction)
    g = grad_phi(_switch_array(anchor))
    den = float(d @ g)
    if abs(den) > DEGENERATE_DEN:
        alpha, kind = -float(y @ g) / den, "exact"
    else:
        alpha, kind = 1.0, "fallback"
    moving = d != 0.0
    if moving.any():
        r0 = (0.0 - y[moving]) / d[moving]
        r1 = (1.0 - y[moving]) / d[moving]
        lo = float(np.minimum(r0, r1).max())
        hi = float(np.maximum(r0, r1).min())
        clipped = min(max(alpha, lo), hi)
        if clipped != alpha:
            alpha, kind = clipped, kind + "-clipped"
    return alpha, kind


def build_subproblem(case: GridCase, lin_point, duals, rho: float,
                     variant: Ao2Variant, phi_anchor=None) -> QpProblem:
    """Quadratic switching subproblem around a continuous-stage point.

    The decision variable is the step d = y - y_lin from the linearization
    switches, so the unit box becomes [-y_lin, 1 - y_lin] and the penalty
    gradient lands directly in the linear term.  Default constraint rows keep
    the served demand inside what the current active dispatch and the
    reactive capability range admit; variant.full_rows uses the full
    linearized feasibility block instead (constant rows dropped).
    """
    state, inputs, switches = lin_point
    net = network(case)
    y_lin = switches.y
    anchor = y_lin if phi_anchor is None else _switch_array(phi_anchor)
    rho = float(rho)
    nxu = 2 * net.n_bus + 2 * net.n_gen

    if variant.full_rows or variant.tag == "mixed":
        _, dE, dC = jacobians(case, state, inputs, switches)

    if variant.full_rows:
        rows_y = dC[:, nxu:]
        keep = np.abs(rows_y).max(axis=1) > ZERO_ROW_TOL
        A = -rows_y[keep]
        b = -constraints_C(case, state, inputs, switches)[keep]
    else:
        served_p = float(y_lin @ net.pd)
        served_q = float(y_lin @ net.qd)
        b = np.array([
            float(inputs.pg.sum()) - served_p,
            float(net.u_upper[1::2].sum()) - served_q,
            served_q - float(net.u_lower[1::2].sum()),
        ])
        A = np.vstack([-net.pd, -net.qd, net.qd])

    n = net.n_dem
    w = net.rank * net.pd
    if variant.tag == "mixed":
        Q = hessian_Q(case, state, inputs, switches, duals)
        top = float(np.linalg.eigvalsh(0.5 * (Q + Q.T)).max())
        floor = CURVATURE_FLOOR * max(1.0, abs(top))
        if top > -floor:
            # the served-demand curvature is non-concave here; push the
            # spectrum strictly below zero before handing it to the QP
            Q = Q - (top + floor) * np.eye(n)
        g = dE[nxu:] - rho * grad_phi(anchor)
    elif variant.tag == "relaxed-one":
        Q = np.diag(2.0 * w) + 2.0 * rho * np.eye(n)
        g = 2.0 * w * y_lin - rho * grad_phi(y_lin)
    else:
        Q = np.diag(2.0 * w)
        g = 2.0 * w * y_lin - rho * grad_phi(anchor)

    return QpProblem(Q=Q, g_lin=g, A=A, b=b, lower=-y_lin, upper=1.0 - y_lin)


def penalty_loop(solve_sub, schedule: PenaltySchedule, psi_of=None,
                 single_shot: bool = False, feasible=None):
    """Drive solve_sub under the growing penalty until |phi(y)| <= eps.

    solve_sub(rho, anchor, warm) solves one subproblem and returns a
    (y_candidate, status) pair in unit-box coordinates.  A zero-penalty pass
    seeds the incumbent; each penalty level then re-anchors the linearized
    complementarity term at the incumbent, solves, and blends the result
    through step_length.  The blended point can extrapolate past the
    subproblem solution, so a feasible(y) predicate, when given, gates it.
    With single_shot the seeding pass and the blend are skipped and each
    solution is taken directly.  Returns (y, SbqpTrace); raises Ao2Error when
    rho would pass schedule.rho_max first.
    """
    if feasible is None:
        feasible = lambda _y: True
    rows: list[SbqpTraceRow] = []

    def record(it, y, rho_val, alpha, status, kind):
        val = float("nan") if psi_of is None else float(psi_of(y, rho_val))
        rows.append(SbqpTraceRow(it, y.copy(), phi(y), rho_val, alpha, status, kind, val))

    y_hat = None
    if not single_shot:
        y_cand, status = solve_sub(0.0, None, None)
        y_hat = np.clip(y_cand, 0.0, 1.0)
        record(0, y_hat, 0.0, 1.0, status, "global")
        if phi(y_hat) <= schedule.eps:
            return y_hat, SbqpTrace(tuple(rows))

    rho = schedule.rho0
    iteration = len(rows)
    anchor_override = None
    while True:
        if y_hat is None:
            anchor = None
        elif anchor_override is not None:
            anchor = anchor_override
        else:
            anchor = y_hat.copy()
        y_new, status = solve_sub(rho, anchor, y_hat)
        y_new = np.clip(y_new, 0.0, 1.0)
        y_before = None if y_hat is None else y_hat.copy()
        if anchor is None or single_shot:
            y_hat, alpha, kind = y_new, 1.0, "single-shot"
        else:
            alpha, kind = step_length(y_hat, y_new - y_hat, anchor)
            y_step = np.clip(y_hat + alpha * (y_new - y_hat), 0.0, 1.0)
            # the zeroing step is only trustworthy near a binary point: far
            # away it can throw the incumbent backwards, and with alpha
            # outside [0, 1] it can leave the subproblem rows entirely.  Keep
            # the plain subproblem solution unless the blend is feasible and
            # at least as close to complementarity.
            if phi(y_step) <= phi(y_new) and feasible(y_step):
                y_hat = y_step
            else:
                y_hat, alpha, kind = y_new, 1.0, "unit"
        record(iteration, y_hat, rho, alpha, status, kind)
        if phi(y_hat) <= schedule.eps:
            return y_hat, SbqpTrace(tuple(rows))
        if rho * schedule.beta > schedule.rho_max:
            raise Ao2Error("penalty cap reached before complementarity",
                           SbqpTrace(tuple(rows)), y_hat)
        # an incumbent the subproblem keeps returning is anchored into place:
        # its own support is what the linearized penalty rewards.  Anchoring
        # the next pass at the floored incumbent rewards only the loads that
        # already fit, so the solve can confirm that binary point and exit.
        stalled = (y_before is not None
                   and float(np.max(np.abs(y_hat - y_before), initial=0.0)) <= 1e-14)
        if stalled and anchor_override is None:
            anchor_override = np.where(y_hat >= 1.0 - 2.0 * schedule.eps, 1.0, 0.0)
        else:
            anchor_override = None
        rho = rho * schedule.beta
        iteration += 1


def run_ao2(case: GridCase, start, duals, schedule: PenaltySchedule | None = None,
            variant: Ao2Variant | None = None):
    """One switching stage around the given continuous operating point.

    start is the (State, InputVector, SwitchVector) triple from the
    continuous stage and duals its constraint multipliers.  Returns
    (SwitchVector, SbqpTrace); coordinates within twice schedule.eps of an
    endpoint are snapped exactly to it, which the exit tolerance guarantees
    covers every coordinate.
    """
    schedule = PenaltySchedule() if schedule is None else schedule
    variant = Ao2Variant() if variant is None else variant
    state, inputs, switches = start
    net = network(case)
    y_lin = switches.y
    mode = "concave" if variant.tag == "mixed" else "stationary-point"
    w = net.rank * net.pd

    base = build_subproblem(case, start, duals, 0.0, variant, switches)
    q_model, g_model = (base.Q, base.g_lin) if variant.tag == "mixed" else (None, None)

    def row_feasible(y):
        slack = base.b + base.A @ (y - y_lin)
        return float(np.min(slack, initial=0.0)) >= -1e-9

    def solve_sub(rho, anchor, warm):
        prob = build_subproblem(case, start, duals, rho, variant, anchor)
        warm_step = None if warm is None else warm - y_lin
        sol = solve_qp(prob, mode=mode, start=warm_step)
        if mode == "stationary-point" and warm_step is not None:
            # a stationary solve from the incumbent can sit in a fractional
            # basin the penalty cannot tilt; a second start from the all-off
            # corner reaches repacked configurations, keep the better value
            alt = solve_qp(prob, mode=mode, start=prob.lower)
            def val(s):
                return 0.5 * float(s.primal @ prob.Q @ s.primal) + float(prob.g_lin @ s.primal)
            if sol.status != "infeasible" and alt.status != "infeasible" and val(alt) > val(sol) + 1e-12:
                sol = alt
        return y_lin + sol.primal, sol.status

    def psi_of(y, rho):
        # quadratic model value minus the exact penalty, kept as a diagnostic
        if variant.tag == "mixed":
            d = y - y_lin
            return 0.5 * float(d @ q_model @ d) + float(g_model @ d) - rho * phi(y)
        return float(w @ (y * y)) - rho * phi(y)

    y, trace = penalty_loop(solve_sub, schedule, psi_of=psi_of,
                            single_shot=variant.single_shot, feasible=row_feasible)
    return SwitchVector(snap_binary(y, 2.0 * schedule.eps)), trace
