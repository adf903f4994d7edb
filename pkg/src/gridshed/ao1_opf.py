"""Continuous OPF stage: maximize E over (x, u) at fixed switch values.

Power balance P(x) = S(u, y) is handled as an equality system; voltage,
angle, and injection limits as box bounds with a log barrier. The slack
bus entries of x are eliminated from the decision vector. The method is a
primal-dual interior point with Gauss-Newton curvature on the balance
residuals; it falls back to a bounded least-squares restoration when the
Newton iteration stalls, which also decides infeasibility.

E is affine in the balance residuals, so every feasible point is optimal
and the equality duals at an interior solution are -y_k r_k on the active
demand rows. The solver still earns its keep: it must find a balanced
point inside the bounds, or certify there is none.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .grid_model import GridCase
from .power_equations import InputVector, State, SwitchVector, jacobians, network, objective_E

TOL_FEAS = 1e-8
TOL_KKT = 1e-6
MAX_ITERS = 200


@dataclass(frozen=True, eq=False)
class Ao1Result:
    state: State
    input: InputVector
    duals: np.ndarray
    kkt_residual: float
    objective: float
    status: str
    iterations: int = 0


class _Problem:
    """Fixed-y evaluation helpers over the reduced vector z = [x_free, u]."""

    def __init__(self, case: GridCase, y: SwitchVector):
        self.case = case
        self.net = network(case)
        self.y = y
        net = self.net
        nx = 2 * net.n_bus
        self.free = np.array([i for i in range(nx) if i not in (2 * net.slack, 2 * net.slack + 1)])
        self.lower = np.concatenate([net.x_lower[self.free], net.u_lower])
        self.upper = np.concatenate([net.x_upper[self.free], net.u_upper])
        self.n = self.lower.size
        self.nx_free = self.free.size
        # supply offset: S = Gu u - y^2 d, with Gu the generator selector
        self.s_fixed = np.zeros(nx)
        y2 = y.y * y.y
        self.s_fixed[2 * net.dem_pos] -= y2 * net.pd
        self.s_fixed[2 * net.dem_pos + 1] -= y2 * net.qd
        self.Gu = np.zeros((nx, 2 * net.n_gen))
        self.Gu[2 * net.gen_pos, 0::2] = np.eye(net.n_gen)
        self.Gu[2 * net.gen_pos + 1, 1::2] = np.eye(net.n_gen)

    def split(self, z):
        net = self.net
        x = np.empty(2 * net.n_bus)
        x[2 * net.slack] = net.slack_v
        x[2 * net.slack + 1] = 0.0
        x[self.free] = z[: self.nx_free]
        return State.from_vector(x), InputVector.from_vector(z[self.nx_free:])

    def residual_jacobian(self, z):
        state, u = self.split(z)
        dP_dx, dE, _ = jacobians(self.case, state, u, self.y)
        th = state.theta[:, None] - state.theta[None, :]
        net = self.net
        P = np.empty(2 * net.n_bus)
        c, s = np.cos(th), np.sin(th)
        P[0::2] = state.v * ((net.G * c + net.B * s) @ state.v)
        P[1::2] = state.v * ((net.G * s - net.B * c) @ state.v)
        F = P - self.Gu @ u.as_vector() - self.s_fixed
        J = np.hstack([dP_dx[:, self.free], -self.Gu])
        grad_E = np.concatenate([dE[self.free], dE[2 * net.n_bus: 2 * net.n_bus + 2 * net.n_gen]])
        return F, J, grad_E, state, u

    def residual_only(self, z):
        state, u = self.split(z)
        net = self.net
        th = state.theta[:, None] - state.theta[None, :]
        c, s = np.cos(th), np.sin(th)
        P = np.empty(2 * net.n_bus)
        P[0::2] = state.v * ((net.G * c + net.B * s) @ state.v)
        P[1::2] = state.v * ((net.G * s - net.B * c) @ state.v)
        return P - self.Gu @ u.as_vector() - self.s_fixed


def _estimate_duals(prob, z, F, J, grad_E, atol=1e-7):
    """Least-squares multipliers with bound duals only on the active set."""
    grad_f = -grad_E
    act_lo = np.where(z - prob.lower <= atol * np.maximum(1.0, np.abs(prob.lower)))[0]
    act_hi = np.where(prob.upper - z <= atol * np.maximum(1.0, np.abs(prob.upper)))[0]
    cols = [J.T]
    n = prob.n
    if act_lo.size:
        E_lo = np.zeros((n, act_lo.size))
        E_lo[act_lo, np.arange(act_lo.size)] = -1.0
        cols.append(E_lo)
    if act_hi.size:
        E_hi = np.zeros((n, act_hi.size))
        E_hi[act_hi, np.arange(act_hi.size)] = 1.0
        cols.append(E_hi)
    M = np.hstack(cols)
    sol = np.linalg.lstsq(M, -grad_f, rcond=None)[0]
    m = F.size
    nu = sol[:m]
    zl = np.zeros(n)
    zu = np.zeros(n)
    zl[act_lo] = np.maximum(sol[m:m + act_lo.size], 0.0)
    zu[act_hi] = np.maximum(sol[m + act_lo.size:], 0.0)
    return nu, zl, zu


def _pack_duals(prob, nu, zl, zu):
    """Spread internal multipliers over the full constraint stack."""
    net = prob.net
    nx, nu_dim = 2 * net.n_bus, 2 * net.n_gen
    zl_x = np.zeros(nx)
    zu_x = np.zeros(nx)
    zl_x[prob.free] = zl[: prob.nx_free]
    zu_x[prob.free] = zu[: prob.nx_free]
    return np.concatenate([
        np.maximum(nu, 0.0),
        np.maximum(-nu, 0.0),
        zl_x,
        zu_x,
        zl[prob.nx_free:],
        zu[prob.nx_free:],
    ])


def _kkt_max(prob, F, grad_E, J, nu, zl, zu, z):
    r_stat = -grad_E + J.T @ nu - zl + zu
    comp = max(
        float(np.max(np.abs(zl * (z - prob.lower)), initial=0.0)),
        float(np.max(np.abs(zu * (prob.upper - z)), initial=0.0)),
    )
    return float(np.max(np.abs(F))), float(np.max(np.abs(r_stat))), comp


def solve_ao1(case: GridCase, y_fixed: SwitchVector, warm=None) -> Ao1Result:
    prob = _Problem(case, y_fixed)
    net = prob.net
    n, m = prob.n, 2 * net.n_bus
    span = prob.upper - prob.lower

    if warm is not None:
        state0, input0 = warm
        x0 = state0.as_vector()
        z = np.concatenate([x0[prob.free], input0.as_vector()])
    else:
        x0 = np.empty(2 * net.n_bus)
        x0[0::2] = net.slack_v
        x0[1::2] = 0.0
        z = np.concatenate([x0[prob.free], 0.5 * (net.u_lower + net.u_upper)])
    z = np.clip(z, prob.lower, prob.upper)

    # a warm point may already satisfy the KKT system; check before iterating
    F, J, grad_E, state, u = prob.residual_jacobian(z)
    nu, zl, zu = _estimate_duals(prob, z, F, J, grad_E)
    feas, stat, comp = _kkt_max(prob, F, grad_E, J, nu, zl, zu, z)
    if feas <= TOL_FEAS and stat <= TOL_KKT and comp <= TOL_KKT:
        E = _objective(prob, state, u)
        return Ao1Result(state, u, _pack_duals(prob, nu, zl, zu), max(feas, stat, comp),
                         E, "converged", 0)

    delta = np.minimum(1e-3 * np.maximum(1.0, span), 0.25 * span)
    z = np.clip(z, prob.lower + delta, prob.upper - delta)
    mu = 0.1
    zl = mu / (z - prob.lower)
    zu = mu / (prob.upper - z)
    F, J, grad_E, state, u = prob.residual_jacobian(z)

    theta = float(np.abs(F).sum())
    best = (theta, z.copy())
    history = [theta]
    status = "max-iterations"
    iters_done = MAX_ITERS

    def barrier(zv, Fv):
        return (float(np.abs(Fv).sum())
                - mu * float(np.sum(np.log(zv - prob.lower)))
                - mu * float(np.sum(np.log(prob.upper - zv))))

    for it in range(MAX_ITERS):
        grad_f = -grad_E
        feas, stat, comp = _kkt_max(prob, F, grad_E, J, nu, zl, zu, z)
        if feas <= TOL_FEAS and stat <= TOL_KKT and comp <= TOL_KKT:
            status = "converged"
            iters_done = it
            break

        # stall: hand the point to the bounded restoration solver
        stalled = False
        if it >= 30 and len(history) > 15:
            if history[-1] > 0.99 * history[-16] and history[-1] > TOL_FEAS:
                stalled = True

        if not stalled:
            H = J.T @ J + 1e-8 * np.eye(n)
            sig = zl / (z - prob.lower) + zu / (prob.upper - z)
            kkt = np.zeros((n + m, n + m))
            kkt[:n, :n] = H + np.diag(sig)
            kkt[:n, n:] = J.T
            kkt[n:, :n] = J
            rhs = np.concatenate([
                -(grad_f + J.T @ nu) + mu / (z - prob.lower) - mu / (prob.upper - z),
                -F,
            ])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            dz, dnu = sol[:n], sol[n:]
            dzl = (mu - (z - prob.lower) * zl) / (z - prob.lower) - zl * dz / (z - prob.lower)
            dzu = (mu - (prob.upper - z) * zu) / (prob.upper - z) + zu * dz / (prob.upper - z)

            tau = 0.995
            alpha = 1.0
            neg = dz < 0
            if np.any(neg):
                alpha = min(alpha, float(np.min(tau * (z - prob.lower)[neg] / -dz[neg])))
            pos = dz > 0
            if np.any(pos):
                alpha = min(alpha, float(np.min(tau * (prob.upper - z)[pos] / dz[pos])))
            alpha_d = 1.0
            for dual, step in ((zl, dzl), (zu, dzu)):
                neg = step < 0
                if np.any(neg):
                    alpha_d = min(alpha_d, float(np.min(tau * dual[neg] / -step[neg])))

            b_old = barrier(z, F)
            accepted = False
            a = alpha
            while a > 1e-12:
                z_try = z + a * dz
                F_try = prob.residual_only(z_try)
                theta_try = float(np.abs(F_try).sum())
                if theta_try <= (1.0 - 1e-4 * a) * theta + 1e-16 or barrier(z_try, F_try) <= b_old - 1e-4 * a:
                    accepted = True
                    break
                a *= 0.5
            if accepted:
                z = z + a * dz
                # the fraction-to-boundary rule still lets gaps shrink
                # geometrically; floor them so the barrier terms stay finite
                gap = 1e-12 * np.maximum(1.0, span)
                z = np.clip(z, prob.lower + gap, prob.upper - gap)
                nu = nu + a * dnu
                zl = np.maximum(zl + alpha_d * dzl, 1e-16)
                zu = np.maximum(zu + alpha_d * dzu, 1e-16)
                F, J, grad_E, state, u = prob.residual_jacobian(z)
                theta = float(np.abs(F).sum())
                history.append(theta)
                if theta < best[0]:
                    best = (theta, z.copy())
                comp_total = float(zl @ (z - prob.lower) + zu @ (prob.upper - z))
                mu = min(mu, max(0.1 * comp_total / (2 * n), 1e-16))
                continue
            stalled = True

        # restoration: bounded least squares on the balance residuals
        res = least_squares(
            prob.residual_only, best[1], jac=_ls_jac(prob),
            bounds=(prob.lower, prob.upper),
            method="trf", xtol=1e-14, ftol=1e-14, gtol=1e-12, max_nfev=400,
        )
        z = res.x
        F, J, grad_E, state, u = prob.residual_jacobian(z)
        nu, zl, zu = _estimate_duals(prob, z, F, J, grad_E)
        feas, stat, comp = _kkt_max(prob, F, grad_E, J, nu, zl, zu, z)
        if feas <= TOL_FEAS and stat <= TOL_KKT and comp <= TOL_KKT:
            status = "converged"
        else:
            status = "infeasible" if feas > TOL_FEAS else "max-iterations"
        iters_done = it + 1
        break
    else:
        iters_done = MAX_ITERS

    if status == "max-iterations":
        # cap reached without a restoration pass: classify by best residual
        nu, zl, zu = _estimate_duals(prob, z, F, J, grad_E)
        feas, stat, comp = _kkt_max(prob, F, grad_E, J, nu, zl, zu, z)
        if feas <= TOL_FEAS and stat <= TOL_KKT and comp <= TOL_KKT:
            status = "converged"

    E = _objective(prob, state, u)
    return Ao1Result(state, u, _pack_duals(prob, nu, zl, zu), max(feas, stat, comp),
                     E, status, iters_done)


def _ls_jac(prob):
    def jac(z):
        F, J, *_ = prob.residual_jacobian(z)
        return J
    return jac


def _objective(prob, state, u):
    return float(objective_E(prob.case, state, u, prob.y))
