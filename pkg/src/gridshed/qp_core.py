"""Dense QP engine for the switch subproblems.

Problems are maximizations of 0.5 d'Qd + g'd over { b + A d >= 0 } within a
box. Two modes:

* ``concave``: primal active-set method on the equivalent convex minimum.
  Q must be negative semi-definite (callers regularize first). Infeasible
  starts are handled by an exact-penalty elastic phase that adds slack
  variables only on the rows violated at the start.
* ``stationary-point``: projected gradient ascent with an Armijo line
  search, for indefinite or convex Q. Returns a KKT point, no global claim.

Multiplier sign convention (maximization): Q d + g + A' lam + mu - gam = 0
with lam, mu, gam >= 0 on the A rows, lower bounds, upper bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TOL_FEAS = 1e-9
TOL_STAT = 1e-8
STEP_ZERO = 1e-11
SLACK_TOL = 1e-7


@dataclass(frozen=True, eq=False)
class QpProblem:
    Q: np.ndarray
    g_lin: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        for name in ("Q", "g_lin", "A", "b", "lower", "upper"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.g_lin.size
        if self.Q.shape != (n, n):
            raise ValueError("Q shape does not match g_lin")
        if self.A.size == 0:
            object.__setattr__(self, "A", np.zeros((0, n)))
            object.__setattr__(self, "b", np.zeros(0))
        if self.A.shape[1] != n or self.b.shape != (self.A.shape[0],):
            raise ValueError("A/b dimensions inconsistent")
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("box dimensions inconsistent")
        if np.any(self.lower > self.upper):
            raise ValueError("lower > upper")

    @property
    def dim(self) -> int:
        return self.g_lin.size


@dataclass(frozen=True, eq=False)
class QpSolution:
    primal: np.ndarray
    dual_ineq: np.ndarray
    dual_lower: np.ndarray
    dual_upper: np.ndarray
    status: str
    kkt_residual: float


def kkt_residual(problem: QpProblem, z, lam, mu, gam) -> float:
    stat = problem.Q @ z + problem.g_lin + problem.A.T @ lam + mu - gam
    slack_a = problem.b + problem.A @ z
    feas = max(
        0.0,
        float(np.max(-slack_a)) if slack_a.size else 0.0,
        float(np.max(problem.lower - z)),
        float(np.max(z - problem.upper)),
    )
    comp = 0.0
    if slack_a.size:
        comp = float(np.max(np.abs(lam * slack_a)))
    comp = max(
        comp,
        float(np.max(np.abs(mu * (z - problem.lower)))),
        float(np.max(np.abs(gam * (problem.upper - z)))),
    )
    return max(float(np.max(np.abs(stat))), feas, comp)


def _active_set_min(G, c, R, d, z0, cap):
    """min 0.5 z'Gz + c'z s.t. R z >= d, from the feasible point z0.

    G must be positive definite. Returns (z, sigma, status, last working set).
    Ties in both the drop rule and the blocking rule go to the lowest row
    index, which keeps runs reproducible.
    """
    z = z0.copy()
    m = R.shape[0]
    # seed the working set with an independent subset of the active rows;
    # dependent seeds make the KKT system singular and the duals unusable
    work: list[int] = []
    basis: list[np.ndarray] = []
    for i in range(m):
        if abs(R[i] @ z - d[i]) > 1e-12:
            continue
        row = R[i]
        if basis:
            bt = np.array(basis).T
            coef = np.linalg.lstsq(bt, row, rcond=None)[0]
            resid = row - bt @ coef
        else:
            resid = row
        if np.linalg.norm(resid) > 1e-10 * max(1.0, float(np.linalg.norm(row))):
            work.append(i)
            basis.append(row)
    sigma = np.zeros(m)
    status = "max-iterations"
    for _ in range(cap):
        Rw = R[work]
        k = len(work)
        kkt = np.zeros((G.shape[0] + k, G.shape[0] + k))
        kkt[: G.shape[0], : G.shape[0]] = G
        if k:
            kkt[: G.shape[0], G.shape[0]:] = -Rw.T
            kkt[G.shape[0]:, : G.shape[0]] = Rw
        rhs = np.concatenate([-(G @ z + c), np.zeros(k)])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        p, sig_w = sol[: G.shape[0]], sol[G.shape[0]:]
        sigma = np.zeros(m)
        sigma[work] = sig_w
        if np.max(np.abs(p), initial=0.0) <= STEP_ZERO:
            if k == 0 or sig_w.min() >= -TOL_FEAS:
                status = "optimal"
                break
            drop = work[int(np.argmin(sig_w))]
            work.remove(drop)
            continue
        alpha, blocker = 1.0, None
        for i in range(m):
            if i in work:
                continue
            den = R[i] @ p
            if den < -1e-12:
                ratio = (d[i] - R[i] @ z) / den
                if ratio < alpha - 1e-12:
                    alpha, blocker = max(ratio, 0.0), i
        z = z + alpha * p
        if blocker is not None:
            work.append(blocker)
            work.sort()
    return z, sigma, status


def _regularized(Q):
    G = -0.5 * (Q + Q.T)
    evmin = float(np.linalg.eigvalsh(G).min()) if G.size else 0.0
    if evmin < 1e-10:
        G = G + (1e-10 - evmin) * np.eye(G.shape[0])
    return G


def _stack_rows(A, lower, upper, b):
    n = lower.size
    R = np.vstack([A, np.eye(n), -np.eye(n)])
    d = np.concatenate([-b, lower, -upper])
    return R, d


def _phase_one(problem: QpProblem, z0: np.ndarray):
    """Row-feasible point inside the box, or a violation minimizer.

    Runs projected gradient with Barzilai-Borwein steps on the squared row
    violation 0.5 ||max(0, -(b + A z))||^2; the minimum is zero exactly when
    the rows are consistent with the box. Returns (z, feasible).
    """
    A, b = problem.A, problem.b
    z = np.clip(z0, problem.lower, problem.upper)
    t = 1.0 / max(1e-12, float(np.linalg.norm(A, 2)) ** 2)
    z_prev = g_prev = None
    for _ in range(2000):
        viol = np.maximum(0.0, -(b + A @ z))
        if float(viol.max(initial=0.0)) <= 1e-11:
            return z, True
        g = -(A.T @ viol)
        if z_prev is not None:
            dz, dg = z - z_prev, g - g_prev
            den = float(dz @ dg)
            if den > 1e-300:
                t = float(dz @ dz) / den
        z_prev, g_prev = z, g
        z = np.clip(z - t * g, problem.lower, problem.upper)
        if np.array_equal(z, z_prev):
            break  # stationary over the box: the violation cannot improve
    viol = np.maximum(0.0, -(b + A @ z))
    return z, bool(viol.max(initial=0.0) <= SLACK_TOL)


def _solve_concave(problem: QpProblem, start) -> QpSolution:
    n = problem.dim
    m = problem.A.shape[0]
    G = _regularized(problem.Q)
    c = -problem.g_lin
    z0 = np.clip(start if start is not None else np.zeros(n), problem.lower, problem.upper)
    cap = 50 * max(n, 1)
    if m and float(np.min(problem.b + problem.A @ z0)) < -TOL_FEAS:
        z0, feasible = _phase_one(problem, z0)
        if not feasible:
            lam, mu, gam = np.zeros(m), np.zeros(n), np.zeros(n)
            return QpSolution(z0, lam, mu, gam, "infeasible",
                              kkt_residual(problem, z0, lam, mu, gam))
    R, d = _stack_rows(problem.A, problem.lower, problem.upper, problem.b)
    z, sigma, status = _active_set_min(G, c, R, d, z0, cap)
    lam = sigma[:m]
    mu = sigma[m:m + n]
    gam = sigma[m + n:]
    return QpSolution(z, lam, mu, gam, status, kkt_residual(problem, z, lam, mu, gam))


def _project_rows_dual(problem: QpProblem, point: np.ndarray):
    """Projection via coordinate ascent on the row multipliers.

    The projection's dual has one variable per row; for fixed multipliers the
    primal is the box clip of point + A'lam, and the slack of row i is
    nondecreasing in lam_i, so each coordinate update is a scalar root find.
    Returns (z, lam, mu, gam, converged).
    """
    A, b = problem.A, problem.b
    m = A.shape[0]
    lam = np.zeros(m)
    scale = max(1.0, float(np.max(np.abs(point))))
    tol = 1e-11 * scale

    def slack(i, lam_i, base):
        z = np.clip(base + lam_i * A[i], problem.lower, problem.upper)
        return float(b[i] + A[i] @ z)

    converged = False
    for _ in range(200):
        moved = 0.0
        for i in range(m):
            base = point + A.T @ lam - lam[i] * A[i]
            if slack(i, 0.0, base) >= 0.0:
                new = 0.0
            else:
                hi = 1.0
                for _ in range(80):
                    if slack(i, hi, base) >= 0.0:
                        break
                    hi *= 4.0
                else:
                    return np.clip(base, problem.lower, problem.upper), lam, np.zeros(problem.dim), np.zeros(problem.dim), False
                lo = 0.0
                for _ in range(120):
                    mid = 0.5 * (lo + hi)
                    if slack(i, mid, base) >= 0.0:
                        hi = mid
                    else:
                        lo = mid
                new = hi
            moved = max(moved, abs(new - lam[i]))
            lam[i] = new
        shifted = point + A.T @ lam
        z = np.clip(shifted, problem.lower, problem.upper)
        resid = b + A @ z
        # every positive-multiplier row must be active; the product form
        # lam*resid has an ulp floor of lam*eps*scale and cannot certify
        if float(np.max(-resid, initial=0.0)) <= tol and bool(np.all((lam <= 0.0) | (np.abs(resid) <= tol))):
            converged = True
            break
        if moved <= 1e-16 * scale:
            break
    shifted = point + A.T @ lam
    z = np.clip(shifted, problem.lower, problem.upper)
    mu = np.maximum(0.0, problem.lower - shifted)
    gam = np.maximum(0.0, shifted - problem.upper)
    return z, lam, mu, gam, converged


def project(problem: QpProblem, point: np.ndarray):
    """Euclidean projection onto the feasible set; returns (point, duals of the projection)."""
    n = problem.dim
    m = problem.A.shape[0]
    w = np.clip(point, problem.lower, problem.upper)
    # the box clip is the projection whenever it already satisfies the rows
    if m == 0 or float(np.min(problem.b + problem.A @ w)) >= -1e-12:
        mu = np.maximum(0.0, problem.lower - point)
        gam = np.maximum(0.0, point - problem.upper)
        return w, np.zeros(m), mu, gam, True
    z, lam, mu, gam, ok = _project_rows_dual(problem, point)
    if ok:
        return z, lam, mu, gam, True
    sub = QpProblem(
        Q=-np.eye(n), g_lin=point, A=problem.A, b=problem.b,
        lower=problem.lower, upper=problem.upper,
    )
    sol = _solve_concave(sub, w)
    return sol.primal, sol.dual_ineq, sol.dual_lower, sol.dual_upper, sol.status == "optimal"


def _endpoint_probe(problem, z, value, feasible_cap):
    """One coordinate pushed toward a box endpoint when that strictly improves.

    First-order points of an indefinite objective can sit inside a face where
    positive curvature along a coordinate makes an endpoint strictly better;
    the probe finds the first such move (lowest coordinate, lower end first).
    """
    base = value(z)
    margin = 1e-10 * max(1.0, abs(base))
    n = problem.dim
    for k in range(n):
        for target in (problem.lower[k], problem.upper[k]):
            dk = target - z[k]
            if abs(dk) <= 1e-12:
                continue
            d = np.zeros(n)
            d[k] = dk
            a = feasible_cap(z, d)
            if a <= 1e-12:
                continue
            cand = z + min(1.0, a) * d
            if value(cand) > base + margin:
                return cand
    return None


def _solve_stationary(problem: QpProblem, start) -> QpSolution:
    n = problem.dim
    z0 = np.clip(start if start is not None else np.zeros(n), problem.lower, problem.upper)
    z, *_, ok = project(problem, z0)
    if not ok:
        zero = np.zeros
        return QpSolution(z, zero(problem.A.shape[0]), zero(n), zero(n), "infeasible",
                          kkt_residual(problem, z, zero(problem.A.shape[0]), zero(n), zero(n)))

    def value(w):
        return 0.5 * w @ problem.Q @ w + problem.g_lin @ w

    def feasible_cap(zc, d):
        # largest step along d keeping the box and the A rows satisfied
        cap = 1.0
        for lo_gap, step in ((zc - problem.lower, -d), (problem.upper - zc, d)):
            push = step > 1e-14
            if np.any(push):
                cap = min(cap, float(np.min(lo_gap[push] / step[push])))
        if problem.A.shape[0]:
            slack = problem.b + problem.A @ zc
            rate = -(problem.A @ d)
            push = rate > 1e-14
            if np.any(push):
                cap = min(cap, float(np.min(slack[push] / rate[push])))
        return max(cap, 0.0)

    t0 = 1.0 / max(float(np.linalg.norm(problem.Q, 2)), 1e-6)
    cap = 50 * max(n, 1)
    status = "max-iterations"
    lam = np.zeros(problem.A.shape[0])
    mu = np.zeros(n)
    gam = np.zeros(n)
    t = t0
    span = max(float(np.max(problem.upper - problem.lower, initial=0.0)), 1.0)
    z_prev = grad_prev = None
    for _ in range(cap):
        grad = problem.Q @ z + problem.g_lin
        if z_prev is not None:
            # Barzilai-Borwein step, safeguarded around the Lipschitz step
            dz, dg = z - z_prev, grad - grad_prev
            den = abs(float(dz @ dg))
            if den > 1e-300:
                t = min(max(float(dz @ dz) / den, 1e-3 * t0), 1e4 * t0)
        # keep the pre-projection point within a few box spans so the
        # projection stays in the regime where it is machine-precise
        gnorm = float(np.max(np.abs(grad), initial=0.0))
        step = t if gnorm <= 1e-300 else min(t, 10.0 * span / gnorm)
        z_prev, grad_prev = z, grad
        w, plam, pmu, pgam, ok = project(problem, z + step * grad)
        t = step
        lam, mu, gam = plam / t, pmu / t, pgam / t
        if kkt_residual(problem, z, lam, mu, gam) <= TOL_STAT:
            probe = _endpoint_probe(problem, z, value, feasible_cap)
            if probe is None:
                status = "optimal"
                break
            z = probe
            z_prev = grad_prev = None
            continue
        # Newton polish on the free face when the objective is concave there
        free = (z > problem.lower + 1e-9) & (z < problem.upper - 1e-9)
        if np.any(free):
            Qff = problem.Q[np.ix_(free, free)]
            if float(np.linalg.eigvalsh(Qff).max()) < -1e-12:
                d = np.zeros(n)
                d[free] = np.linalg.solve(Qff, -grad[free])
                alpha = min(1.0, feasible_cap(z, d))
                if alpha > 0 and value(z + alpha * d) > value(z) + 1e-15:
                    z = z + alpha * d
                    continue
        # exact line search on the first segment of the projection arc
        p = w - z
        if np.max(np.abs(p), initial=0.0) <= 1e-14:
            probe = _endpoint_probe(problem, z, value, feasible_cap)
            if probe is not None:
                z = probe
                z_prev = grad_prev = None
                continue
            status = "optimal" if kkt_residual(problem, z, lam, mu, gam) <= 1e-6 else status
            break
        den = p @ problem.Q @ p
        alpha = 1.0 if den >= -1e-14 else min(1.0, (grad @ p) / -den)
        z = z + alpha * p
    return QpSolution(z, lam, mu, gam, status, kkt_residual(problem, z, lam, mu, gam))


def solve_qp(problem: QpProblem, mode: str = "concave", start: np.ndarray | None = None) -> QpSolution:
    if mode == "concave":
        return _solve_concave(problem, start)
    if mode == "stationary-point":
        return _solve_stationary(problem, start)
    raise ValueError(f"unknown mode {mode!r}")
