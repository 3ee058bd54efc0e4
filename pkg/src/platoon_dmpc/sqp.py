"""Single-shooting SQP for the local problem.

Decision variables are the N_p torque inputs; states come from forward
simulation and their input sensitivities from the forward recursion of the
model Jacobians. Each weighted norm ``||r||_W`` is replaced by the smooth
surrogate ``sqrt(r'Wr + eps^2) - eps`` and the input box by a log barrier;
both are tightened together (continuation). Every iteration takes a Newton
step on the three terminal equalities, globalised by backtracking on an l1
merit function.

Two details matter for reaching tight tolerances:

* the curvature of each norm term uses a dual unit vector (primal-dual
  linearisation), which keeps steps sensible far from the kinks where the
  plain Newton model of ``sqrt(r^2 + eps^2)`` overshoots wildly;
* positions and speeds are propagated as deviations from the constant-speed
  motion from ``x0``, so that iterates resolve to about 1e-13 instead of the
  1e-10 or so that absolute positions of tens of metres would allow.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import lsq_linear

from .ocp import (
    OcpProblem,
    OcpSolution,
    Status,
    spacing_vector,
    stage_costs,
    terminal_output_target,
    terminal_residual,
)
from .vehicle import rollout_array

LOG = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverOptions:
    eps_final: float = 1e-6
    eps_start: float = 1e-1
    eps_factor: float = 0.01
    barrier_ratio: float = 1e-3
    stationarity_tol: float = 1e-6
    terminal_tol: float = 1e-6
    infeasible_tol: float = 1e-3
    max_iter_per_level: int = 50
    phase1_iter: int = 30
    interior_push: float = 1e-4
    compare_warm_start: bool = True


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def smoothed_norm(x, w, eps: float) -> float:
    x = np.asarray(x, dtype=float)
    return math.sqrt(float(x @ w @ x) + eps * eps) - eps


class _Objective:
    """Cost, terminal constraints and derivatives of one problem, in deviation coordinates.

    A trajectory is stored as ``(ds, dv, T)`` with ``s = s0 + k v0 dt + ds`` and
    ``v = v0 + dv``.
    """

    def __init__(self, prob: OcpProblem):
        n = prob.horizon
        p = prob.params
        w = prob.weights
        self.n = n
        self.dt = prob.dt
        self.x0 = np.array(prob.x0, dtype=float)
        self.v0 = self.x0[1]
        k = np.arange(n + 1)
        self.base = np.column_stack([self.x0[0] + k * prob.dt * self.v0, np.full(n + 1, self.v0)])

        refs, mats = [], []
        if prob.desired is not None and w.tracks_leader:
            refs.append(prob.desired[:n])
            mats.append(w.q)
        if np.any(w.f):
            refs.append(prob.own.outputs[:n])
            mats.append(w.f)
        if np.any(w.g):
            for j in sorted(prob.neighbors):
                d = spacing_vector(prob.node, j, prob.spacing)
                refs.append(prob.neighbors[j].outputs[:n] + d)
                mats.append(w.g)
        refs = np.array(refs, dtype=float).reshape(len(refs), n, 2)
        self.offsets = refs - self.base[None, :n]
        mats = np.array(mats, dtype=float).reshape(len(mats), 2, 2)
        self.roots = np.array([_sqrtm_psd(m) for m in mats]).reshape(len(mats), 2, 2)
        self.sqrt_r = math.sqrt(w.r)

        self.params = p
        self.k_v = prob.dt / p.mass
        self.ratio = p.driveline_eff / p.wheel_radius
        self.rolling = p.mass * p.gravity * p.rolling_coeff
        self.ca = p.drag_coeff
        self.h_scale = p.wheel_radius / p.driveline_eff
        self.lag = 1.0 - prob.dt / p.tau
        self.gain = prob.dt / p.tau
        self.target = np.array(terminal_output_target(prob), dtype=float)
        self.target_dev = self.target - self.base[n]

    def rollout(self, u: np.ndarray) -> np.ndarray:
        n = self.n
        out = np.empty((n + 1, 3))
        ds, dv, T = 0.0, 0.0, self.x0[2]
        out[0] = ds, dv, T
        dt, k_v, ratio, ca, rolling, v0 = self.dt, self.k_v, self.ratio, self.ca, self.rolling, self.v0
        tau = self.params.tau
        for k in range(n):
            v = v0 + dv
            ds, dv, T = (
                ds + dv * dt,
                dv + k_v * (ratio * T - (ca * v * v + rolling)),
                T - T / tau * dt + float(u[k]) / tau * dt,
            )
            out[k + 1] = ds, dv, T
        return out

    def speeds(self, dev: np.ndarray) -> np.ndarray:
        return self.v0 + dev[:, 1]

    def sensitivities(self, dev: np.ndarray) -> np.ndarray:
        """``S[k, :, j] = d x_k / d u_j`` for k = 0..n."""
        n = self.n
        S = np.zeros((n + 1, 3, n))
        a_vv = 1.0 - self.k_v * 2.0 * self.ca * self.speeds(dev[:n])
        a_vT = self.k_v * self.ratio
        for k in range(n):
            prev = S[k]
            nxt = S[k + 1]
            nxt[0] = prev[0] + self.dt * prev[1]
            nxt[1] = a_vv[k] * prev[1] + a_vT * prev[2]
            nxt[2] = self.lag * prev[2]
            nxt[2, k] += self.gain
        return S

    def eq_torque(self, v):
        return self.h_scale * (self.ca * v * v + self.rolling)

    def constraints(self, dev: np.ndarray) -> np.ndarray:
        ds, dv, T = dev[-1]
        return np.array(
            [ds - self.target_dev[0], dv - self.target_dev[1], T - self.eq_torque(self.v0 + dv)]
        )

    def constraint_jacobian(self, dev: np.ndarray, S: np.ndarray) -> np.ndarray:
        slope = self.h_scale * 2.0 * self.ca * (self.v0 + dev[-1, 1])
        return np.vstack([S[-1, 0], S[-1, 1], S[-1, 2] - slope * S[-1, 1]])

    def norm_terms(self, u: np.ndarray, dev: np.ndarray, eps: float):
        """Scaled residuals ``q = W^(1/2) r`` and smoothed magnitudes of every term."""
        n = self.n
        res = dev[None, :n, :2] - self.offsets
        q_out = np.einsum("mab,mkb->mka", self.roots, res)
        rho_out = np.sqrt(np.sum(q_out * q_out, axis=-1) + eps * eps)
        q_u = self.sqrt_r * (u - self.eq_torque(self.speeds(dev[:n])))
        rho_u = np.sqrt(q_u * q_u + eps * eps)
        return q_out, rho_out, q_u, rho_u

    def cost(self, u: np.ndarray, dev: np.ndarray, eps: float) -> float:
        _, rho_out, _, rho_u = self.norm_terms(u, dev, eps)
        return float(np.sum(rho_out - eps) + np.sum(rho_u - eps))

    def derivatives(self, u, dev, S, eps, duals):
        """Gradient and primal-dual curvature of the smoothed cost.

        ``duals`` holds one vector per norm term inside the unit ball; it
        replaces ``q / rho`` in the rank-one part of each term's Hessian.
        """
        n = self.n
        w_out, w_u = duals
        q_out, rho_out, q_u, rho_u = self.norm_terms(u, dev, eps)
        # B = (I - sym(w q^T) / rho) / rho per term and stage
        wq = w_out[..., :, None] * q_out[..., None, :]
        sym = 0.5 * (wq + np.swapaxes(wq, -1, -2))
        rho = rho_out[..., None, None]
        b = (np.eye(2) - sym / rho) / rho
        hy = np.einsum("mca,mkcd,mdb->kab", self.roots, b, self.roots)
        gy = np.einsum("mca,mkc->ka", self.roots, q_out / rho_out[..., None])
        sy = S[:n, :2, :]
        sy2 = sy.reshape(2 * n, n)
        grad = sy2.T @ gy.reshape(2 * n)
        hess = sy2.T @ (hy @ sy).reshape(2 * n, n)

        jr = self._torque_jacobian(dev, S)
        grad += jr.T @ (q_u / rho_u)
        curv = (1.0 - w_u * q_u / rho_u) / rho_u
        hess += jr.T @ (curv[:, None] * jr)
        return grad, hess

    def _torque_jacobian(self, dev, S):
        n = self.n
        slope = self.h_scale * 2.0 * self.ca * self.speeds(dev[:n])
        return self.sqrt_r * (np.eye(n) - slope[:, None] * S[:n, 1, :])

    def initial_duals(self, u, dev, eps):
        q_out, rho_out, q_u, rho_u = self.norm_terms(u, dev, eps)
        return q_out / rho_out[..., None], q_u / rho_u

    def update_duals(self, duals, u, dev, S, eps, du):
        """Linearised dual update along the primal step ``du``, projected onto the unit ball."""
        n = self.n
        w_out, w_u = duals
        q_out, rho_out, q_u, rho_u = self.norm_terms(u, dev, eps)
        dq = np.einsum("mab,kb->mka", self.roots, S[:n, :2, :] @ du)
        proj = np.sum(q_out * dq, axis=-1) / rho_out
        w_new = (dq - w_out * proj[..., None] + q_out) / rho_out[..., None]
        w_new /= np.maximum(np.linalg.norm(w_new, axis=-1), 1.0)[..., None]
        dqu = self._torque_jacobian(dev, S) @ du
        wu_new = np.clip((dqu - w_u * q_u * dqu / rho_u + q_u) / rho_u, -1.0, 1.0)
        return w_new, wu_new


def _barrier(u, lb, ub, mu):
    dl = u - lb
    du = ub - u
    value = -mu * float(np.sum(np.log(dl)) + np.sum(np.log(du)))
    grad = -mu / dl + mu / du
    hess = mu / dl**2 + mu / du**2
    return value, grad, hess


def _newton_step(H, g, A, c):
    """Null-space solution of the equality-constrained Newton system.

    The range-space part satisfies ``A d = -c`` to roundoff however badly
    ``H`` is scaled; only the reduced Hessian needs factorising.
    """
    n = H.shape[0]
    m = A.shape[0]
    q, r = np.linalg.qr(A.T, mode="complete")
    y, z = q[:, :m], q[:, m:]
    d_range = y @ np.linalg.solve(r[:m].T, -c)
    hz = z.T @ H @ z
    rhs = -z.T @ (g + H @ d_range)
    hz += 1e-14 * max(1.0, float(np.max(np.abs(np.diag(hz))))) * np.eye(n - m)
    try:
        dz = np.linalg.solve(hz, rhs)
    except np.linalg.LinAlgError:
        dz = np.linalg.lstsq(hz, rhs, rcond=None)[0]
    d = d_range + z @ dz
    lam = np.linalg.solve(r[:m], -y.T @ (g + H @ d))
    return d, lam


def kkt_residual(g, A, u, lb, ub, active_tol):
    """Stationarity of ``min f s.t. A-equalities, lb <= u <= ub`` at ``u``.

    Inputs within ``active_tol`` of a bound get a sign-constrained box
    multiplier; only the wrong-sign part of their gradient counts.
    """
    at_lb = u - lb <= active_tol
    at_ub = ub - u <= active_tol
    free = ~(at_lb | at_ub)
    if np.any(free):
        lam, *_ = np.linalg.lstsq(A[:, free].T, -g[free], rcond=None)
    else:
        lam = np.zeros(A.shape[0])
    r = g + A.T @ lam
    r = np.where(at_lb, np.minimum(r, 0.0), r)
    r = np.where(at_ub, np.maximum(r, 0.0), r)
    return float(np.max(np.abs(r))) if r.size else 0.0


def _phase1(obj: _Objective, u: np.ndarray, lb: np.ndarray, ub: np.ndarray, iters: int):
    """Gauss-Newton on the terminal residual inside the box."""
    dev = obj.rollout(u)
    c = obj.constraints(dev)
    for _ in range(iters):
        if np.max(np.abs(c)) < 1e-11:
            break
        A = obj.constraint_jacobian(dev, obj.sensitivities(dev))
        row = np.linalg.norm(A, axis=1)
        row[row == 0] = 1.0
        mat = np.vstack([A / row[:, None], 1e-6 * np.eye(obj.n)])
        rhs = np.concatenate([-c / row, np.zeros(obj.n)])
        lo = np.minimum(lb - u, 0.0)
        hi = np.maximum(ub - u, 0.0)
        d = lsq_linear(mat, rhs, bounds=(lo, hi), method="bvls").x
        norm0 = np.linalg.norm(c / row)
        alpha = 1.0
        while alpha > 1e-6:
            trial = np.clip(u + alpha * d, lb, ub)
            trial_dev = obj.rollout(trial)
            ct = obj.constraints(trial_dev)
            if np.linalg.norm(ct / row) < norm0:
                break
            alpha *= 0.5
        else:
            break
        u, dev, c = trial, trial_dev, ct
    return u, dev, c


def _levels(opts: SolverOptions) -> list[float]:
    out = []
    eps = opts.eps_start
    while eps > opts.eps_final * (1 + 1e-9):
        out.append(eps)
        eps *= opts.eps_factor
    out.append(opts.eps_final)
    return out


def solve_ocp(prob: OcpProblem, options: SolverOptions | None = None, warm_start=None) -> OcpSolution:
    opts = options or SolverOptions()
    obj = _Objective(prob)
    n = obj.n
    lb = np.full(n, float(prob.bounds.u_min))
    ub = np.full(n, float(prob.bounds.u_max))
    width = ub - lb
    if warm_start is None:
        warm_start = prob.own.inputs if prob.own.inputs is not None else obj.eq_torque(np.full(n, obj.v0))
    u = np.clip(np.array(warm_start, dtype=float), lb, ub)

    dev = obj.rollout(u)
    c = obj.constraints(dev)
    if np.max(np.abs(c)) > 1e-9:
        margin = 1e-9 * width
        u, dev, c = _phase1(obj, np.clip(u, lb + margin, ub - margin), lb + margin, ub - margin, opts.phase1_iter)
    if np.max(np.abs(c)) > opts.infeasible_tol:
        return _finish(prob, u, Status.INFEASIBLE, 0, math.nan, notes={"phase1_residual": float(np.max(np.abs(c)))})

    # start strictly inside the box; the SQP steps restore the terminal equalities
    push = opts.interior_push * width
    u = np.clip(u, lb + push, ub - push)
    dev = obj.rollout(u)
    levels = _levels(opts)
    duals = obj.initial_duals(u, dev, levels[0])
    # fixed row scaling keeps the merit penalty and the multipliers O(1)
    row = np.linalg.norm(obj.constraint_jacobian(dev, obj.sensitivities(dev)), axis=1)
    scale = 1.0 / np.where(row > 0, row, 1.0)
    c_tol = 1e-10 * (1.0 + np.abs(np.array([obj.target[0], obj.target[1], obj.eq_torque(obj.target[1])])))
    nu = 1.0
    stat = math.inf
    converged = False
    iterations = 0
    for li, eps in enumerate(levels):
        final = li == len(levels) - 1
        mu = opts.barrier_ratio * eps
        tol = opts.stationarity_tol if final else max(opts.stationarity_tol, 0.1 * eps)
        # a bound is active once its barrier force mu / distance can reach tol
        active_tol = max(1e-6, 1e3 * mu, mu / tol)
        converged = False
        for _ in range(opts.max_iter_per_level):
            dev = obj.rollout(u)
            S = obj.sensitivities(dev)
            c_raw = obj.constraints(dev)
            c = scale * c_raw
            A = scale[:, None] * obj.constraint_jacobian(dev, S)
            g, H = obj.derivatives(u, dev, S, eps, duals)
            stat = kkt_residual(g, A, u, lb, ub, active_tol)
            if stat <= tol and np.all(np.abs(c_raw) <= c_tol):
                converged = True
                break
            iterations += 1
            fb, gb, hb = _barrier(u, lb, ub, mu)
            g_tot = g + gb
            d, lam = _newton_step(H + np.diag(hb), g_tot, A, c)
            nu = max(nu, 1.5 * float(np.max(np.abs(lam))))

            # fraction to the boundary
            alpha_max = 1.0
            neg = d < 0
            if np.any(neg):
                alpha_max = min(alpha_max, float(np.min(0.995 * (u[neg] - lb[neg]) / -d[neg])))
            pos = d > 0
            if np.any(pos):
                alpha_max = min(alpha_max, float(np.min(0.995 * (ub[pos] - u[pos]) / d[pos])))

            merit0 = obj.cost(u, dev, eps) + fb + nu * float(np.sum(np.abs(c)))
            slope = float(g_tot @ d) - nu * float(np.sum(np.abs(c)))
            # merit changes below this are indistinguishable from roundoff: near
            # the kinks every torque term moves by the rounding error of u - h(v)
            noise = 1e-13 * (1.0 + abs(merit0)) + 1e-14 * obj.n * (1.0 + obj.sqrt_r * float(np.max(np.abs(u))))
            alpha = alpha_max
            accepted = False
            while alpha > 1e-10:
                trial = u + alpha * d
                trial_dev = obj.rollout(trial)
                merit = (
                    obj.cost(trial, trial_dev, eps)
                    + _barrier(trial, lb, ub, mu)[0]
                    + nu * float(np.sum(np.abs(scale * obj.constraints(trial_dev))))
                )
                if merit <= merit0 + 1e-4 * alpha * min(slope, 0.0) or (
                    abs(alpha * slope) < noise and merit <= merit0 + noise
                ):
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                LOG.debug("eps=%.0e line search failed at stat=%.3e", eps, stat)
                break
            LOG.debug(
                "eps=%.0e stat=%.3e |c|=%.3e alpha=%.3e amax=%.3e step=%.3e",
                eps, stat, float(np.max(np.abs(c_raw))), alpha, alpha_max, alpha * float(np.max(np.abs(d))),
            )
            duals = obj.update_duals(duals, u, dev, S, eps, alpha * d)
            u = trial
        if not converged:
            LOG.debug("level eps=%g ended without meeting tolerance (stat=%g)", eps, stat)

    cinf = float(np.max(np.abs(obj.constraints(obj.rollout(u)))))
    if cinf > opts.infeasible_tol:
        status = Status.INFEASIBLE
    elif converged and cinf <= opts.terminal_tol:
        status = Status.CONVERGED
    else:
        status = Status.MAX_ITERATIONS
    sol = _finish(prob, u, status, iterations, stat)

    if opts.compare_warm_start and prob.own.inputs is not None and status != Status.INFEASIBLE:
        alt = _warm_start_candidate(prob, obj, lb, ub, opts, status, iterations, stat)
        if alt is not None and alt.cost <= sol.cost:
            alt.notes["sqp_cost"] = sol.cost
            return alt
    return sol


def _warm_start_candidate(prob, obj, lb, ub, opts, status, iterations, stat):
    """The node's own broadcast inputs as a solution, if they are feasible.

    Smoothing leaves the SQP answer up to ``n * eps_final`` above the true
    optimum, which can exceed the assumed trajectory's cost once the platoon
    has settled; this keeps the reported cost monotone in that regime.
    """
    cand = np.array(prob.own.inputs, dtype=float)
    if np.any(cand < lb) or np.any(cand > ub):
        return None
    dev = obj.rollout(cand)
    if np.max(np.abs(obj.constraints(dev))) > opts.terminal_tol:
        return None
    # a smoothed gradient at the kinks says nothing about optimality, so the
    # candidate inherits the SQP run's status and stationarity measure
    return _finish(prob, cand, status, iterations, stat, source="warm_start")


def _finish(prob, u, status, iterations, stat, source="sqp", notes=None):
    """Package ``u`` with states from the reference rollout and the unsmoothed cost."""
    u = np.array(u, dtype=float)
    states = rollout_array(prob.x0, u, prob.params, prob.dt)
    return OcpSolution(
        inputs=u,
        states=states,
        outputs=states[:, :2].copy(),
        cost=float(np.sum(stage_costs(prob, u))),
        status=status,
        iterations=iterations,
        terminal_residual=float(np.max(np.abs(terminal_residual(prob, states)))),
        kkt_residual=stat,
        source=source,
        notes=notes or {},
    )
