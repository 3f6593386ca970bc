"""Dense strictly convex QP solver and the condensed MPC problem builder.

The solver is a primal active-set method: small problems, warm starts from
the previous control step, and bit-reproducible iterates matter more here
than raw speed.  A phase-1 LP finds a feasible start (and certifies
infeasibility) when no usable warm start is available.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .convexsets import HPolytope, Zonotope


class QpError(ValueError):
    """Malformed QP data."""


@dataclass(frozen=True)
class Qp:
    """min 1/2 x'Hx + g'x  s.t.  ineq_a x <= ineq_b,  eq_a x = eq_b."""

    hess: np.ndarray
    grad: np.ndarray
    ineq_a: np.ndarray
    ineq_b: np.ndarray
    eq_a: np.ndarray
    eq_b: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.hess, dtype=float)
        g = np.atleast_1d(np.asarray(self.grad, dtype=float))
        n = g.size
        if h.shape != (n, n):
            raise QpError("hessian must be n x n")
        if not np.allclose(h, h.T, atol=1e-9 * (1.0 + np.abs(h).max())):
            raise QpError("hessian must be symmetric")
        ia = np.asarray(self.ineq_a, dtype=float).reshape(-1, n)
        ib = np.atleast_1d(np.asarray(self.ineq_b, dtype=float))
        ea = np.asarray(self.eq_a, dtype=float).reshape(-1, n)
        eb = np.atleast_1d(np.asarray(self.eq_b, dtype=float))
        if ia.shape[0] != ib.size or ea.shape[0] != eb.size:
            raise QpError("constraint row/offset count mismatch")
        object.__setattr__(self, "hess", 0.5 * (h + h.T))
        object.__setattr__(self, "grad", g)
        object.__setattr__(self, "ineq_a", ia)
        object.__setattr__(self, "ineq_b", ib)
        object.__setattr__(self, "eq_a", ea)
        object.__setattr__(self, "eq_b", eb)

    @property
    def n(self):
        return self.grad.size


@dataclass(frozen=True)
class QpSolution:
    x_opt: np.ndarray
    objective: float
    status: str                 # "optimal" | "infeasible" | "iteration_limit"
    kkt_residual: float
    iterations: int = 0
    active_set: tuple = ()


def _objective(qp, x):
    return float(0.5 * x @ qp.hess @ x + qp.grad @ x)


def _kkt_residual(qp, x, lam_ineq, nu_eq, tol_zero=1e-12):
    """Max of stationarity, primal feasibility and complementarity residuals."""
    stat = qp.hess @ x + qp.grad
    if qp.ineq_a.size:
        stat = stat + qp.ineq_a.T @ lam_ineq
    if qp.eq_a.size:
        stat = stat + qp.eq_a.T @ nu_eq
    r = float(np.abs(stat).max()) if stat.size else 0.0
    if qp.ineq_a.size:
        viol = qp.ineq_a @ x - qp.ineq_b
        r = max(r, float(np.clip(viol, 0.0, None).max()))
        r = max(r, float(np.abs(lam_ineq * viol).max()))
        if lam_ineq.size:
            r = max(r, float(np.clip(-lam_ineq, 0.0, None).max()))
    if qp.eq_a.size:
        r = max(r, float(np.abs(qp.eq_a @ x - qp.eq_b).max()))
    return r


def _phase1(qp):
    """Feasible point via an LP; None when the constraints are inconsistent."""
    res = linprog(np.zeros(qp.n),
                  A_ub=qp.ineq_a if qp.ineq_a.size else None,
                  b_ub=qp.ineq_b if qp.ineq_a.size else None,
                  A_eq=qp.eq_a if qp.eq_a.size else None,
                  b_eq=qp.eq_b if qp.eq_a.size else None,
                  bounds=(None, None), method="highs")
    if res.status == 2:
        return None
    if res.status != 0:
        raise QpError(f"phase-1 LP failed with status {res.status}")
    return res.x


def _is_feasible(qp, x, tol):
    if qp.ineq_a.size and np.any(qp.ineq_a @ x - qp.ineq_b > tol):
        return False
    if qp.eq_a.size and np.any(np.abs(qp.eq_a @ x - qp.eq_b) > tol):
        return False
    return True


class _EqSolver:
    """Equality-constrained subproblem solver with a cached Hessian factor.

    All H^{-1}-mapped constraint columns are computed in one batched solve
    up front; each working set then costs only the small Schur system.
    """

    def __init__(self, qp):
        from scipy.linalg import cho_factor, cho_solve
        self.qp = qp
        scale = max(np.abs(qp.hess).max(), 1.0)
        jitter = 0.0
        while True:
            try:
                self.hf = cho_factor(qp.hess + jitter * np.eye(qp.n), lower=True)
                break
            except np.linalg.LinAlgError:
                if jitter > 1e-4 * scale:
                    raise QpError("hessian is not positive definite")
                jitter = max(jitter * 10.0, 1e-12 * scale)
        self.n_eq = qp.eq_a.shape[0] if qp.eq_a.size else 0
        all_rows = [qp.eq_a] if self.n_eq else []
        if qp.ineq_a.size:
            all_rows.append(qp.ineq_a)
        self.c_all = np.vstack(all_rows) if all_rows else np.zeros((0, qp.n))
        self.d_all = np.concatenate(
            ([qp.eq_b] if self.n_eq else []) + ([qp.ineq_b] if qp.ineq_a.size else [])) \
            if self.c_all.size else np.zeros(0)
        self.w_all = cho_solve(self.hf, self.c_all.T, check_finite=False) \
            if self.c_all.size else np.zeros((qp.n, 0))
        self.y_free = -cho_solve(self.hf, qp.grad, check_finite=False)

    def solve(self, working):
        """Minimizer on the working set; returns (x*, lam_working, nu_eq)."""
        if self.c_all.shape[0] == 0:
            return self.y_free, np.zeros(0), np.zeros(0)
        idx = list(range(self.n_eq)) + [self.n_eq + i for i in working]
        if not idx:
            return self.y_free, np.zeros(0), np.zeros(0)
        c = self.c_all[idx]
        w = self.w_all[:, idx]
        s = c @ w
        r = self.d_all[idx] - c @ self.y_free
        try:
            mu = np.linalg.solve(s, -r)
        except np.linalg.LinAlgError:
            mu = np.linalg.lstsq(s, -r, rcond=None)[0]
        x = self.y_free - w @ mu
        return x, mu[self.n_eq:], mu[:self.n_eq]


def solve(qp: Qp, tol=1e-8, max_iter=200, x0=None, active0=None) -> QpSolution:
    """Primal active-set iteration from a feasible start.

    ``x0`` is an optional warm start; it is used only when feasible.
    ``active0`` seeds the working set (constraints that are tight at the
    warm start), which makes consecutive similar solves converge in a
    couple of iterations.  Ties break toward the smallest row index, so
    identical inputs give identical outputs.
    """
    n = qp.n
    feas_tol = max(tol, 1e-9)
    x = None
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        if x0.shape == (n,) and _is_feasible(qp, x0, feas_tol * 10.0):
            x = x0.copy()
    if x is None:
        x = _phase1(qp)
        if x is None:
            return QpSolution(x_opt=np.full(n, np.nan), objective=np.inf,
                              status="infeasible", kkt_residual=np.inf)
    m_ineq = qp.ineq_a.shape[0]
    if m_ineq:
        resid = qp.ineq_b - qp.ineq_a @ x
        scale = 1.0 + np.abs(qp.ineq_b)
        tight = resid <= feas_tol * scale
        if active0 is not None:
            # seed with the previous active set where it is at least close
            seed = np.zeros(m_ineq, dtype=bool)
            idx = [i for i in active0 if 0 <= i < m_ineq]
            seed[idx] = True
            tight = (tight & seed) | (seed & (resid <= 1e-3 * scale))
        working = [int(i) for i in np.where(tight)[0]]
    else:
        working = []

    es = _EqSolver(qp)
    lam = np.zeros(m_ineq)
    lam_w = np.zeros(0)
    nu = np.zeros(qp.eq_a.shape[0] if qp.eq_a.size else 0)
    for it in range(1, max_iter + 1):
        x_sub, lam_w, nu = es.solve(working)
        p = x_sub - x
        if np.abs(p).max(initial=0.0) <= 1e-11 * (1.0 + np.abs(x).max()):
            # stationary on the working set: check multiplier signs
            lam = np.zeros(m_ineq)
            lam[working] = lam_w
            if lam_w.size == 0 or lam_w.min() >= -tol:
                res = _kkt_residual(qp, x, lam, nu)
                return QpSolution(x_opt=x, objective=_objective(qp, x),
                                  status="optimal", kkt_residual=res,
                                  iterations=it, active_set=tuple(sorted(working)))
            working.pop(int(np.argmin(lam_w)))
            continue
        # ratio test against the inactive constraints
        alpha = 1.0
        blocker = -1
        if m_ineq:
            a_dot_p = qp.ineq_a @ p
            resid = qp.ineq_b - qp.ineq_a @ x
            mask = np.ones(m_ineq, dtype=bool)
            mask[working] = False
            mask &= a_dot_p > 1e-12
            if np.any(mask):
                idxs = np.where(mask)[0]
                ratios = resid[idxs] / a_dot_p[idxs]
                j = int(np.argmin(ratios))
                if ratios[j] < alpha - 1e-14:
                    alpha = max(float(ratios[j]), 0.0)
                    blocker = int(idxs[j])
        x = x + alpha * p
        if blocker >= 0:
            working.append(blocker)
            working.sort()
    lam_full = np.zeros(m_ineq)
    lam_full[working] = lam_w if lam_w.size == len(working) else 0.0
    return QpSolution(x_opt=x, objective=_objective(qp, x),
                      status="iteration_limit",
                      kkt_residual=_kkt_residual(qp, x, lam_full, nu),
                      iterations=max_iter, active_set=tuple(sorted(working)))


def prediction_matrices(a, b, horizon):
    """Stacked maps M, S with [x_0; ...; x_N] = M x_0 + S [u_0; ...; u_{N-1}]."""
    n, m = b.shape
    big_m = np.zeros(((horizon + 1) * n, n))
    big_s = np.zeros(((horizon + 1) * n, horizon * m))
    a_pow = np.eye(n)
    big_m[:n] = a_pow
    for k in range(1, horizon + 1):
        a_pow = a @ a_pow
        big_m[k * n:(k + 1) * n] = a_pow
        for j in range(k):
            blk = np.linalg.matrix_power(a, k - 1 - j) @ b
            big_s[k * n:(k + 1) * n, j * m:(j + 1) * m] = blk
    return big_m, big_s


def _condensed_static(model, q, r, p, horizon, x_set, u_set, xf_set):
    """Step-invariant pieces of the condensed QP (maps, Hessian, rows)."""
    a = np.asarray(model.a, dtype=float)
    b = np.asarray(model.b, dtype=float)
    n, m = b.shape
    big_m, big_s = prediction_matrices(a, b, horizon)
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    p = np.asarray(p, dtype=float)
    q_bar = np.zeros(((horizon + 1) * n, (horizon + 1) * n))
    for k in range(horizon):
        q_bar[k * n:(k + 1) * n, k * n:(k + 1) * n] = q
    q_bar[horizon * n:, horizon * n:] = p
    r_bar = np.kron(np.eye(horizon), r)

    nxu = n + horizon * m
    t_xu = np.hstack([big_m, big_s])                   # states as a map of (x0, u)
    hess_xu = 2.0 * (t_xu.T @ q_bar @ t_xu)
    hess_xu[n:, n:] += 2.0 * r_bar
    grad_map = -2.0 * t_xu.T @ q_bar                   # times stacked reference

    rows = []
    for k in range(horizon):
        rows.append(x_set.normals @ t_xu[k * n:(k + 1) * n])
    rows.append(xf_set.normals @ t_xu[horizon * n:])
    u_rows = np.zeros((u_set.normals.shape[0] * horizon, nxu))
    for k in range(horizon):
        u_rows[k * u_set.normals.shape[0]:(k + 1) * u_set.normals.shape[0],
               n + k * m:n + (k + 1) * m] = u_set.normals
    rows.append(u_rows)
    rows_xu = np.vstack(rows)
    n_stage = x_set.normals.shape[0]
    n_term = xf_set.normals.shape[0]
    n_inp = u_set.normals.shape[0]
    return {
        "n": n, "m": m, "horizon": horizon, "t_xu": t_xu,
        "hess_xu": hess_xu, "grad_map": grad_map, "rows_xu": rows_xu,
        "n_stage": n_stage, "n_term": n_term, "n_inp": n_inp,
        "hess_scale": max(abs(hess_xu).max(), 1.0),
    }


def build_condensed_mpc(model, q, r, p, horizon,
                        x_hat_sets, r_target, x_init_set: Zonotope,
                        x_measured, init_reg=1e-9, cache=None) -> Qp:
    """Condense the tube MPC step into a dense QP.

    Decision vector: [x_0 (n), u_0..u_{N-1} (N*m), xi (g)] where xi is the
    certificate that x_measured - x_0 lies in ``x_init_set``.  Predicted
    states are eliminated by forward substitution.  ``x_hat_sets`` is the
    (state, input, terminal) triple of tightened polytopes; the terminal
    polytope constrains x_N - r_target.

    The xi block enters the cost only through a tiny regularizer so the
    Hessian stays positive definite; it does not move the optimal (x_0, u).
    ``cache`` (a dict owned by the caller) skips rebuilding the parts that
    do not change between control steps; constraint normals must then stay
    fixed across calls.
    """
    horizon = int(horizon)
    if horizon < 1:
        raise QpError("horizon must be at least 1")
    x_set, u_set, xf_set = x_hat_sets
    r_target = np.asarray(r_target, dtype=float)
    x_measured = np.asarray(x_measured, dtype=float)
    g_mat = x_init_set.generators

    if cache is None:
        st = _condensed_static(model, q, r, p, horizon, x_set, u_set, xf_set)
    else:
        st = cache.get("static")
        if st is None or st["horizon"] != horizon:
            st = _condensed_static(model, q, r, p, horizon, x_set, u_set, xf_set)
            cache["static"] = st
    n, m = st["n"], st["m"]
    nxu = n + horizon * m
    ng = g_mat.shape[1]
    nz = nxu + ng

    hess = np.zeros((nz, nz))
    hess[:nxu, :nxu] = st["hess_xu"]
    if ng:
        hess[nxu:, nxu:] = 2.0 * init_reg * st["hess_scale"] * np.eye(ng)
    grad = np.zeros(nz)
    grad[:nxu] = st["grad_map"] @ np.tile(r_target, horizon + 1)

    n_rows_xu = st["rows_xu"].shape[0]
    ineq_a = np.zeros((n_rows_xu + 2 * ng, nz))
    ineq_a[:n_rows_xu, :nxu] = st["rows_xu"]
    offs = [np.tile(x_set.offsets, horizon),
            xf_set.offsets + xf_set.normals @ r_target,
            np.tile(u_set.offsets, horizon)]
    if ng:
        ineq_a[n_rows_xu:n_rows_xu + ng, nxu:] = np.eye(ng)
        ineq_a[n_rows_xu + ng:, nxu:] = -np.eye(ng)
        offs.append(np.ones(2 * ng))
    ineq_b = np.concatenate(offs)

    # x_0 + G xi = x_measured - center  certifies the initial-state set
    eq_a = np.zeros((n, nz))
    eq_a[:, :n] = np.eye(n)
    if ng:
        eq_a[:, nxu:] = g_mat
    eq_b = x_measured - x_init_set.center

    return Qp(hess=hess, grad=grad, ineq_a=ineq_a, ineq_b=ineq_b,
              eq_a=eq_a, eq_b=eq_b)


def mpc_cost(a, b, q, r, p, r_target, x0, u_seq):
    """Trajectory cost of a rolled-out input sequence (reference tracking)."""
    x = np.asarray(x0, dtype=float)
    total = 0.0
    for u in u_seq:
        dx = x - r_target
        total += dx @ q @ dx + u @ r @ u
        x = a @ x + b @ u
    dx = x - r_target
    total += dx @ p @ dx
    return float(total), x


def decision_layout(n, horizon, m, ng):
    """Index slices of (x0, u, xi) inside the condensed decision vector."""
    return (slice(0, n),
            slice(n, n + horizon * m),
            slice(n + horizon * m, n + horizon * m + ng))
