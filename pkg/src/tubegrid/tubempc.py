"""Learning tube-based robust MPC controller for the dq-frame plant.

Holds the ancillary LQR gain, the Lyapunov terminal weight, the learned
accumulated-disturbance set and the tightened constraint sets, and runs the
per-sample control step: re-tighten, solve the condensed QP, apply the
ancillary feedback, and record the feasibility / stability monitors.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import qpsolver
from .convexsets import (Box, EmptySetError, HPolytope, SetError, Zonotope,
                         linear_map, max_positive_invariant, minkowski_sum,
                         mrpi_outer, paired_rows, pontryagin_diff,
                         spectral_radius)

log = logging.getLogger(__name__)


class ControllerError(RuntimeError):
    """Controller construction or stepping failed without a usable fallback."""


@dataclass(frozen=True)
class ControllerWeights:
    """State, input and terminal weights; the terminal weight must solve the
    closed-loop discrete Lyapunov equation for the chosen gain."""

    q: np.ndarray
    r: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        r = np.asarray(self.r, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if q.shape != (4, 4) or r.shape != (2, 2) or p.shape != (4, 4):
            raise ControllerError("weight matrices must be 4x4, 2x2, 4x4")
        if np.any(np.linalg.eigvalsh(0.5 * (q + q.T)) < -1e-10):
            raise ControllerError("q must be positive semidefinite")
        if np.any(np.linalg.eigvalsh(0.5 * (r + r.T)) <= 0.0):
            raise ControllerError("r must be positive definite")
        if np.any(np.linalg.eigvalsh(0.5 * (p + p.T)) <= 0.0):
            raise ControllerError("p must be positive definite")
        object.__setattr__(self, "q", 0.5 * (q + q.T))
        object.__setattr__(self, "r", 0.5 * (r + r.T))
        object.__setattr__(self, "p", 0.5 * (p + p.T))


@dataclass
class StepMonitor:
    """Per-step health record of the control loop."""

    qp_status: str
    lyapunov_value: float
    lyapunov_decrease_ok: bool
    in_region_of_attraction: bool
    tube_contains_state: bool
    fallback_used: bool = False
    stage_cost: float = 0.0
    tube_voltage_halfwidth: float = 0.0


def lqr_gain(model, q, r, tol=1e-10, max_iter=200000):
    """Discrete-time LQR gain by iterating the Riccati recursion to a fixed point.

    Returns (k_gain, p_riccati) with the sign convention u = K x, so the
    closed loop is A + B K and K carries the minus sign internally.
    """
    a = np.asarray(model.a, dtype=float)
    b = np.asarray(model.b, dtype=float)
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    p = q.copy()
    for it in range(max_iter):
        bt_p = b.T @ p
        gain = np.linalg.solve(r + bt_p @ b, bt_p @ a)
        p_next = q + a.T @ p @ a - a.T @ p @ b @ gain
        p_next = 0.5 * (p_next + p_next.T)
        delta = np.abs(p_next - p).max() / max(1.0, np.abs(p_next).max())
        p = p_next
        if not np.all(np.isfinite(p)):
            raise ControllerError("Riccati recursion diverged")
        if delta < tol:
            break
    else:
        raise ControllerError(f"Riccati recursion did not converge in {max_iter} iterations")
    k = -np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
    if spectral_radius(a + b @ k) >= 1.0:
        raise ControllerError("LQR gain failed to stabilize the plant")
    return k, p


def terminal_p_from_lyapunov(a_k, q, r, k_gain):
    """Solve P = (Q + K'RK) + A_K' P A_K through the vectorized linear system."""
    a_k = np.asarray(a_k, dtype=float)
    if spectral_radius(a_k) >= 1.0 - 1e-12:
        raise ControllerError("closed-loop matrix is not Schur stable")
    q_eff = np.asarray(q, dtype=float) + k_gain.T @ np.asarray(r, dtype=float) @ k_gain
    n = a_k.shape[0]
    lhs = np.eye(n * n) - np.kron(a_k.T, a_k.T)
    p = np.linalg.solve(lhs, q_eff.reshape(-1)).reshape(n, n)
    p = 0.5 * (p + p.T)
    resid = np.abs(p - q_eff - a_k.T @ p @ a_k).max()
    if resid > 1e-8 * max(1.0, np.abs(p).max()):
        raise ControllerError(f"Lyapunov residual too large: {resid:.2e}")
    return p


def steady_state_input(model, r_target):
    """Least-squares input holding the reference, u_r = B^+(r - A r).

    Also returns the equilibrium residual ||A r + B u_r - r||, nonzero in
    general because the input matrix is tall.
    """
    a = np.asarray(model.a, dtype=float)
    b = np.asarray(model.b, dtype=float)
    r_target = np.asarray(r_target, dtype=float)
    rhs = r_target - a @ r_target
    u_r, *_ = np.linalg.lstsq(b, rhs, rcond=None)
    residual = float(np.linalg.norm(a @ r_target + b @ u_r - r_target))
    return u_r, residual


def compute_reference(v_ref_dq, model, expected_load=None):
    """Full-state reference consistent with the model equilibrium.

    Solves [A - I, B] [x_r; u_r] = -E i_load with the two voltage states
    pinned to ``v_ref_dq``; the filter-current targets and the matching
    input fall out of the linear system.  With ``expected_load`` omitted
    the reference is an exact equilibrium of the undisturbed model, which
    keeps the terminal-set algebra drift-free.
    """
    a = np.asarray(model.a, dtype=float)
    b = np.asarray(model.b, dtype=float)
    e = np.asarray(model.e, dtype=float)
    v_ref = np.asarray(v_ref_dq, dtype=float)
    load = np.zeros(2) if expected_load is None else np.asarray(expected_load, dtype=float)
    am_i = a - np.eye(4)
    # unknowns: [ifd, ifq, u_d, u_q]
    lhs = np.hstack([am_i[:, 2:4], b])
    rhs = -e @ load - am_i[:, 0:2] @ v_ref
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise ControllerError("singular equilibrium system") from exc
    x_r = np.array([v_ref[0], v_ref[1], sol[0], sol[1]])
    u_r = sol[2:4]
    resid = float(np.linalg.norm(am_i @ x_r + b @ u_r + e @ load))
    if resid > 1e-6 * max(1.0, float(np.abs(x_r).max())):
        raise ControllerError(f"equilibrium residual too large: {resid:.2e}")
    return x_r, u_r


def disturbance_set(model, w1_set, w2_set) -> Zonotope:
    """State-space disturbance set: the current confidence set mapped through
    the disturbance input matrix, plus the model-error box."""
    w1_zono = w1_set.outer_box().to_zonotope() if hasattr(w1_set, "outer_box") \
        else w1_set.to_zonotope() if isinstance(w1_set, Box) else w1_set
    mapped = linear_map(np.asarray(model.e, dtype=float), w1_zono)
    if isinstance(w2_set, Box):
        return minkowski_sum(mapped, w2_set.to_zonotope())
    return minkowski_sum(mapped, w2_set)


@dataclass
class TubeController:
    """All data of one DG's tube controller plus the last nominal solution."""

    model: object
    k_gain: np.ndarray
    weights: ControllerWeights
    horizon_n: int
    x_set: HPolytope
    u_set: HPolytope
    omega0_poly: HPolytope          # unscaled invariant terminal shape
    omega0_supports: np.ndarray     # support of the shape along the domain rows
    r_target: np.ndarray
    u_r: np.ndarray
    mrpi_eps: float = 1.0
    mrpi_term_cap: int = 16
    tube_inflation: float = 1.0
    qp_tol: float = 1e-8
    qp_max_iter: int = 600
    reuse_threshold: float = 0.02
    s_hat: Zonotope = None
    w_hull: Box = None
    x_hat: HPolytope = None
    u_hat: HPolytope = None
    x_f_hat: HPolytope = None
    last_nominal: tuple = None      # (x_seq (N+1,4), u_seq (N,2))
    prev_cost: float = None
    prev_stage0: float = None
    prev_r: np.ndarray = None
    x_pairs: np.ndarray = None      # opposite-row index maps for fast emptiness
    u_pairs: np.ndarray = None
    _s_cache_key: tuple = field(default=None, repr=False)
    _qp_cache: dict = field(default_factory=dict, repr=False)
    _last_active: tuple = field(default=None, repr=False)
    _g_pinv: np.ndarray = field(default=None, repr=False)

    @property
    def a_k(self):
        return self.model.a + self.model.b @ self.k_gain


def _fast_empty(p: HPolytope, pairs):
    """Emptiness through opposite-row pairs when available, else an LP."""
    if pairs is not None:
        return bool(np.any(p.offsets + p.offsets[pairs] < -1e-12))
    return p.is_empty()


def _domain_offsets(ctrl: TubeController, x_hat, u_hat):
    dx = x_hat.offsets - x_hat.normals @ ctrl.r_target
    du = u_hat.offsets - u_hat.normals @ ctrl.u_r
    return np.concatenate([dx, du])


def build_controller(model, q, r, horizon, x_set: HPolytope, u_set: HPolytope,
                     v_ref_dq, mrpi_eps=1.0, mrpi_term_cap=16,
                     tube_inflation=1.0, qp_tol=1e-8, qp_max_iter=600,
                     mpi_max_iter=60) -> TubeController:
    """Assemble the controller: gain, terminal weight, invariant terminal shape.

    The terminal shape is computed once for the untightened domain; every
    step it is rescaled to fit inside the currently tightened sets, which
    preserves invariance exactly (the dynamics are linear).
    """
    k_gain, _ = lqr_gain(model, q, r)
    a_k = model.a + model.b @ k_gain
    rho = spectral_radius(a_k)
    if rho >= 1.0:
        raise ControllerError(f"closed loop not Schur (rho = {rho:.4f})")
    p = terminal_p_from_lyapunov(a_k, q, r, k_gain)
    weights = ControllerWeights(q=q, r=r, p=p)
    r_target, u_r = compute_reference(v_ref_dq, model)
    if not x_set.contains(r_target):
        raise ControllerError("reference lies outside the state constraint set")
    if not u_set.contains(u_r):
        raise ControllerError("steady input lies outside the input constraint set")

    rows = np.vstack([x_set.normals, u_set.normals @ k_gain])
    offs = np.concatenate([x_set.offsets - x_set.normals @ r_target,
                           u_set.offsets - u_set.normals @ u_r])
    keep = np.linalg.norm(rows, axis=1) > 1e-12
    domain = HPolytope(rows[keep], offs[keep])
    omega0 = max_positive_invariant(a_k, domain, max_iter=mpi_max_iter)
    all_rows = np.vstack([x_set.normals, u_set.normals @ k_gain])
    supports = np.array([omega0.support(row) if np.linalg.norm(row) > 1e-12 else 0.0
                         for row in all_rows])
    return TubeController(model=model, k_gain=k_gain, weights=weights,
                          horizon_n=int(horizon), x_set=x_set, u_set=u_set,
                          omega0_poly=omega0, omega0_supports=supports,
                          r_target=np.asarray(r_target, dtype=float),
                          u_r=np.asarray(u_r, dtype=float),
                          mrpi_eps=mrpi_eps, mrpi_term_cap=mrpi_term_cap,
                          tube_inflation=tube_inflation,
                          qp_tol=qp_tol, qp_max_iter=qp_max_iter,
                          x_pairs=paired_rows(x_set.normals),
                          u_pairs=paired_rows(u_set.normals))


def set_reference(ctrl: TubeController, v_ref_dq):
    """Re-point the controller at a new voltage reference (droop updates)."""
    r_target, u_r = compute_reference(v_ref_dq, ctrl.model)
    ctrl.r_target = r_target
    ctrl.u_r = u_r


def update_tube(ctrl: TubeController, w_hat_set: Zonotope):
    """Recompute the accumulated-disturbance set and re-tighten the constraints.

    Skips the accumulation when the disturbance set moved by less than the
    configured fraction since the cached computation.
    """
    hull = w_hat_set.interval_hull()
    ctrl.w_hull = hull
    key = (tuple(np.round(hull.center, 9)), tuple(np.round(hull.half_widths, 9)))
    scale = max(float(np.abs(hull.half_widths).max()),
                float(np.abs(hull.center).max()), 1e-9)
    reuse = False
    if ctrl._s_cache_key is not None and ctrl.s_hat is not None:
        old_c, old_h = ctrl._s_cache_key
        dc = np.abs(np.asarray(key[0]) - np.asarray(old_c)).max()
        dh = np.abs(np.asarray(key[1]) - np.asarray(old_h)).max()
        reuse = max(dc, dh) <= ctrl.reuse_threshold * scale
    if not reuse:
        s_hat = mrpi_outer(ctrl.a_k, w_hat_set, ctrl.mrpi_eps,
                           term_cap=ctrl.mrpi_term_cap)
        if ctrl.tube_inflation != 1.0:
            s_hat = Zonotope(s_hat.center,
                             ctrl.tube_inflation * s_hat.generators)
        ctrl.s_hat = s_hat
        ctrl._s_cache_key = key
        g = ctrl.s_hat.generators
        ctrl._g_pinv = np.linalg.pinv(g) if g.size else None
    s_hat = ctrl.s_hat
    ctrl.x_hat = pontryagin_diff(ctrl.x_set, s_hat, check_empty=False)
    ctrl.u_hat = pontryagin_diff(ctrl.u_set, linear_map(ctrl.k_gain, s_hat),
                                 check_empty=False)
    if _fast_empty(ctrl.x_hat, ctrl.x_pairs) or _fast_empty(ctrl.u_hat, ctrl.u_pairs):
        raise EmptySetError("tube larger than the constraint sets")
    # rescale the terminal shape into the tightened domain
    offs = _domain_offsets(ctrl, ctrl.x_hat, ctrl.u_hat)
    sup = ctrl.omega0_supports
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(sup > 1e-12, offs / np.where(sup > 1e-12, sup, 1.0), np.inf)
    lam = float(min(1.0, ratios.min()))
    if lam <= 0.0:
        raise EmptySetError("no room left for the terminal set after tightening")
    ctrl.x_f_hat = HPolytope(ctrl.omega0_poly.normals, lam * ctrl.omega0_poly.offsets)
    return s_hat


def shifted_candidate(ctrl: TubeController, r_target=None):
    """Shift the stored solution one step and extend with the terminal law.

    The appended input is K (x_N - r) + u_r and the appended state follows
    the nominal dynamics, so the candidate satisfies them exactly.
    """
    if ctrl.last_nominal is None:
        raise ControllerError("no stored previous solution to shift")
    if r_target is None:
        r_target = ctrl.r_target
    x_seq, u_seq = ctrl.last_nominal
    a = ctrl.model.a
    b = ctrl.model.b
    u_term = ctrl.k_gain @ (x_seq[-1] - r_target) + ctrl.u_r
    x_term = a @ x_seq[-1] + b @ u_term
    x_new = np.vstack([x_seq[1:], x_term])
    u_new = np.vstack([u_seq[1:], u_term]) if len(u_seq) > 1 else u_term.reshape(1, 2)
    return x_new, u_new


def candidate_feasible(ctrl: TubeController, cand, x_measured, tol=1e-6):
    """Check a candidate (x-seq, u-seq) against the current tightened sets."""
    x_seq, u_seq = cand
    if ctrl.s_hat is None or ctrl.x_hat is None:
        raise ControllerError("tube not initialized")
    if not ctrl.s_hat.contains(np.asarray(x_measured) - x_seq[0], tol=max(tol, 1e-6)):
        return False
    for k in range(len(u_seq)):
        if not ctrl.x_hat.contains(x_seq[k], tol=tol * 10):
            return False
        if not ctrl.u_hat.contains(u_seq[k], tol=tol * 10):
            return False
    return ctrl.x_f_hat.contains(x_seq[-1] - ctrl.r_target, tol=tol * 10)


def _rollout_cost(ctrl: TubeController, x0, u_seq):
    w = ctrl.weights
    cost, _ = qpsolver.mpc_cost(ctrl.model.a, ctrl.model.b, w.q, w.r, w.p,
                                ctrl.r_target, x0, u_seq)
    return cost


def controller_step(ctrl: TubeController, x_measured, w_hat_set, r_target=None):
    """One control sample: tighten, solve, apply the ancillary feedback.

    Returns the applied input and the step monitor.  An infeasible QP falls
    back to the shifted previous solution (flagged); with no stored solution
    it raises.
    """
    x_measured = np.asarray(x_measured, dtype=float)
    if r_target is not None:
        r_target = np.asarray(r_target, dtype=float)
        if np.abs(r_target - ctrl.r_target).max() > 1e-12:
            ctrl.r_target = r_target
            ctrl.u_r, _ = steady_state_input(ctrl.model, r_target)
    n_hor = ctrl.horizon_n
    w = ctrl.weights

    status = "optimal"
    fallback = False
    try:
        s_hat = update_tube(ctrl, w_hat_set)
        geometry_ok = True
    except EmptySetError:
        geometry_ok = False
        s_hat = ctrl.s_hat

    x_seq = u_seq = None
    tube_ok = False
    if geometry_ok:
        qp = qpsolver.build_condensed_mpc(
            ctrl.model, w.q, w.r, w.p, n_hor,
            (ctrl.x_hat, ctrl.u_hat, ctrl.x_f_hat),
            ctrl.r_target, s_hat, x_measured, cache=ctrl._qp_cache)
        warm = _warm_start(ctrl, s_hat, x_measured)
        sol = qpsolver.solve(qp, tol=ctrl.qp_tol, max_iter=ctrl.qp_max_iter,
                             x0=warm, active0=ctrl._last_active)
        status = sol.status
        ctrl._last_active = sol.active_set if sol.status == "optimal" else None
        if sol.status == "optimal":
            ng = s_hat.n_generators
            sx0, su, sxi = qpsolver.decision_layout(4, n_hor, 2, ng)
            x0 = sol.x_opt[sx0]
            u_flat = sol.x_opt[su]
            u_seq = u_flat.reshape(n_hor, 2)
            x_seq = _roll_states(ctrl, x0, u_seq)
            xi = sol.x_opt[sxi]
            tube_ok = bool(np.abs(xi).max(initial=0.0) <= 1.0 + 1e-6)
    else:
        status = "infeasible"

    if x_seq is None:
        cand = shifted_candidate(ctrl)   # raises without a stored solution
        x_seq, u_seq = cand
        fallback = True
        # a stale candidate anchored far from the state would make the
        # ancillary term kick; re-anchor inside the tube instead
        span = float(np.abs(s_hat.generators).sum(axis=1).max()) if s_hat is not None else 0.0
        err0 = x_measured - x_seq[0]
        if s_hat is not None and np.abs(err0).max() > 2.0 * span + 1e-9:
            rhs = x_measured - s_hat.center
            if ctrl._g_pinv is not None:
                xi = np.clip(ctrl._g_pinv @ rhs, -1.0, 1.0)
            else:
                xi = np.zeros(s_hat.n_generators)
            x0 = x_measured - s_hat.center - s_hat.generators @ xi
            u_seq = np.tile(ctrl.u_r, (n_hor, 1))
            x_seq = _roll_states(ctrl, x0, u_seq)
        tube_ok = s_hat.contains(x_measured - x_seq[0]) if s_hat is not None else False

    cost = _rollout_cost(ctrl, x_seq[0], u_seq)
    stage0 = float((x_seq[0] - ctrl.r_target) @ w.q @ (x_seq[0] - ctrl.r_target)
                   + u_seq[0] @ w.r @ u_seq[0])
    ur_cost = float(ctrl.u_r @ w.r @ ctrl.u_r)
    # the cost-decrease bound only speaks to consecutive solves at the same
    # reference; a moved reference resets the comparison
    same_ref = (ctrl.prev_r is not None
                and np.abs(ctrl.prev_r - ctrl.r_target).max() <= 1e-9)
    decrease_ok = True
    if ctrl.prev_cost is not None and same_ref:
        decrease_ok = cost - ctrl.prev_cost <= ur_cost - ctrl.prev_stage0 + 1e-6
    roa = float((x_seq[0] - ctrl.r_target) @ w.q @ (x_seq[0] - ctrl.r_target)) <= ur_cost

    u_applied = u_seq[0] + ctrl.k_gain @ (x_measured - x_seq[0])

    tube_hw = 0.0
    if s_hat is not None:
        hull = s_hat.interval_hull()
        tube_hw = float(np.abs(hull.half_widths[:2]).max())

    monitor = StepMonitor(qp_status=status, lyapunov_value=cost,
                          lyapunov_decrease_ok=decrease_ok,
                          in_region_of_attraction=roa,
                          tube_contains_state=tube_ok,
                          fallback_used=fallback,
                          stage_cost=stage0,
                          tube_voltage_halfwidth=tube_hw)
    ctrl.last_nominal = (x_seq, u_seq)
    ctrl.prev_cost = cost
    ctrl.prev_stage0 = stage0
    ctrl.prev_r = ctrl.r_target.copy()
    return u_applied, monitor


def _roll_states(ctrl, x0, u_seq):
    a, b = ctrl.model.a, ctrl.model.b
    xs = [np.asarray(x0, dtype=float)]
    for u in u_seq:
        xs.append(a @ xs[-1] + b @ u)
    return np.vstack(xs)


def _warm_start(ctrl: TubeController, s_hat: Zonotope, x_measured):
    """Warm start from the shifted previous solution, or an equilibrium
    rollout on the first step."""
    if ctrl.last_nominal is not None:
        try:
            x_seq, u_seq = shifted_candidate(ctrl)
        except ControllerError:
            return None
    else:
        u_seq = np.tile(ctrl.u_r, (ctrl.horizon_n, 1))
        x_seq = np.tile(ctrl.r_target, (ctrl.horizon_n + 1, 1))
    g = s_hat.generators
    rhs = x_measured - s_hat.center - x_seq[0]
    if g.shape[1]:
        if ctrl._g_pinv is not None and ctrl._g_pinv.shape[0] == g.shape[1]:
            xi = ctrl._g_pinv @ rhs
        else:
            xi, *_ = np.linalg.lstsq(g, rhs, rcond=None)
        xi = np.clip(xi, -1.0, 1.0)
        x0 = x_measured - s_hat.center - g @ xi
    else:
        xi = np.zeros(0)
        x0 = x_seq[0]
    return np.concatenate([x0, u_seq.reshape(-1), xi])
