"""Closed-loop microgrid simulation and power-quality analysis.

Runs the discrete dq-frame plant against one of four controllers (learning
tube MPC, static-tube MPC, plain MPC, PI), synthesizes the load currents,
and records a per-step trace.  The two-DG variant couples the units through
a quasi-static phasor network and droop-derived references.
"""

import logging
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from . import gpregress, tubempc
from .convexsets import Box
from .dqplant import TruePlant, build_model, inverse_park, park
from .gpregress import (DisturbanceSetParams, GpHyperparams, GpModel,
                        build_w_hat, chi2_quantile)
from .tubempc import (build_controller, controller_step, disturbance_set,
                      set_reference)

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    """The closed loop failed hard (controller error, singular network)."""


# ---------------------------------------------------------------------------
# loads

def load_current(load, v_dq, t, v_phase_amp, omega0, last_i=None):
    """Terminal current drawn by one load at voltage ``v_dq`` and time ``t``.

    Returns (i_dq, guarded): ``guarded`` is set when a constant-power load
    hit the voltage floor and the previous current was held.
    """
    if t < load.connect_time:
        return np.zeros(2), False
    if load.kind == "constant_impedance":
        phi = math.acos(load.pf)
        z_mag = 1.5 * v_phase_amp ** 2 / load.s_rated
        z = z_mag * complex(math.cos(phi), math.sin(phi))
        i = complex(v_dq[0], v_dq[1]) / z
        return np.array([i.real, i.imag]), False
    if load.kind == "constant_power":
        v = complex(v_dq[0], v_dq[1])
        floor = 0.1 * v_phase_amp
        if abs(v) < floor:
            held = last_i if last_i is not None else np.zeros(2)
            return np.asarray(held, dtype=float), True
        phi = math.acos(load.pf)
        s = load.s_rated * complex(load.pf, math.sin(phi))
        i = (s / (1.5 * v)).conjugate()
        return np.array([i.real, i.imag]), False
    if load.kind == "harmonic":
        period = 2.0 * math.pi / omega0

        def wave(tau):
            val = np.cos(omega0 * tau)
            for order, mag in load.orders:
                val = val + mag * np.cos(order * omega0 * tau)
            return load.base_current * val

        abc = np.array([wave(t), wave(t - period / 3.0), wave(t - 2.0 * period / 3.0)])
        d, q = park(abc, omega0 * t)
        return np.array([float(d), float(q)]), False
    raise SimulationError(f"unknown load kind {load.kind}")


def total_load_current(loads, v_dq, t, v_phase_amp, omega0, held):
    """Sum of all connected load currents; ``held`` caches constant-power holds."""
    total = np.zeros(2)
    for idx, load in enumerate(loads):
        i, guarded = load_current(load, v_dq, t, v_phase_amp, omega0,
                                  last_i=held.get(idx))
        if load.kind == "constant_power" and not guarded:
            held[idx] = i
        total += i
    return total


def instantaneous_power(v_dq, i_dq):
    """Active/reactive power in the amplitude-invariant convention."""
    p = 1.5 * (v_dq[0] * i_dq[0] + v_dq[1] * i_dq[1])
    q = 1.5 * (v_dq[1] * i_dq[0] - v_dq[0] * i_dq[1])
    return float(p), float(q)


def lowpass(sample, state, cutoff, ts):
    """First-order low-pass step (bilinear transform, unit DC gain).

    ``state`` is (x_prev, y_prev) or None on the first call.
    """
    wt = 2.0 * math.pi * cutoff * ts
    if cutoff >= 0.5 / ts:
        raise SimulationError("low-pass cutoff above the Nyquist rate")
    if state is None:
        state = (sample, sample)
    x_prev, y_prev = state
    y = (wt * (sample + x_prev) + (2.0 - wt) * y_prev) / (2.0 + wt)
    return y, (sample, y)


@dataclass(frozen=True)
class ThdReport:
    """Per-phase distortion summary over an integer number of cycles."""

    thd_percent: tuple
    fundamental_rms: float
    harmonic_table: tuple       # ((order, amplitude), ...) of phase a

    @property
    def worst(self):
        return max(self.thd_percent)


def thd(waveform, f0, ts, window_cycles, max_harmonic=25):
    """Total harmonic distortion of the trailing window of ``waveform``.

    The window must hold an integer number of fundamental cycles so every
    harmonic lands exactly on a DFT bin; anything else raises.
    """
    wf = np.asarray(waveform, dtype=float)
    if wf.ndim == 1:
        wf = wf[:, None]
    samples_per_window = window_cycles / (f0 * ts)
    n_win = int(round(samples_per_window))
    if abs(samples_per_window - n_win) > 1e-6:
        raise SimulationError(
            f"window of {window_cycles} cycles is not an integer sample count "
            f"({samples_per_window:.6f})")
    if wf.shape[0] < n_win:
        raise SimulationError("waveform shorter than the analysis window")
    seg = wf[-n_win:, :]
    spec = np.abs(np.fft.rfft(seg, axis=0)) * 2.0 / n_win
    nyq_order = int((0.5 / ts) // f0)
    top = min(max_harmonic, nyq_order)
    fund_bin = window_cycles
    thds = []
    for ph in range(seg.shape[1]):
        fund = spec[fund_bin, ph]
        if fund <= 0.0:
            thds.append(float("inf"))
            continue
        acc = 0.0
        for h in range(2, top + 1):
            acc += spec[h * fund_bin, ph] ** 2
        thds.append(100.0 * math.sqrt(acc) / fund)
    table = tuple((h, float(spec[h * fund_bin, 0])) for h in range(1, top + 1))
    return ThdReport(thd_percent=tuple(thds),
                     fundamental_rms=float(spec[fund_bin, 0] / math.sqrt(2.0)),
                     harmonic_table=table)


# ---------------------------------------------------------------------------
# trace

@dataclass
class SimTrace:
    """Uniform-grid record of one run, one row per sample period."""

    ts: float
    columns: tuple
    data: np.ndarray
    meta: dict

    def __getitem__(self, name):
        return self.data[:, self.columns.index(name)]

    @property
    def n_steps(self):
        return self.data.shape[0]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(",".join(self.columns) + "\n")
            for row in self.data:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

    def voltage_abc(self, prefix=""):
        theta = self[prefix + "theta"]
        return inverse_park((self[prefix + "vd"], self[prefix + "vq"]), theta).T

    def voltage_thd(self, f0, window_cycles, prefix=""):
        return thd(self.voltage_abc(prefix), f0, self.ts, window_cycles)

    def monitor_counts(self, prefix=""):
        out = {}
        for name, col in (("feasibility", "qp_ok"), ("lyapunov", "lyap_ok"),
                          ("tube", "contain_ok")):
            key = prefix + col
            if key in self.columns:
                out[name] = int(np.sum(self[key] < 0.5))
            else:
                out[name] = 0
        return out


# ---------------------------------------------------------------------------
# controllers

class PiController:
    """Decoupled PI voltage loops with inductor-drop feedforward.

    The default gains come from an eigenvalue scan of the delayed loop on
    this filter (the resonance sits near half the Nyquist rate, which caps
    the usable bandwidth well below the filter corner).  The integrator is
    clamped by back-calculation when the command saturates.
    """

    def __init__(self, params, u_limit, kp=0.25, ki=1000.0):
        self.params = params
        self.u_limit = np.asarray(u_limit, dtype=float)
        self.kp = float(kp)
        self.ki = float(ki)
        self.acc = np.zeros(2)

    def step(self, x_meas, v_ref):
        p = self.params
        err = np.asarray(v_ref, dtype=float) - x_meas[:2]
        ff = np.array([
            v_ref[0] + p.r_f * x_meas[2] - p.omega0 * p.l_f * x_meas[3],
            v_ref[1] + p.r_f * x_meas[3] + p.omega0 * p.l_f * x_meas[2],
        ])
        u_raw = ff + self.kp * err + self.acc
        u = np.clip(u_raw, -self.u_limit, self.u_limit)
        # back-calculation anti-windup
        self.acc += self.ki * p.ts * err + 0.5 * (u - u_raw)
        return u


def _controller_for(scenario, kind, model, x_poly, u_poly):
    q = np.diag(scenario.q_diag)
    r = np.diag(scenario.r_diag)
    return build_controller(model, q, r, scenario.horizon, x_poly, u_poly,
                            scenario.v_ref_dq(), mrpi_eps=scenario.mrpi_eps,
                            mrpi_term_cap=scenario.mrpi_term_cap,
                            tube_inflation=scenario.tube_inflation)


def _resolve_l2(scenario):
    """Use the configured model-error bound, or calibrate one for the run.

    Calibration samples the drift envelope over a realistic operating box
    (voltages near nominal, currents up to the worst-case load bound).
    """
    if scenario.l2_inf_bound > 0.0:
        return scenario.l2_inf_bound
    from .dqplant import calibrate_w2_bound
    v_op = 1.25 * scenario.v_phase_amp
    i_op = max(scenario.w1_bound, 1.0)
    u_op = 1.25 * scenario.v_phase_amp
    return calibrate_w2_bound(scenario.filter_params(),
                              scenario.uncertainty_bounds(),
                              np.array([v_op, v_op, i_op, i_op]),
                              np.array([u_op, u_op]), seed=12345)


class _GpLane:
    """GP bookkeeping for one DG in a learning run.

    Tracks a running validation error of its own one-step predictions; the
    learned mean is only trusted as a delay bridge while that error is
    small, so transients (load steps) fall back to the raw measurement.
    """

    def __init__(self, scenario, rng, l2_bound):
        hp = GpHyperparams(h=scenario.gp_h, lam=scenario.gp_lambda,
                           sigma_n2=scenario.gp_sigma_n2)
        self.model = GpModel(hp, window_cap=scenario.gp_window)
        self.scenario = scenario
        self.l2_bound = l2_bound
        self.quantile = chi2_quantile(scenario.confidence, dof=2)
        self.ema_err = None
        self._pending = None        # (time, mu) of the last issued prediction
        noise = math.sqrt(scenario.gp_sigma_n2)
        ts = scenario.ts
        for j in range(scenario.gp_warmup):
            t_j = -(scenario.gp_warmup - j) * ts
            self.model.observe(t_j, rng.normal(0.0, noise, size=2))
        self.fitted = not scenario.gp_fit

    def observe(self, t, i_meas):
        if self._pending is not None and abs(self._pending[0] - t) <= 0.51 * self.scenario.ts:
            err = float(np.linalg.norm(i_meas - self._pending[1]))
            self.ema_err = err if self.ema_err is None else 0.8 * self.ema_err + 0.2 * err
        self.model.observe(t, i_meas)

    def maybe_fit(self):
        if self.fitted or len(self.model.dataset) < max(32, 8):
            return
        spread = float(np.std(self.model.dataset.values))
        grid = [(h, lam)
                for h in np.geomspace(max(spread, 1.0) * 0.5, max(spread, 1.0) * 4.0, 4)
                for lam in np.geomspace(5e-4, 1e-2, 5)]
        self.model.hp = gpregress.fit_hyperparams(
            self.model.dataset, grid, sigma_n2=self.scenario.gp_sigma_n2)
        self.fitted = True

    def set_params(self):
        sc = self.scenario
        delta = sc.delta_mu if sc.delta_mu_mode == "fixed" \
            else self.model.dataset.delta_mu_hat
        return DisturbanceSetParams(confidence=sc.confidence,
                                    chi2_quantile=self.quantile,
                                    delta_mu=delta, l2_bound=self.l2_bound,
                                    drift_mode=sc.drift_mode)

    def disturbance_sets(self, t_predict):
        pred = self.model.predict_at(t_predict)
        self._pending = (t_predict, pred.mu_star.copy())
        w1_ell, w2_box = build_w_hat(pred, self.set_params())
        w1_box = w1_ell.outer_box()
        bound = self.scenario.w1_bound
        lo = np.maximum(w1_box.lower, -bound)
        hi = np.minimum(w1_box.upper, bound)
        if np.any(lo > hi):
            log.warning("learned current set escapes the worst-case bound; using it raw")
        else:
            w1_box = Box(lo, hi)
        return pred, w1_box, w2_box


def _delay_predict(model, x_meas, u_pending, i_now):
    """State one sample ahead, compensating the computation delay."""
    return model.a @ x_meas + model.b @ u_pending + model.e @ i_now


_SINGLE_COLUMNS = (
    "t", "theta", "vd", "vq", "ifd", "ifq",
    "nom_vd", "nom_vq", "nom_ifd", "nom_ifq",
    "u_cmd_d", "u_cmd_q", "u_app_d", "u_app_q",
    "iload_d", "iload_q", "gp_mu_d", "gp_mu_q", "gp_var",
    "tube_v_hw", "qp_ok", "fallback", "lyap_ok", "roa",
    "tube_ok", "w_in_hat", "contain_ok", "p_inst", "q_inst", "u_clamped",
)


def run_single_dg(scenario, controller_kind="lrmpc") -> SimTrace:
    """Fixed-step closed loop of one DG against the configured loads.

    ``controller_kind``: lrmpc (GP-shaped tube), rmpc (static worst-case
    tube), mpc (no tube), pi (decoupled PI baseline).
    """
    if controller_kind not in ("lrmpc", "rmpc", "mpc", "pi"):
        raise SimulationError(f"unknown controller kind '{controller_kind}'")
    seeds = np.random.SeedSequence(scenario.seed).spawn(4)
    rng_noise = np.random.default_rng(seeds[0])
    rng_gp = np.random.default_rng(seeds[1])
    rng_warmup = np.random.default_rng(seeds[3])
    params = scenario.filter_params()
    model = build_model(params)
    x_poly, u_poly = scenario.constraint_polytopes()
    v_ref = scenario.v_ref_dq()
    l2_bound = _resolve_l2(scenario)

    ctrl = pi_ctrl = None
    if controller_kind == "pi":
        pi_ctrl = PiController(params, scenario.input_limits(),
                               kp=scenario.pi_kp, ki=scenario.pi_ki)
    else:
        ctrl = _controller_for(scenario, controller_kind, model, x_poly, u_poly)

    w_static = None
    if controller_kind == "rmpc":
        w_static = disturbance_set(model,
                                   Box.symmetric(np.full(2, scenario.rmpc_w1_box)),
                                   Box.symmetric(np.full(4, l2_bound)))
    elif controller_kind == "mpc":
        w_static = disturbance_set(model, Box.symmetric(np.zeros(2)),
                                   Box.symmetric(np.zeros(4)))

    lane = _GpLane(scenario, rng_warmup, l2_bound) if controller_kind == "lrmpc" else None

    plant = TruePlant(params, scenario.uncertainty_bounds(), seed=seeds[2],
                      drift_period=scenario.drift_period,
                      substeps=scenario.plant_substeps)
    if ctrl is not None:
        x_init = ctrl.r_target
        u_idle = ctrl.u_r
    else:
        x_init, u_idle = tubempc.compute_reference(v_ref, model)
    state = plant.initial_state(np.asarray(x_init, dtype=float))

    n_steps = scenario.n_steps
    data = np.zeros((n_steps, len(_SINGLE_COLUMNS)))
    noise_sd = math.sqrt(scenario.noise_var)
    held = {}
    u_buf = np.asarray(u_idle, dtype=float).copy()
    i_prev_meas = np.zeros(2)
    t_prev = -scenario.ts
    u_limits = scenario.input_limits()
    trim = np.zeros(2)
    trim_cap = 0.3 * v_ref[0]
    start = time.perf_counter()

    def load_fn(v_dq, tau):
        return total_load_current(scenario.loads, v_dq, tau,
                                  scenario.v_phase_amp, scenario.omega0, held)

    delay = scenario.input_delay
    for k in range(n_steps):
        t = k * scenario.ts
        theta = scenario.omega0 * t
        x_meas = state.x + rng_noise.normal(0.0, noise_sd, size=4)
        i_now = load_fn(state.x[:2], t)
        i_now_meas = i_now + rng_gp.normal(0.0, noise_sd, size=2)
        if ctrl is not None and scenario.vref_trim:
            # slow outer loop trimming the static tube offset of the real voltage
            trim += scenario.trim_gain * scenario.ts * (v_ref - x_meas[:2])
            trim = np.clip(trim, -trim_cap, trim_cap)
            set_reference(ctrl, v_ref + trim)
        if lane is not None:
            if delay:
                lane.observe(t, i_now_meas)
            elif k > 0:
                lane.observe(t_prev, i_prev_meas)

        pred = None
        mon = None
        try:
            if controller_kind == "pi":
                u_cmd = pi_ctrl.step(x_meas, v_ref)
            else:
                # under the one-sample delay the command acts from t+ts, so
                # decide on the predicted state; the learning variant bridges
                # the delay with the GP mean instead of the stale sample
                t_act = t + scenario.ts if delay else t
                if lane is not None:
                    lane.maybe_fit()
                    pred, w1_box, w2_box = lane.disturbance_sets(t_act)
                    w_hat = disturbance_set(model, w1_box, w2_box)
                else:
                    w_hat = w_static
                # the disturbance-blind baseline also bridges the delay
                # blind, which is what "no disturbance model" means
                i_ff = np.zeros(2) if controller_kind == "mpc" else i_now_meas
                x_dec = _delay_predict(model, x_meas, u_buf, i_ff) \
                    if delay else x_meas
                u_cmd, mon = controller_step(ctrl, x_dec, w_hat)
        except Exception as exc:
            raise SimulationError(f"controller failed at step {k}: {exc}") from exc

        u_apply = u_buf if delay else u_cmd
        if delay:
            u_buf = u_cmd
        clamped = float(np.any(np.abs(u_apply) > u_limits + 1e-9))
        u_apply = np.clip(u_apply, -u_limits, u_limits)

        next_state, i_load, w_total = plant.step_with_load(
            state, u_apply, load_fn, t, (k + 1) * scenario.ts)

        # realized-disturbance and next-step containment diagnostics
        w_in_hat = 1.0
        contain_ok = 1.0
        if ctrl is not None and mon is not None:
            if ctrl.w_hull is not None:
                w_in_hat = float(ctrl.w_hull.contains(w_total, tol=1e-6))
            if scenario.containment_check != "none" and ctrl.s_hat is not None:
                # with the delay the plan starts at the predicted next state
                ref_nom = ctrl.last_nominal[0][0] if delay else ctrl.last_nominal[0][1]
                err_next = next_state.x - ref_nom
                if scenario.containment_check == "hull":
                    contain_ok = float(ctrl.s_hat.interval_hull().contains(err_next, tol=1e-7))
                else:
                    contain_ok = float(ctrl.s_hat.contains(err_next))

        p_inst, q_inst = instantaneous_power(state.x[:2], i_load)
        nom0 = ctrl.last_nominal[0][0] if ctrl is not None else np.full(4, np.nan)
        row = [
            t, theta, state.x[0], state.x[1], state.x[2], state.x[3],
            nom0[0], nom0[1], nom0[2], nom0[3],
            u_cmd[0], u_cmd[1], u_apply[0], u_apply[1],
            i_load[0], i_load[1],
            pred.mu_star[0] if pred is not None else 0.0,
            pred.mu_star[1] if pred is not None else 0.0,
            pred.sigma2_star[0, 0] if pred is not None else 0.0,
            mon.tube_voltage_halfwidth if mon is not None else 0.0,
            float(mon.qp_status == "optimal") if mon is not None else 1.0,
            float(mon.fallback_used) if mon is not None else 0.0,
            float(mon.lyapunov_decrease_ok) if mon is not None else 1.0,
            float(mon.in_region_of_attraction) if mon is not None else 1.0,
            float(mon.tube_contains_state) if mon is not None else 1.0,
            w_in_hat, contain_ok, p_inst, q_inst, clamped,
        ]
        data[k] = row
        i_prev_meas = i_now_meas
        t_prev = t
        state = next_state

    wall = time.perf_counter() - start
    meta = {"controller": controller_kind, "seed": scenario.seed,
            "wall_per_step": wall / max(n_steps, 1), "l2_bound": l2_bound,
            "f0": scenario.f0}
    return SimTrace(ts=scenario.ts, columns=_SINGLE_COLUMNS, data=data, meta=meta)


# ---------------------------------------------------------------------------
# two-DG power sharing

_ROT_J = np.array([[0.0, -1.0], [1.0, 0.0]])


def _rot(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


class _TwoDgCircuit:
    """Exactly sampled model of two DGs feeding a common bus through R-L lines.

    State: [x1 (4, DG1 frame), x2 (4, DG2 frame), iL1, iL2 (2 each, common
    frame), vb (2, common frame)].  The line currents and a small stray bus
    capacitance are genuine states: at the referred feeder impedance an
    algebraic (quasi-static) coupling makes the sampled loop unstable, so
    the coupling has to be integrated, not solved.

    Each DG's frame angle and parameter drift are held over one sample
    period, which keeps the step exact (matrix exponential) and cacheable.
    """

    def __init__(self, scenario, plants, z_line, c_bus=200e-6, g_bus=0.01):
        self.sc = scenario
        self.plants = plants
        self.z = z_line
        self.l_line = z_line.imag / scenario.omega0
        self.r_line = z_line.real
        self.c_bus = c_bus
        self.g_bus = g_bus
        self._cache = {}

    def _maps(self, deltas_params, angles, y_load):
        key = (tuple(np.round(np.concatenate(deltas_params), 12)),
               tuple(np.round(angles, 4)), round(y_load.real, 9),
               round(y_load.imag, 9))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        from .dqplant import continuous_matrices, FilterParams
        sc = self.sc
        w0 = sc.omega0
        a = np.zeros((14, 14))
        b = np.zeros((14, 6))   # inputs: u1, u2, bus current injection
        for i in range(2):
            par = self.plants[i].params
            dr, dc, dl = deltas_params[i]
            pert = FilterParams(r_f=par.r_f + dr, l_f=par.l_f + dl,
                                c_f=par.c_f + dc, omega0=par.omega0, ts=par.ts)
            ac, bc, ec, _ = continuous_matrices(pert)
            sx = slice(4 * i, 4 * i + 4)
            sl = slice(8 + 2 * i, 10 + 2 * i)
            a[sx, sx] = ac
            b[sx, 2 * i:2 * i + 2] = bc
            # terminal current seen by the filter, rotated into the DG frame
            a[sx, sl] = ec @ _rot(-angles[i])
            # line: L di/dt = v_dg - vb - R i, minus the rotating-frame term
            a[sl, sx.start:sx.start + 2] = _rot(angles[i]) / self.l_line
            a[sl, sl] = -(self.r_line / self.l_line) * np.eye(2) - w0 * _ROT_J
            a[sl, 12:14] = -np.eye(2) / self.l_line
            a[12:14, sl] = np.eye(2) / self.c_bus
        yl = np.array([[y_load.real + self.g_bus, -y_load.imag],
                       [y_load.imag, y_load.real + self.g_bus]])
        a[12:14, 12:14] = -yl / self.c_bus - w0 * _ROT_J
        b[12:14, 4:6] = -np.eye(2) / self.c_bus
        aug = np.zeros((20, 20))
        aug[:14, :14] = a * self.sc.ts
        aug[:14, 14:] = b * self.sc.ts
        phi = expm(aug)
        maps = (phi[:14, :14], phi[:14, 14:])
        if len(self._cache) > 256:
            self._cache.clear()
        self._cache[key] = maps
        return maps

    def step(self, state14, u1, u2, i_inj, deltas_params, angles, y_load):
        ad, bd = self._maps(deltas_params, angles, y_load)
        u = np.concatenate([u1, u2, i_inj])
        out = ad @ state14 + bd @ u
        if not np.all(np.isfinite(out)):
            raise SimulationError("network integration diverged")
        return out


def _bus_admittance_and_injection(loads, vb, t, v_phase_amp, omega0, held):
    """Split the connected loads into a linear admittance and a current source."""
    y_load = 0.0 + 0.0j
    inj = np.zeros(2)
    floor = 0.1 * v_phase_amp
    for idx, load in enumerate(loads):
        if t < load.connect_time:
            continue
        if load.kind == "constant_impedance":
            phi = math.acos(load.pf)
            z_mag = 1.5 * v_phase_amp ** 2 / load.s_rated
            y_load += 1.0 / (z_mag * complex(math.cos(phi), math.sin(phi)))
        elif load.kind == "constant_power":
            v = complex(vb[0], vb[1])
            if abs(v) < floor:
                cur = held.get(("pcc", idx), 0.0 + 0.0j)
            else:
                phi = math.acos(load.pf)
                s = load.s_rated * complex(load.pf, math.sin(phi))
                cur = (s / (1.5 * v)).conjugate()
                held[("pcc", idx)] = cur
            inj += np.array([cur.real, cur.imag])
        else:
            i_dq, _ = load_current(load, vb, t, v_phase_amp, omega0)
            inj += i_dq
    return y_load, inj


def _droop_powerflow(scenario, z_line, v_n, t_eval, max_iter=40000):
    """Droop equilibrium of the two-unit network at the loads active at
    ``t_eval``: returns (deltas, vrefs, line currents, bus voltage, P, Q).

    Integrates the quasi-static droop map coarsely; used to initialize the
    closed-loop run at its operating point so the slow synchronization
    mode does not dominate the simulated horizon.
    """
    droop = scenario.droop
    deltas = np.array([0.0, -1e-4])
    vrefs = np.array([v_n, v_n])
    vl = complex(v_n, 0.0)
    held = {}
    dt = 2e-3
    p = np.zeros(2)
    q = np.zeros(2)
    for it in range(max_iter):
        v_units = [vrefs[i] * np.exp(1j * deltas[i]) for i in range(2)]
        y_load, inj = _bus_admittance_and_injection(
            scenario.loads, np.array([vl.real, vl.imag]), t_eval,
            scenario.v_phase_amp, scenario.omega0, held)
        y_sum = sum(1.0 / z for z in z_line)
        for _ in range(80):
            vl_new = (sum(v / z for v, z in zip(v_units, z_line))
                      - complex(inj[0], inj[1])) / (y_sum + y_load)
            if abs(vl_new - vl) < 1e-10 * max(abs(vl), 1.0):
                vl = vl_new
                break
            vl = 0.6 * vl + 0.4 * vl_new
            y_load, inj = _bus_admittance_and_injection(
                scenario.loads, np.array([vl.real, vl.imag]), t_eval,
                scenario.v_phase_amp, scenario.omega0, held)
        i_lines = [(v_units[i] - vl) / z_line[i] for i in range(2)]
        for i in range(2):
            s_i = 1.5 * v_units[i] * np.conj(i_lines[i])
            p[i], q[i] = s_i.real, s_i.imag
        freqs = [droop.f_n - droop.m[i] * p[i] / 1e6 for i in range(2)]
        vref_new = np.array([v_n - droop.n[i] * q[i] / 1e6 for i in range(2)])
        d_rel = 2.0 * math.pi * (freqs[0] - freqs[1]) * dt
        deltas = np.array([deltas[0] + 0.5 * d_rel, deltas[1] - 0.5 * d_rel])
        moved = abs(d_rel) + np.abs(vref_new - vrefs).max() * 1e-3
        vrefs = 0.7 * vrefs + 0.3 * vref_new
        if it > 10 and moved < 1e-10:
            break
    return deltas, vrefs, i_lines, vl, p, q


def _two_dg_columns():
    cols = ["t", "pcc_vre", "pcc_vim"]
    for i in (1, 2):
        cols += [f"dg{i}_{c}" for c in
                 ("theta", "vd", "vq", "ifd", "ifq", "iload_d", "iload_q",
                  "u_app_d", "u_app_q", "p_raw", "q_raw", "p_filt", "q_filt",
                  "freq", "vref_d", "delta", "qp_ok", "contain_ok", "lyap_ok")]
    return tuple(cols)


def run_two_dg(scenario) -> SimTrace:
    """Two LRMPC-controlled DGs sharing the PCC loads through droop control."""
    seeds = np.random.SeedSequence(scenario.seed).spawn(8)
    params = scenario.filter_params()
    model = build_model(params)
    x_poly, u_poly = scenario.constraint_polytopes()
    l2_bound = _resolve_l2(scenario)
    droop = scenario.droop
    v_n = droop.v_n if droop.v_n > 0.0 else scenario.v_ref_dq()[0]
    z_line = droop.line_impedance_lv(scenario.v_base, scenario.s_base)

    ctrls, lanes, plants, bufs = [], [], [], []
    for i in range(2):
        ctrl = _controller_for(scenario, "lrmpc", model, x_poly, u_poly)
        lane = _GpLane(scenario, np.random.default_rng(seeds[2 + i]), l2_bound)
        plant = TruePlant(params, scenario.uncertainty_bounds(),
                          seed=seeds[4 + i], drift_period=scenario.drift_period)
        ctrls.append(ctrl)
        lanes.append(lane)
        plants.append(plant)
        bufs.append(ctrl.u_r.copy())
    rng_noise = np.random.default_rng(seeds[0])
    circuit = _TwoDgCircuit(scenario, plants, z_line)

    # start at the droop equilibrium of the initially connected loads so
    # the slow synchronization mode starts settled
    deltas0, vrefs0, i_lines0, vl0, p0, q0 = _droop_powerflow(
        scenario, [z_line, z_line], v_n, 0.0)
    state14 = np.zeros(14)
    for i in range(2):
        set_reference(ctrls[i], np.array([vrefs0[i], 0.0]))
        i_dg = i_lines0[i] * np.exp(-1j * deltas0[i])
        x_eq, u_eq = tubempc.compute_reference(
            np.array([vrefs0[i], 0.0]), model,
            expected_load=np.array([i_dg.real, i_dg.imag]))
        state14[4 * i:4 * i + 4] = x_eq
        state14[8 + 2 * i:10 + 2 * i] = [i_lines0[i].real, i_lines0[i].imag]
        bufs[i] = u_eq.copy()
    state14[12:14] = [vl0.real, vl0.imag]

    n_steps = scenario.n_steps
    cols = _two_dg_columns()
    data = np.zeros((n_steps, len(cols)))
    noise_sd = math.sqrt(scenario.noise_var)
    held = {}
    deltas = [float(deltas0[0]), float(deltas0[1])]
    lpf_p = [(p0[0], p0[0]), (p0[1], p0[1])]
    lpf_q = [(q0[0], q0[0]), (q0[1], q0[1])]
    freqs = [droop.f_n - droop.m[i] * p0[i] / 1e6 for i in range(2)]
    vrefs = [float(vrefs0[0]), float(vrefs0[1])]
    trims = [np.zeros(2), np.zeros(2)]
    i_prev = [np.zeros(2), np.zeros(2)]
    lpf_ff = [None, None]
    t_prev = -scenario.ts
    u_limits = scenario.input_limits()
    delay = scenario.input_delay

    for k in range(n_steps):
        t = k * scenario.ts
        vb = state14[12:14]
        row = [t, vb[0], vb[1]]
        u_applies = []
        mons = []
        i_now = []
        pq_raw = []
        pq_filt = []
        xs = [state14[0:4], state14[4:8]]
        for i in range(2):
            ctrl, lane = ctrls[i], lanes[i]
            i_dq_c = complex(*state14[8 + 2 * i:10 + 2 * i]) * np.exp(-1j * deltas[i])
            i_dq = np.array([i_dq_c.real, i_dq_c.imag])
            i_now.append(i_dq)

            p_raw, q_raw = instantaneous_power(xs[i][:2], i_dq)
            p_f, lpf_p[i] = lowpass(p_raw, lpf_p[i], droop.lpf_cutoff, scenario.ts)
            q_f, lpf_q[i] = lowpass(q_raw, lpf_q[i], droop.lpf_cutoff, scenario.ts)
            pq_raw.append((p_raw, q_raw))
            pq_filt.append((p_f, q_f))
            freqs[i] = droop.f_n - droop.m[i] * p_f / 1e6
            vrefs[i] = v_n - droop.n[i] * q_f / 1e6

            x_meas = xs[i] + rng_noise.normal(0.0, noise_sd, size=4)
            i_meas = i_dq + rng_noise.normal(0.0, noise_sd, size=2)
            # virtual output impedance softens the unit against the stiff
            # tie; per-unit restoration integrators would fight, so the
            # trim loop stays out of parallel operation
            v_target = np.array([
                vrefs[i] - droop.virtual_r * i_meas[0] + droop.virtual_x * i_meas[1],
                -droop.virtual_r * i_meas[1] - droop.virtual_x * i_meas[0]])
            set_reference(ctrl, v_target)
            if delay:
                lane.observe(t, i_meas)
            elif k > 0:
                lane.observe(t_prev, i_prev[i])
            t_act = t + scenario.ts if delay else t
            lane.maybe_fit()
            pred, w1_box, w2_box = lane.disturbance_sets(t_act)
            w_hat = disturbance_set(model, w1_box, w2_box)
            # the tie current reacts to the terminal voltage within a
            # sample, so the raw measurement cannot be fed forward: the
            # low-pass (or zero cutoff: no feedforward at all) keeps the
            # delay bridge out of that fast loop
            i_ff = np.zeros(2)
            if droop.ff_current_cutoff > 0.0:
                for ch in range(2):
                    val, st = lowpass(i_meas[ch],
                                      None if lpf_ff[i] is None else lpf_ff[i][ch],
                                      droop.ff_current_cutoff, scenario.ts)
                    i_ff[ch] = val
                    if lpf_ff[i] is None:
                        lpf_ff[i] = [None, None]
                    lpf_ff[i][ch] = st
            x_dec = _delay_predict(model, x_meas, bufs[i], i_ff) if delay else x_meas
            try:
                u_cmd, mon = controller_step(ctrl, x_dec, w_hat)
            except Exception as exc:
                raise SimulationError(f"DG{i + 1} controller failed at step {k}: {exc}") from exc
            mons.append(mon)

            u_apply = bufs[i] if delay else u_cmd
            if delay:
                bufs[i] = u_cmd
            u_applies.append(np.clip(u_apply, -u_limits, u_limits))

        y_load, i_inj = _bus_admittance_and_injection(
            scenario.loads, vb, t, scenario.v_phase_amp, scenario.omega0, held)
        dp = [np.asarray(plants[i].deltas_at(t)) for i in range(2)]
        state14 = circuit.step(state14, u_applies[0], u_applies[1], i_inj,
                               dp, deltas, y_load)

        for i in range(2):
            ctrl, mon = ctrls[i], mons[i]
            contain_ok = 1.0
            if scenario.containment_check != "none" and ctrl.s_hat is not None:
                ref_nom = ctrl.last_nominal[0][0] if delay else ctrl.last_nominal[0][1]
                err_next = state14[4 * i:4 * i + 4] - ref_nom
                if scenario.containment_check == "hull":
                    contain_ok = float(ctrl.s_hat.interval_hull().contains(err_next, tol=1e-7))
                else:
                    contain_ok = float(ctrl.s_hat.contains(err_next))
            deltas[i] += 2.0 * math.pi * (freqs[i] - droop.f_n) * scenario.ts
            theta_i = scenario.omega0 * t + deltas[i]
            row += [theta_i, xs[i][0], xs[i][1], xs[i][2], xs[i][3],
                    i_now[i][0], i_now[i][1], u_applies[i][0], u_applies[i][1],
                    pq_raw[i][0], pq_raw[i][1], pq_filt[i][0], pq_filt[i][1],
                    freqs[i], vrefs[i], deltas[i],
                    float(mon.qp_status == "optimal"),
                    contain_ok,
                    float(mon.lyapunov_decrease_ok)]
            i_prev[i] = i_now[i]
        t_prev = t
        data[k] = row

    meta = {"controller": "lrmpc", "seed": scenario.seed, "two_dg": True,
            "l2_bound": l2_bound, "f0": scenario.f0,
            "line_r": z_line.real, "line_x": z_line.imag,
            "g_bus": circuit.g_bus}
    return SimTrace(ts=scenario.ts, columns=cols, data=data, meta=meta)


def power_sharing_summary(trace: SimTrace, tail_fraction=0.2):
    """Steady-state power split and balance bookkeeping of a two-DG run."""
    n0 = int(trace.n_steps * (1.0 - tail_fraction))
    p1 = float(np.mean(trace["dg1_p_filt"][n0:]))
    p2 = float(np.mean(trace["dg2_p_filt"][n0:]))
    line_r = trace.meta["line_r"]
    loss = 0.0
    p_delivered = 0.0
    vre = trace["pcc_vre"][n0:]
    vim = trace["pcc_vim"][n0:]
    for i in (1, 2):
        ild = trace[f"dg{i}_iload_d"][n0:]
        ilq = trace[f"dg{i}_iload_q"][n0:]
        loss += float(np.mean(1.5 * (ild ** 2 + ilq ** 2) * line_r))
        delta = trace[f"dg{i}_delta"][n0:]
        i_c = (ild + 1j * ilq) * np.exp(1j * delta)
        p_delivered += float(np.mean(1.5 * ((vre + 1j * vim) * np.conj(i_c)).real))
    g_bus = trace.meta.get("g_bus", 0.0)
    bus_loss = float(np.mean(1.5 * g_bus * (vre ** 2 + vim ** 2)))
    return {"p1": p1, "p2": p2, "ratio": p1 / p2 if p2 else float("inf"),
            "line_loss": loss, "p_load": p_delivered - bus_loss,
            "bus_loss": bus_loss, "supplied": p1 + p2}
