"""Discrete dq-frame model of an inverter-fed DG unit behind an LC filter.

The continuous small-signal model couples the filter capacitor voltage and
inductor current in a frame rotating at the nominal grid frequency.  The
load current enters as a measured additive disturbance and slow drift of
the filter parameters as a bounded multiplicative model error.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm


class ModelError(ValueError):
    """Invalid filter parameters or non-finite model data."""


@dataclass(frozen=True)
class FilterParams:
    """LC output filter and timing constants of one DG unit.

    Units: ohm, henry, farad, rad/s, second.
    """

    r_f: float = 1.5e-3
    l_f: float = 100e-3
    c_f: float = 100e-6
    omega0: float = 2.0 * math.pi * 60.0
    ts: float = 250e-6

    def __post_init__(self):
        vals = (self.r_f, self.l_f, self.c_f, self.omega0, self.ts)
        if not all(math.isfinite(v) for v in vals):
            raise ModelError("filter parameters must be finite")
        if self.r_f < 0.0:
            raise ModelError("r_f must be nonnegative")
        if self.l_f <= 0.0:
            raise ModelError("l_f must be positive")
        if self.c_f <= 0.0:
            raise ModelError("c_f must be positive")
        if self.omega0 <= 0.0:
            raise ModelError("omega0 must be positive")
        if self.ts <= 0.0:
            raise ModelError("ts must be positive")


@dataclass(frozen=True)
class UncertaintyBounds:
    """Admissible relative drift of the filter parameters and the resulting
    per-component bound on the model-error term."""

    delta_r_frac: float = 0.1
    delta_c_frac: float = 0.1
    delta_l_frac: float = 0.2
    l2_inf_bound: float = 0.0

    def __post_init__(self):
        for f in (self.delta_r_frac, self.delta_c_frac, self.delta_l_frac):
            if not 0.0 <= f < 1.0:
                raise ModelError("uncertainty fractions must lie in [0, 1)")
        if self.l2_inf_bound < 0.0:
            raise ModelError("l2_inf_bound must be nonnegative")


@dataclass(frozen=True)
class StateVec4:
    """State sample (Vd, Vq, Ifd, Ifq) in volt / ampere."""

    vd: float
    vq: float
    ifd: float
    ifq: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.vd, self.vq, self.ifd, self.ifq)):
            raise ModelError("state components must be finite")

    def as_array(self):
        return np.array([self.vd, self.vq, self.ifd, self.ifq])

    @staticmethod
    def from_array(x):
        x = np.asarray(x, dtype=float)
        return StateVec4(float(x[0]), float(x[1]), float(x[2]), float(x[3]))


@dataclass(frozen=True)
class DiscreteModel:
    """Sampled state-space model x+ = a x + b u + e i_load, y = c x."""

    a: np.ndarray
    b: np.ndarray
    e: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        e = np.asarray(self.e, dtype=float)
        c = np.asarray(self.c, dtype=float)
        if a.shape != (4, 4) or b.shape != (4, 2) or e.shape != (4, 2) or c.shape != (2, 4):
            raise ModelError("model matrices must be 4x4, 4x2, 4x2, 2x4")
        for m in (a, b, e, c):
            if not np.all(np.isfinite(m)):
                raise ModelError("model matrices must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "e", e)
        object.__setattr__(self, "c", c)


def controllability_rank(a, b):
    n = a.shape[0]
    blocks = [b]
    for _ in range(n - 1):
        blocks.append(a @ blocks[-1])
    return int(np.linalg.matrix_rank(np.hstack(blocks)))


def continuous_matrices(p: FilterParams):
    """Continuous dq-frame matrices (Ac, Bc, Ec, C) of the LC filter stage.

    The first two states are the capacitor voltages, the last two the
    inductor currents; the output selects the voltages.
    """
    w0 = p.omega0
    inv_c = 1.0 / p.c_f
    inv_l = 1.0 / p.l_f
    rl = p.r_f / p.l_f
    ac = np.array([
        [0.0, w0, inv_c, 0.0],
        [-w0, 0.0, 0.0, inv_c],
        [-inv_l, 0.0, -rl, w0],
        [0.0, -inv_l, -w0, -rl],
    ])
    bc = np.array([
        [0.0, 0.0],
        [0.0, 0.0],
        [inv_l, 0.0],
        [0.0, inv_l],
    ])
    ec = np.array([
        [-inv_c, 0.0],
        [0.0, -inv_c],
        [0.0, 0.0],
        [0.0, 0.0],
    ])
    c = np.array([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
    ])
    return ac, bc, ec, c


def discretize_zoh(ac, bc, ec, ts):
    """Exact zero-order-hold discretization via the augmented matrix exponential.

    Stacks [Ac, [Bc Ec]; 0, 0], exponentiates over one sample period and
    reads A from the top-left block and [B E] from the top-right block.
    """
    ac = np.asarray(ac, dtype=float)
    bc = np.asarray(bc, dtype=float)
    ec = np.asarray(ec, dtype=float)
    if ts <= 0.0:
        raise ModelError("sample period must be positive")
    n = ac.shape[0]
    inp = np.hstack([bc, ec])
    m = inp.shape[1]
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = ac * ts
    aug[:n, n:] = inp * ts
    phi = expm(aug)
    if not np.all(np.isfinite(phi)):
        raise ModelError("non-finite entries in discretized model")
    a = phi[:n, :n]
    bd = phi[:n, n:n + bc.shape[1]]
    ed = phi[:n, n + bc.shape[1]:]
    c = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    return DiscreteModel(a=a, b=bd, e=ed, c=c)


def build_model(p: FilterParams) -> DiscreteModel:
    """Discrete nominal model for the given filter parameters; the pair
    (A, B) must come out controllable or the tube design cannot proceed."""
    ac, bc, ec, _ = continuous_matrices(p)
    model = discretize_zoh(ac, bc, ec, p.ts)
    if controllability_rank(model.a, model.b) != 4:
        raise ModelError("(a, b) pair is not controllable")
    return model


def ramp_disturbance_kernel(p: FilterParams):
    """Sensitivity of the sampled state to a within-step disturbance ramp.

    Returns M1 = integral of exp(Ac (ts - tau)) Ec (tau/ts) dtau, so that a
    current ramping from i0 to i1 over one period contributes
    E i0 + M1 (i1 - i0) to the next sample.  At this sampling-to-resonance
    ratio M1 differs strongly from E/2, so phase matters.
    """
    ac, _, ec, _ = continuous_matrices(p)
    aug = np.zeros((8, 8))
    aug[:4, :4] = ac * p.ts
    aug[:4, 4:6] = ec * p.ts
    aug[4:6, 6:8] = np.eye(2)
    return expm(aug)[:4, 6:8]


def apply_uncertainty(p: FilterParams, deltas) -> DiscreteModel:
    """Discrete model built from the perturbed filter parameters.

    ``deltas`` is the absolute perturbation (dR, dC, dL).  The difference
    from the nominal model defines the realized model-error disturbance.
    """
    dr, dc, dl = (float(d) for d in deltas)
    if p.l_f + dl <= 0.0 or p.c_f + dc <= 0.0:
        raise ModelError("perturbed inductance/capacitance must stay positive")
    pert = FilterParams(r_f=p.r_f + dr, l_f=p.l_f + dl, c_f=p.c_f + dc,
                        omega0=p.omega0, ts=p.ts)
    return build_model(pert)


@dataclass(frozen=True)
class PlantState:
    """True plant state together with the parameter drift realized now."""

    x: np.ndarray
    deltas: tuple

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.shape != (4,) or not np.all(np.isfinite(x)):
            raise ModelError("plant state must be a finite 4-vector")
        object.__setattr__(self, "x", x)


class TruePlant:
    """Steps the disturbed plant x+ = Ax + Bu + E i + dA x + dB u.

    The parameter drift is a seeded slow sinusoid inside the configured
    bounds, so runs are reproducible while the drift stays "unpredictable"
    from the controller's point of view.

    With ``substeps`` > 1, voltage-dependent loads can be resolved inside
    the sample period through :meth:`step_with_load`: the plant integrates
    at ts/substeps, which matters once the load admittance is comparable
    to the filter's surge admittance.  For a constant within-step current
    the fine integration reproduces the one-step recursion exactly.
    """

    def __init__(self, params: FilterParams, bounds: UncertaintyBounds,
                 seed=0, drift_period=0.08, substeps=1, drift_quantum=None):
        self.params = params
        self.bounds = bounds
        self.nominal = build_model(params)
        self.substeps = max(int(substeps), 1)
        self.fine_params = FilterParams(r_f=params.r_f, l_f=params.l_f,
                                        c_f=params.c_f, omega0=params.omega0,
                                        ts=params.ts / self.substeps)
        self.fine_nominal = build_model(self.fine_params)
        rng = np.random.default_rng(seed)
        self.drift_period = float(drift_period)
        # the drift is sampled-and-held on a grid much finer than its period
        # so perturbed-model rebuilds stay off the per-step hot path
        self.drift_quantum = float(drift_quantum) if drift_quantum \
            else max(self.drift_period / 32.0, params.ts)
        self._phases = rng.uniform(0.0, 2.0 * math.pi, size=3)
        self._rates = 2.0 * math.pi / (self.drift_period * rng.uniform(1.0, 2.0, size=3))
        self._cache = {}

    def deltas_at(self, t):
        b = self.bounds
        amp = np.array([b.delta_r_frac * self.params.r_f,
                        b.delta_c_frac * self.params.c_f,
                        b.delta_l_frac * self.params.l_f])
        t_q = round(t / self.drift_quantum) * self.drift_quantum
        return tuple(amp * np.sin(self._rates * t_q + self._phases))

    def initial_state(self, x0, t0=0.0):
        return PlantState(x=np.asarray(x0, dtype=float), deltas=self.deltas_at(t0))

    def _perturbed(self, deltas, fine):
        key = (fine,) + tuple(round(float(d), 15) for d in deltas)
        if key not in self._cache:
            params = self.fine_params if fine else self.params
            self._cache = {k: v for k, v in self._cache.items() if k[0] != fine}
            self._cache[key] = apply_uncertainty(params, deltas)
        return self._cache[key]

    def step(self, s: PlantState, u, i_load, t_next):
        """One sample-period update with the load current held constant;
        returns the next state and the realized model-error term."""
        u = np.asarray(u, dtype=float)
        i_load = np.asarray(i_load, dtype=float)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(i_load))):
            raise ModelError("inputs to the plant must be finite")
        nom = self.nominal
        pert = self._perturbed(s.deltas, fine=False)
        w2 = (pert.a - nom.a) @ s.x + (pert.b - nom.b) @ u
        x_next = nom.a @ s.x + nom.b @ u + nom.e @ i_load + w2
        return PlantState(x=x_next, deltas=self.deltas_at(t_next)), w2

    def fine_model(self, deltas) -> DiscreteModel:
        """Perturbed model at the substep rate for externally driven integration."""
        return self._perturbed(deltas, fine=True)

    def step_with_load(self, s: PlantState, u, load_fn, t, t_next):
        """One sample period with the load current re-evaluated per substep.

        ``load_fn(v_dq, tau)`` returns the instantaneous load current.
        Returns (next state, load current at the sample instant, total
        state-space disturbance realized over the step).
        """
        u = np.asarray(u, dtype=float)
        fine_pert = self._perturbed(s.deltas, fine=True)
        fine_e = self.fine_nominal.e   # load enters through the nominal map,
        dt = self.fine_params.ts       # matching the w1/w2 error split
        x = s.x.copy()
        i_first = None
        for j in range(self.substeps):
            i_j = np.asarray(load_fn(x[:2], t + j * dt), dtype=float)
            if i_first is None:
                i_first = i_j
            x = fine_pert.a @ x + fine_pert.b @ u + fine_e @ i_j
        w_total = x - (self.nominal.a @ s.x + self.nominal.b @ u)
        return PlantState(x=x, deltas=self.deltas_at(t_next)), i_first, w_total


def step_true_plant(plant: TruePlant, s: PlantState, u, i_load, t_next=0.0) -> PlantState:
    """Functional wrapper around :meth:`TruePlant.step` (drops the w2 report)."""
    nxt, _ = plant.step(s, u, i_load, t_next)
    return nxt


def calibrate_w2_bound(params: FilterParams, bounds: UncertaintyBounds,
                       x_limits, u_limits, n_samples=10000, seed=0,
                       inflation=1.1):
    """Monte-Carlo bound on ||dA x + dB u||_inf over an operating envelope.

    Samples parameter drifts on the bound surface and states/inputs inside
    the supplied box, then inflates the observed maximum.  The envelope
    should reflect realistic operation, not the (much larger) constraint
    set, or the resulting bound makes every tightened set empty.
    """
    rng = np.random.default_rng(seed)
    nom = build_model(params)
    x_limits = np.asarray(x_limits, dtype=float)
    u_limits = np.asarray(u_limits, dtype=float)
    worst = 0.0
    # Drift corners dominate; sample signs plus a few interior drifts.
    n_models = 24
    for _ in range(n_models):
        scale = rng.choice([1.0, 1.0, rng.uniform(0.2, 1.0)])
        signs = rng.choice([-1.0, 1.0], size=3)
        deltas = (signs[0] * scale * bounds.delta_r_frac * params.r_f,
                  signs[1] * scale * bounds.delta_c_frac * params.c_f,
                  signs[2] * scale * bounds.delta_l_frac * params.l_f)
        pert = apply_uncertainty(params, deltas)
        da = pert.a - nom.a
        db = pert.b - nom.b
        xs = rng.uniform(-1.0, 1.0, size=(n_samples // n_models + 1, 4)) * x_limits
        us = rng.uniform(-1.0, 1.0, size=(xs.shape[0], 2)) * u_limits
        w2 = xs @ da.T + us @ db.T
        worst = max(worst, float(np.abs(w2).max()))
    return worst * inflation


def park(abc, theta):
    """Amplitude-invariant Park transform; returns (d, q).

    A balanced set aligned with ``theta`` maps to d equal to the phase
    amplitude and q equal to zero.
    """
    abc = np.asarray(abc, dtype=float)
    th = np.asarray(theta, dtype=float)
    ang = np.stack([th, th - 2.0 * math.pi / 3.0, th + 2.0 * math.pi / 3.0])
    d = (2.0 / 3.0) * np.sum(np.cos(ang) * abc, axis=0)
    q = -(2.0 / 3.0) * np.sum(np.sin(ang) * abc, axis=0)
    return d, q


def inverse_park(dq, theta):
    """Inverse of :func:`park` on balanced signals; returns the abc triple."""
    d, q = dq
    th = np.asarray(theta, dtype=float)
    ang = np.stack([th, th - 2.0 * math.pi / 3.0, th + 2.0 * math.pi / 3.0])
    return d * np.cos(ang) - q * np.sin(ang)
