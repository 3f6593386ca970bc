"""Scenario description: plant constants, controller settings, loads, timing.

Scenarios are plain data, written and parsed as an INI-style text file so
experiment definitions can live under version control.  Unknown keys are
rejected; missing keys fall back to the nameplate defaults.
"""

import configparser
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .convexsets import HPolytope
from .dqplant import FilterParams, UncertaintyBounds


class ConfigError(ValueError):
    """Bad scenario file or field value."""


@dataclass(frozen=True)
class LoadSpec:
    """One load at the DG terminal (or the PCC in two-DG runs)."""

    kind: str                      # constant_impedance | constant_power | harmonic
    s_rated: float = 0.0           # VA
    pf: float = 1.0
    orders: tuple = ()             # ((harmonic_number, relative_magnitude), ...)
    base_current: float = 0.0      # fundamental amplitude of a harmonic load, A
    connect_time: float = 0.0      # s

    def __post_init__(self):
        if self.kind not in ("constant_impedance", "constant_power", "harmonic"):
            raise ConfigError(f"unknown load kind '{self.kind}'")
        if self.kind in ("constant_impedance", "constant_power"):
            if self.s_rated <= 0.0:
                raise ConfigError("s_rated must be positive")
            if not 0.0 < self.pf <= 1.0:
                raise ConfigError("pf must lie in (0, 1]")
        if self.kind == "harmonic":
            if self.base_current <= 0.0:
                raise ConfigError("base_current must be positive")
            for order, mag in self.orders:
                if int(order) < 2 or mag < 0.0:
                    raise ConfigError("harmonic orders must be >= 2 with nonnegative magnitude")
        if self.connect_time < 0.0:
            raise ConfigError("connect_time must be nonnegative")


@dataclass(frozen=True)
class DroopParams:
    """Droop gains, filtering and feeder data for two-DG power sharing.

    The line impedance is given on the high-voltage feeder; each DG couples
    through an ideal-ratio transformer, so the network solve refers the
    lines to the converter side.
    """

    f_n: float = 60.0              # Hz
    v_n: float = 0.0               # V (phase amplitude); 0 means "use the reference"
    m: tuple = (0.6, 0.9)          # Hz/MW per DG
    n: tuple = (0.5, 0.87)         # V/MVAr per DG
    lpf_cutoff: float = 10.0       # Hz
    line_r: float = 0.35           # ohm on the HV feeder
    line_x: float = 1.16           # ohm at the fundamental, HV feeder
    hv_voltage: float = 0.0        # HV side of the coupling transformer; 0
                                   # takes the line values at the converter
                                   # level without referral
    trafo_leakage_pu: float = 0.06 # coupling-transformer series reactance
    trafo_resistance_pu: float = 0.005
    virtual_r: float = 0.03        # virtual output resistance, ohm
    virtual_x: float = 0.02        # virtual output reactance, ohm
    ff_current_cutoff: float = 30.0   # Hz; feedforward-current low-pass
                                      # (0 disables the feedforward)

    def __post_init__(self):
        if self.f_n <= 0.0 or self.lpf_cutoff <= 0.0:
            raise ConfigError("f_n and lpf_cutoff must be positive")
        if any(v <= 0.0 for v in self.m) or any(v <= 0.0 for v in self.n):
            raise ConfigError("droop gains must be positive")
        if self.hv_voltage < 0.0:
            raise ConfigError("hv_voltage must be nonnegative")
        if self.trafo_leakage_pu < 0.0 or self.trafo_resistance_pu < 0.0:
            raise ConfigError("transformer impedance must be nonnegative")

    def line_impedance_lv(self, v_base, s_base=3e6):
        """Feeder plus transformer series impedance seen from the converter.

        The line is referred through the turns ratio; the coupling
        transformer contributes its leakage impedance on the converter
        base.  Without that leakage the parallel units are coupled so
        stiffly that droop synchronization has no stability margin.
        """
        ratio = v_base / self.hv_voltage if self.hv_voltage > 0.0 else 1.0
        z_line = complex(self.line_r, self.line_x) * ratio ** 2
        z_base = v_base ** 2 / s_base
        z_trafo = complex(self.trafo_resistance_pu, self.trafo_leakage_pu) * z_base
        return z_line + z_trafo


@dataclass(frozen=True)
class ScenarioConfig:
    """Full experiment description with nameplate defaults."""

    # plant (nameplate table)
    r_f: float = 1.5e-3
    l_f: float = 100e-3
    c_f: float = 100e-6
    f0: float = 60.0
    ts: float = 250e-6
    v_base: float = 600.0          # line-to-line RMS
    s_base: float = 3e6
    v_dc: float = 2000.0

    # parameter drift
    delta_r_frac: float = 0.1
    delta_c_frac: float = 0.1
    delta_l_frac: float = 0.2
    l2_inf_bound: float = 0.0      # 0 means "calibrate per the scenario envelope"
    drift_period: float = 0.08

    # controller
    horizon: int = 5
    q_diag: tuple = (1.0, 1.0, 1e-4, 1e-4)
    r_diag: tuple = (1e-4, 1e-4)
    x_voltage_limit: float = 0.0   # 0 means 1.5 * sqrt(2/3) * v_base
    x_current_limit: float = 0.0   # 0 means 2 p.u. of rated current
    mrpi_eps: float = 1.0
    mrpi_term_cap: int = 16
    tube_inflation: float = 1.0
    input_delay: bool = True
    v_ref_d: float = 0.0           # 0 means sqrt(2/3) * v_base
    pi_kp: float = 0.25
    pi_ki: float = 1000.0

    # GP
    gp_window: int = 200
    gp_h: float = 50.0
    gp_lambda: float = 2e-3
    gp_sigma_n2: float = 0.01
    gp_fit: bool = False
    gp_warmup: int = 16

    # disturbance set
    confidence: float = 0.95
    delta_mu_mode: str = "fixed"     # fixed | tracked
    delta_mu: float = 5.0
    drift_mode: str = "squared"
    w1_bound: float = 800.0          # worst-case load current amplitude, A
    rmpc_w1_box: float = 60.0        # static-tube current box half-width, A

    loads: tuple = ()

    # simulation
    duration: float = 0.15
    seed: int = 0
    noise_var: float = 0.01
    thd_cycles: int = 3
    containment_check: str = "hull"  # none | hull | exact
    vref_trim: bool = True           # slow trim removing the static tube offset
    trim_gain: float = 40.0          # 1/s integrator gain of the trim loop
    plant_substeps: int = 1          # >1 resolves voltage-dependent loads in-step

    droop_enabled: bool = False
    droop: DroopParams = field(default_factory=DroopParams)

    def __post_init__(self):
        FilterParams(r_f=self.r_f, l_f=self.l_f, c_f=self.c_f,
                     omega0=2.0 * math.pi * self.f0, ts=self.ts)
        UncertaintyBounds(delta_r_frac=self.delta_r_frac,
                          delta_c_frac=self.delta_c_frac,
                          delta_l_frac=self.delta_l_frac,
                          l2_inf_bound=max(self.l2_inf_bound, 0.0))
        if self.duration < 0.0:
            raise ConfigError("duration must be nonnegative")
        n_steps = self.duration / self.ts
        if abs(n_steps - round(n_steps)) > 1e-6:
            raise ConfigError("duration must be a multiple of ts")
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if self.delta_mu_mode not in ("tracked", "fixed"):
            raise ConfigError("delta_mu_mode must be 'tracked' or 'fixed'")
        if self.containment_check not in ("none", "hull", "exact"):
            raise ConfigError("containment_check must be none, hull or exact")
        if not 0.0 < self.confidence < 1.0:
            raise ConfigError("confidence must lie in (0, 1)")

    # -- derived quantities -------------------------------------------------

    @property
    def omega0(self):
        return 2.0 * math.pi * self.f0

    @property
    def n_steps(self):
        return int(round(self.duration / self.ts))

    @property
    def v_phase_amp(self):
        return math.sqrt(2.0 / 3.0) * self.v_base

    @property
    def i_rated_amp(self):
        return 2.0 * self.s_base / (3.0 * self.v_phase_amp)

    def v_ref_dq(self):
        vd = self.v_ref_d if self.v_ref_d > 0.0 else self.v_phase_amp
        return np.array([vd, 0.0])

    def filter_params(self) -> FilterParams:
        return FilterParams(r_f=self.r_f, l_f=self.l_f, c_f=self.c_f,
                            omega0=self.omega0, ts=self.ts)

    def uncertainty_bounds(self) -> UncertaintyBounds:
        return UncertaintyBounds(delta_r_frac=self.delta_r_frac,
                                 delta_c_frac=self.delta_c_frac,
                                 delta_l_frac=self.delta_l_frac,
                                 l2_inf_bound=self.l2_inf_bound)

    def state_limits(self):
        v_lim = self.x_voltage_limit if self.x_voltage_limit > 0.0 \
            else 1.5 * self.v_phase_amp
        i_lim = self.x_current_limit if self.x_current_limit > 0.0 \
            else 2.0 * self.i_rated_amp
        return np.array([v_lim, v_lim, i_lim, i_lim])

    def input_limits(self):
        u_lim = 0.5 * self.v_dc
        return np.array([u_lim, u_lim])

    def constraint_polytopes(self):
        xl = self.state_limits()
        ul = self.input_limits()
        eye4, eye2 = np.eye(4), np.eye(2)
        x_poly = HPolytope(np.vstack([eye4, -eye4]), np.concatenate([xl, xl]))
        u_poly = HPolytope(np.vstack([eye2, -eye2]), np.concatenate([ul, ul]))
        return x_poly, u_poly


_SCHEMA = {
    "plant": {"r_f": float, "l_f": float, "c_f": float, "f0": float, "ts": float,
              "v_base": float, "s_base": float, "v_dc": float},
    "uncertainty": {"delta_r_frac": float, "delta_c_frac": float,
                    "delta_l_frac": float, "l2_inf_bound": float,
                    "drift_period": float},
    "controller": {"horizon": int, "q_diag": "floats", "r_diag": "floats",
                   "x_voltage_limit": float, "x_current_limit": float,
                   "mrpi_eps": float, "mrpi_term_cap": int,
                   "tube_inflation": float,
                   "input_delay": "bool", "v_ref_d": float,
                   "pi_kp": float, "pi_ki": float},
    "gp": {"window": int, "h": float, "lambda": float, "sigma_n2": float,
           "fit": "bool", "warmup": int},
    "disturbance": {"confidence": float, "delta_mu_mode": str, "delta_mu": float,
                    "drift_mode": str, "w1_bound": float, "rmpc_w1_box": float},
    "sim": {"duration": float, "seed": int, "noise_var": float,
            "thd_cycles": int, "containment_check": str,
            "vref_trim": "bool", "trim_gain": float, "plant_substeps": int},
    "droop": {"enabled": "bool", "f_n": float, "v_n": float, "m": "floats",
              "n": "floats", "lpf_cutoff": float, "line_r": float,
              "line_x": float, "hv_voltage": float,
              "trafo_leakage_pu": float, "trafo_resistance_pu": float,
              "virtual_r": float, "virtual_x": float,
              "ff_current_cutoff": float},
}

_LOAD_KEYS = {"kind": str, "s_rated": float, "pf": float, "orders": "orders",
              "base_current": float, "connect_time": float}

# (section, key) -> ScenarioConfig field name where they differ
_FIELD_MAP = {
    ("gp", "window"): "gp_window", ("gp", "h"): "gp_h",
    ("gp", "lambda"): "gp_lambda", ("gp", "sigma_n2"): "gp_sigma_n2",
    ("gp", "fit"): "gp_fit", ("gp", "warmup"): "gp_warmup",
    ("droop", "enabled"): "droop_enabled",
}


def _parse_value(kind, raw, where):
    try:
        if kind is float:
            return float(raw)
        if kind is int:
            return int(raw)
        if kind is str:
            return raw.strip()
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "floats":
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if kind == "orders":
            pairs = []
            for item in raw.replace(",", " ").split():
                order, mag = item.split(":")
                pairs.append((int(order), float(mag)))
            return tuple(pairs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"cannot parse {where}: {exc}") from exc
    raise ConfigError(f"unknown schema kind for {where}")


def parse_config(path) -> ScenarioConfig:
    """Read a scenario file; unknown keys or sections are an error."""
    with open(path) as fh:
        return parse_config_text(fh.read())


def parse_config_text(text) -> ScenarioConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc

    fields = {}
    loads = []
    for section in parser.sections():
        if section.startswith("load"):
            raw = dict(parser.items(section))
            unknown = set(raw) - set(_LOAD_KEYS)
            if unknown:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
            kwargs = {}
            for key, val in raw.items():
                kwargs[key] = _parse_value(_LOAD_KEYS[key], val, f"[{section}] {key}")
            loads.append(LoadSpec(**kwargs))
            continue
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}]")
            val = _parse_value(_SCHEMA[section][key], raw, f"[{section}] {key}")
            fields[(section, key)] = val

    droop_kwargs = {}
    cfg_kwargs = {}
    for (section, key), val in fields.items():
        if section == "droop" and key != "enabled":
            droop_kwargs[key] = val
            continue
        name = _FIELD_MAP.get((section, key), key)
        cfg_kwargs[name] = val
    if droop_kwargs:
        cfg_kwargs["droop"] = DroopParams(**droop_kwargs)
    cfg_kwargs["loads"] = tuple(loads)
    try:
        return ScenarioConfig(**cfg_kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad scenario field: {exc}") from exc


def serialize_config(cfg: ScenarioConfig) -> str:
    """Render a scenario as config text; parsing it back gives the same value."""
    out = io.StringIO()

    def sec(name, pairs):
        out.write(f"[{name}]\n")
        for k, v in pairs:
            if isinstance(v, tuple):
                v = ", ".join(repr(float(x)) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            out.write(f"{k} = {v}\n")
        out.write("\n")

    sec("plant", [("r_f", cfg.r_f), ("l_f", cfg.l_f), ("c_f", cfg.c_f),
                  ("f0", cfg.f0), ("ts", cfg.ts), ("v_base", cfg.v_base),
                  ("s_base", cfg.s_base), ("v_dc", cfg.v_dc)])
    sec("uncertainty", [("delta_r_frac", cfg.delta_r_frac),
                        ("delta_c_frac", cfg.delta_c_frac),
                        ("delta_l_frac", cfg.delta_l_frac),
                        ("l2_inf_bound", cfg.l2_inf_bound),
                        ("drift_period", cfg.drift_period)])
    sec("controller", [("horizon", cfg.horizon), ("q_diag", cfg.q_diag),
                       ("r_diag", cfg.r_diag),
                       ("x_voltage_limit", cfg.x_voltage_limit),
                       ("x_current_limit", cfg.x_current_limit),
                       ("mrpi_eps", cfg.mrpi_eps),
                       ("mrpi_term_cap", cfg.mrpi_term_cap),
                       ("tube_inflation", cfg.tube_inflation),
                       ("input_delay", cfg.input_delay),
                       ("v_ref_d", cfg.v_ref_d),
                       ("pi_kp", cfg.pi_kp), ("pi_ki", cfg.pi_ki)])
    sec("gp", [("window", cfg.gp_window), ("h", cfg.gp_h),
               ("lambda", cfg.gp_lambda), ("sigma_n2", cfg.gp_sigma_n2),
               ("fit", cfg.gp_fit), ("warmup", cfg.gp_warmup)])
    sec("disturbance", [("confidence", cfg.confidence),
                        ("delta_mu_mode", cfg.delta_mu_mode),
                        ("delta_mu", cfg.delta_mu),
                        ("drift_mode", cfg.drift_mode),
                        ("w1_bound", cfg.w1_bound),
                        ("rmpc_w1_box", cfg.rmpc_w1_box)])
    sec("sim", [("duration", cfg.duration), ("seed", cfg.seed),
                ("noise_var", cfg.noise_var), ("thd_cycles", cfg.thd_cycles),
                ("containment_check", cfg.containment_check),
                ("vref_trim", cfg.vref_trim), ("trim_gain", cfg.trim_gain),
                ("plant_substeps", cfg.plant_substeps)])
    sec("droop", [("enabled", cfg.droop_enabled), ("f_n", cfg.droop.f_n),
                  ("v_n", cfg.droop.v_n), ("m", cfg.droop.m),
                  ("n", cfg.droop.n), ("lpf_cutoff", cfg.droop.lpf_cutoff),
                  ("line_r", cfg.droop.line_r), ("line_x", cfg.droop.line_x),
                  ("hv_voltage", cfg.droop.hv_voltage),
                  ("trafo_leakage_pu", cfg.droop.trafo_leakage_pu),
                  ("trafo_resistance_pu", cfg.droop.trafo_resistance_pu),
                  ("virtual_r", cfg.droop.virtual_r),
                  ("virtual_x", cfg.droop.virtual_x),
                  ("ff_current_cutoff", cfg.droop.ff_current_cutoff)])
    for i, load in enumerate(cfg.loads, start=1):
        pairs = [("kind", load.kind)]
        if load.kind in ("constant_impedance", "constant_power"):
            pairs += [("s_rated", load.s_rated), ("pf", load.pf)]
        if load.kind == "harmonic":
            orders = " ".join(f"{o}:{repr(m)}" for o, m in load.orders)
            pairs += [("orders", orders), ("base_current", load.base_current)]
        pairs.append(("connect_time", load.connect_time))
        sec(f"load.{i}", pairs)
    return out.getvalue()


def with_updates(cfg: ScenarioConfig, **kwargs) -> ScenarioConfig:
    return replace(cfg, **kwargs)
