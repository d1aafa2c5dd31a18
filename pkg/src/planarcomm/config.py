"""YAML run configuration with unit-suffixed keys.

Unknown keys and bad values raise ConfigError carrying the file line so the
CLI can point at the offending entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import yaml

from .calibrate import GdConfig
from .control import CommutationLoopParams, PositionLoopParams
from .gpff import TuneBudget
from .plant import Bump, Harmonic, MismatchField, PlantParams
from .sim import ScenarioConfig, uniform_grid
from .trajectory import ProfileParams


class ConfigError(ValueError):
    def __init__(self, message, key: str = "", line: Optional[int] = None):
        self.key = key
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{key}: {message}{where}" if key else message + where)


# ---------------------------------------------------------------------------
# converters

def _float(v):
    if isinstance(v, bool):
        raise ValueError("expected a number")
    return float(v)


def _opt_float(v):
    return None if v is None else _float(v)


def _int(v):
    if isinstance(v, bool) or float(v) != int(float(v)):
        raise ValueError("expected an integer")
    return int(float(v))


def _opt_int(v):
    return None if v is None else _int(v)


def _vec(n):
    def conv(v):
        if not isinstance(v, (list, tuple)) or len(v) != n:
            raise ValueError(f"expected a list of {n} numbers")
        return tuple(_float(x) for x in v)
    return conv


def _scalar_or_vec(n):
    def conv(v):
        return _vec(n)(v) if isinstance(v, (list, tuple)) else _float(v)
    return conv


def _str(v):
    if not isinstance(v, str):
        raise ValueError("expected a string")
    return v


SCHEMA: Dict[str, Dict[str, Callable]] = {
    "": {"mode": _str, "seed": _int},
    "plant": {
        "mass_kg": _float, "damping_N_s_per_m": _vec(3), "stiffness_N_per_m": _vec(3),
        "gravity_m_per_s2": _float, "coil_pitch_m": _float, "kappa": _float, "dt_s": _float,
    },
    "field": {"random_seed": _opt_int, "offset_m": _vec(2), "harmonics": list, "bumps": list},
    "position_loop": {"bandwidth_hz": _scalar_or_vec(3), "integrator_ratio": _float,
                      "lead_ratio": _float},
    "commutation": {"bandwidth_hz": _scalar_or_vec(2), "sensitivity_N_per_m": _opt_float,
                    "sign": _vec(2)},
    "profile": {"stroke_m": _float, "v_max_m_per_s": _float, "a_max_m_per_s2": _float,
                "j_max_m_per_s3": _float, "s_max_m_per_s4": _float, "axis": _str},
    "scenario": {"start_m": _vec(2), "eta_init_m": _vec(2), "pre_roll_s": _float,
                 "post_roll_s": _float, "noise_std_m": _float},
    "calibration": {"grid_n": _int, "eta0_m": _vec(2), "step0_m_per_N": _opt_float,
                    "perturbation_m": _opt_float, "max_iter": _int, "step_tol_m": _opt_float,
                    "rel_stagnation": _float, "objective_tol_N": _float, "beta": _float,
                    "t_settle_s": _opt_float, "t_avg_s": _opt_float},
    "collect": {"grid_n": _int, "t_hold_s": _opt_float},
    "gp": {"split": _float, "bfr_floor_pct": _float, "restarts": _int, "max_evals": _int,
           "subsample": _opt_int, "seed": _int},
}
_HARMONIC_KEYS = {"amplitude_m": _vec(2), "pitch_m": _float, "phase_rad": _vec(2)}
_BUMP_KEYS = {"center_m": _vec(2), "width_m": _float, "height_m": _vec(2)}


# ---------------------------------------------------------------------------
# YAML with line tracking

def _to_python(node, lines: Dict[str, int], path: str):
    lines.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value
            sub = f"{path}.{key}" if path else key
            if key in out:
                raise ConfigError("duplicate key", sub, k.start_mark.line + 1)
            lines[sub] = k.start_mark.line + 1
            out[key] = _to_python(v, lines, sub)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_python(v, lines, f"{path}[{i}]") for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


def load_yaml(text: str):
    lines: Dict[str, int] = {}
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark else None) from None
    if node is None:
        return {}, lines
    data = _to_python(node, lines, "")
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", line=1)
    return data, lines


def _check_keys(d, allowed, prefix, lines):
    if not isinstance(d, dict):
        raise ConfigError("expected a mapping", prefix, lines.get(prefix))
    out = {}
    for k, v in d.items():
        path = f"{prefix}.{k}" if prefix else k
        if k not in allowed:
            raise ConfigError("unknown key", path, lines.get(path))
        try:
            out[k] = allowed[k](v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc) or "invalid value", path, lines.get(path)) from None
    return out


# ---------------------------------------------------------------------------
# resolved configuration

@dataclass
class RunConfig:
    scenario: ScenarioConfig
    calibration: GdConfig
    calib_windows: tuple = (None, None)  # (t_settle, t_avg) [s]
    collect_grid_n: int = 24
    t_hold: Optional[float] = None
    gp_split: float = 0.8
    bfr_floor: float = 80.0
    tune: TuneBudget = field(default_factory=lambda: TuneBudget(restarts=2, max_evals=300,
                                                                 subsample=200))
    field_random_seed: Optional[int] = None

    def collect_grid(self, n: Optional[int] = None):
        return uniform_grid(self.collect_grid_n if n is None else n)

    def to_dict(self) -> dict:
        """Resolved configuration in the same key layout as the input file."""
        sc = self.scenario
        p, pl, cm, pr = sc.plant, sc.position_loop, sc.commutation, sc.profile
        fld = sc.mismatch.to_dict()
        gd = self.calibration
        grid_n = int(round(gd.n_p ** 0.5))
        return {
            "mode": sc.mode,
            "seed": sc.seed,
            "plant": {"mass_kg": p.mass, "damping_N_s_per_m": list(p.damping),
                      "stiffness_N_per_m": list(p.stiffness), "gravity_m_per_s2": p.gravity,
                      "coil_pitch_m": p.coil_pitch, "kappa": p.kappa, "dt_s": p.dt},
            # a randomized field is written out explicitly so the dump reloads as-is
            "field": {"offset_m": fld["offset_m"],
                      "harmonics": fld["harmonics"], "bumps": fld["bumps"]},
            "position_loop": {"bandwidth_hz": _plain(pl.bandwidth_hz),
                              "integrator_ratio": pl.integrator_ratio,
                              "lead_ratio": pl.lead_ratio},
            "commutation": {"bandwidth_hz": _plain(cm.bandwidth_hz),
                            "sensitivity_N_per_m": cm.sensitivity, "sign": list(cm.sign)},
            "profile": {"stroke_m": pr.stroke, "v_max_m_per_s": pr.v_max,
                        "a_max_m_per_s2": pr.a_max, "j_max_m_per_s3": pr.j_max,
                        "s_max_m_per_s4": pr.s_max, "axis": pr.axis},
            "scenario": {"start_m": list(sc.start), "eta_init_m": list(sc.eta_init),
                         "pre_roll_s": sc.pre_roll, "post_roll_s": sc.post_roll,
                         "noise_std_m": sc.noise_std},
            "calibration": {"grid_n": grid_n, "eta0_m": list(gd.eta0),
                            "step0_m_per_N": gd.step0, "perturbation_m": gd.perturbation[0],
                            "max_iter": gd.max_iter, "step_tol_m": gd.step_tol,
                            "rel_stagnation": gd.rel_stagnation,
                            "objective_tol_N": gd.objective_tol, "beta": gd.beta,
                            "t_settle_s": self.calib_windows[0],
                            "t_avg_s": self.calib_windows[1]},
            "collect": {"grid_n": self.collect_grid_n, "t_hold_s": self.t_hold},
            "gp": {"split": self.gp_split, "bfr_floor_pct": self.bfr_floor,
                   "restarts": self.tune.restarts, "max_evals": self.tune.max_evals,
                   "subsample": self.tune.subsample, "seed": self.tune.seed},
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)


def _plain(v):
    return list(v) if isinstance(v, (list, tuple)) else v


def _field(sec, raw, lines, coil_pitch):
    seed = sec.get("random_seed")
    explicit = any(k in sec for k in ("offset_m", "harmonics", "bumps"))
    if seed is not None and explicit:
        raise ConfigError("random_seed cannot be combined with explicit components",
                          "field.random_seed", lines.get("field.random_seed"))
    if seed is not None:
        return MismatchField.random(seed, coil_pitch=coil_pitch)
    harmonics = []
    for i, h in enumerate(raw.get("harmonics", []) or []):
        hs = _check_keys(h, _HARMONIC_KEYS, f"field.harmonics[{i}]", lines)
        harmonics.append(Harmonic(hs["amplitude_m"], hs["pitch_m"],
                                  hs.get("phase_rad", (0.0, 0.0))))
    bumps = []
    for i, b in enumerate(raw.get("bumps", []) or []):
        bs = _check_keys(b, _BUMP_KEYS, f"field.bumps[{i}]", lines)
        bumps.append(Bump(bs["center_m"], bs["width_m"], bs["height_m"]))
    try:
        return MismatchField(offset=sec.get("offset_m", (0.0, 0.0)), harmonics=tuple(harmonics),
                             bumps=tuple(bumps), coil_pitch=coil_pitch)
    except ValueError as exc:
        raise ConfigError(str(exc), "field", lines.get("field")) from None


def parse_config(data: dict, lines: Optional[Dict[str, int]] = None) -> RunConfig:
    lines = lines or {}
    top = _check_keys({k: v for k, v in data.items() if k not in SCHEMA},
                      SCHEMA[""], "", lines)
    secs = {name: _check_keys(data.get(name) or {}, keys, name, lines)
            for name, keys in SCHEMA.items() if name}

    def build(section, fn):
        try:
            return fn()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), section, lines.get(section)) from None

    s = secs["plant"]
    plant = build("plant", lambda: PlantParams(
        mass=s.get("mass_kg", 10.0), damping=s.get("damping_N_s_per_m", (0.0, 0.0, 0.0)),
        stiffness=s.get("stiffness_N_per_m", (0.0, 0.0, 0.0)),
        gravity=s.get("gravity_m_per_s2", 9.81), coil_pitch=s.get("coil_pitch_m", 0.04),
        kappa=s.get("kappa", 1.0), dt=s.get("dt_s", 1e-4)))
    fsec = secs["field"]
    if not fsec:
        fsec = {"random_seed": 7}
    mismatch = _field(fsec, data.get("field") or {}, lines, plant.coil_pitch)
    s = secs["position_loop"]
    ploop = build("position_loop", lambda: PositionLoopParams(
        bandwidth_hz=s.get("bandwidth_hz", 150.0),
        integrator_ratio=s.get("integrator_ratio", 0.1), lead_ratio=s.get("lead_ratio", 3.0),
        mass=plant.mass, dt=plant.dt))
    s = secs["commutation"]
    comm = build("commutation", lambda: CommutationLoopParams(
        bandwidth_hz=s.get("bandwidth_hz", 1.5), sensitivity=s.get("sensitivity_N_per_m"),
        sign=s.get("sign", (-1.0, -1.0))))
    s = secs["profile"]
    prof = build("profile", lambda: ProfileParams(
        stroke=s.get("stroke_m", 0.05), v_max=s.get("v_max_m_per_s", 0.1),
        a_max=s.get("a_max_m_per_s2", 5.0), j_max=s.get("j_max_m_per_s3", 500.0),
        s_max=s.get("s_max_m_per_s4", 5e4), dt=plant.dt, axis=s.get("axis", "y")))
    s = secs["scenario"]
    scenario = build("mode", lambda: ScenarioConfig(
        mode=top.get("mode", "baseline"), plant=plant, mismatch=mismatch,
        position_loop=ploop, commutation=comm, profile=prof,
        start=s.get("start_m", (0.0, -0.025)), eta_init=s.get("eta_init_m", (0.0, 0.0)),
        seed=top.get("seed", 0), pre_roll=s.get("pre_roll_s", 4.0),
        post_roll=s.get("post_roll_s", 0.05), noise_std=s.get("noise_std_m", 0.0)))
    s = secs["calibration"]
    tau = plant.coil_pitch
    kw = {"eta0": s.get("eta0_m", (0.0, 0.0)), "step0": s.get("step0_m_per_N"),
          "max_iter": s.get("max_iter", 50), "rel_stagnation": s.get("rel_stagnation", 1e-3),
          "objective_tol": s.get("objective_tol_N", 1e-6), "beta": s.get("beta", 0.5)}
    if s.get("perturbation_m") is not None:
        kw["perturbation"] = (s["perturbation_m"],) * 2
    if s.get("step_tol_m") is not None:
        kw["step_tol"] = s["step_tol_m"]
    grid_n = s.get("grid_n", 6)
    if grid_n < 1:
        raise ConfigError("must be at least 1", "calibration.grid_n",
                          lines.get("calibration.grid_n"))
    gd = build("calibration", lambda: GdConfig.for_pitch(tau, grid_n=grid_n, **kw))
    c = secs["collect"]
    g = secs["gp"]
    split = g.get("split", 0.8)
    if not 0.0 < split <= 1.0:
        raise ConfigError("must lie in (0, 1]", "gp.split", lines.get("gp.split"))
    tune = build("gp", lambda: TuneBudget(restarts=g.get("restarts", 2),
                                          max_evals=g.get("max_evals", 300),
                                          subsample=g.get("subsample", 200),
                                          seed=g.get("seed", 0)))
    if c.get("grid_n", 24) < 1:
        raise ConfigError("must be at least 1", "collect.grid_n", lines.get("collect.grid_n"))
    return RunConfig(scenario, gd, (s.get("t_settle_s"), s.get("t_avg_s")),
                     c.get("grid_n", 24), c.get("t_hold_s"), split,
                     g.get("bfr_floor_pct", 80.0), tune, fsec.get("random_seed"))


def load_config(path) -> RunConfig:
    with open(path) as fh:
        text = fh.read()
    data, lines = load_yaml(text)
    return parse_config(data, lines)


