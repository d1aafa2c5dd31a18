"""Fourth-order (snap-limited) point-to-point scan profiles."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

_TINY = 1e-12


class InfeasibleProfile(ValueError):
    """Limits do not admit a constant-velocity phase at v_max."""


@dataclass(frozen=True)
class ProfileParams:
    stroke: float = 0.05
    v_max: float = 0.1
    a_max: float = 5.0
    j_max: float = 500.0
    s_max: float = 5e4
    dt: float = 1e-4
    axis: str = "y"

    def __post_init__(self):
        for name in ("v_max", "a_max", "j_max", "s_max", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.stroke < 0:
            raise ValueError("stroke must be non-negative")
        if self.axis not in ("x", "y"):
            raise ValueError("axis must be 'x' or 'y'")

    @property
    def axis_index(self) -> int:
        return {"x": 0, "y": 1}[self.axis]


@dataclass(frozen=True)
class Profile:
    params: ProfileParams
    segments: Tuple[Tuple[float, float], ...]  # (duration, snap)
    t: np.ndarray
    r: np.ndarray
    v: np.ndarray
    a: np.ndarray
    j: np.ndarray
    s: np.ndarray
    cruise: Tuple[float, float]
    phase_durations: Tuple[float, float, float, float]  # t_snap, t_jerk, t_acc, t_cruise

    @property
    def duration(self) -> float:
        return float(sum(d for d, _ in self.segments))

    def evaluate(self, t):
        """Exact (position, velocity, acceleration, jerk, snap) at time(s) ``t``."""
        return _evaluate(self.segments, self.params.stroke, np.asarray(t, dtype=float))

    def to_csv(self, path, header_line: str | None = None):
        with open(path, "w", newline="") as fh:
            if header_line:
                fh.write(header_line.rstrip("\n") + "\n")
            w = csv.writer(fh)
            w.writerow(["t_s", "r_m", "v_m_per_s", "a_m_per_s2", "j_m_per_s3", "s_m_per_s4"])
            for row in zip(self.t, self.r, self.v, self.a, self.j, self.s):
                w.writerow([repr(float(x)) for x in row])


def _phase_times(p: ProfileParams):
    s, j, a, v = p.s_max, p.j_max, p.a_max, p.v_max
    t1 = min(j / s, np.sqrt(a / s), np.cbrt(v / (2.0 * s)))
    jp = s * t1
    t2_acc = a / jp - t1
    t2_vel = 0.5 * (-3.0 * t1 + np.sqrt(t1 * t1 + 4.0 * v / jp))
    t2 = max(0.0, min(t2_acc, t2_vel))
    if t2 < _TINY:
        t2 = 0.0
    a_peak = jp * (t1 + t2)
    t3 = v / a_peak - (2.0 * t1 + t2)
    if t3 < _TINY:
        t3 = 0.0
    t_acc = 2.0 * (2.0 * t1 + t2) + t3
    t4 = p.stroke / v - t_acc
    return t1, t2, t3, t4, t_acc


def _segment_list(p: ProfileParams, t1, t2, t3, t4):
    s = p.s_max
    # snap chosen so the velocity plateau is exactly v_max
    s_eff = p.v_max / (t1 * (t1 + t2) * (2.0 * t1 + t2 + t3))
    s_eff = min(s_eff, s)
    acc = [(t1, s_eff), (t2, 0.0), (t1, -s_eff), (t3, 0.0),
           (t1, -s_eff), (t2, 0.0), (t1, s_eff)]
    dec = [(d, -sn) for d, sn in acc]
    segs = acc + [(t4, 0.0)] + dec
    return tuple((float(d), float(sn)) for d, sn in segs if d > 0.0)


def _boundary_states(segments):
    states = [np.zeros(4)]
    for dur, sn in segments:
        x, v, a, j = states[-1]
        h = dur
        states.append(np.array([
            x + v * h + a * h ** 2 / 2 + j * h ** 3 / 6 + sn * h ** 4 / 24,
            v + a * h + j * h ** 2 / 2 + sn * h ** 3 / 6,
            a + j * h + sn * h ** 2 / 2,
            j + sn * h,
        ]))
    return np.array(states)


def _evaluate(segments, stroke, t):
    durations = np.array([d for d, _ in segments])
    snaps = np.array([sn for _, sn in segments])
    starts = np.concatenate([[0.0], np.cumsum(durations)])
    total = starts[-1]
    states = _boundary_states(segments)
    tt = np.atleast_1d(t)
    idx = np.clip(np.searchsorted(starts, tt, side="right") - 1, 0, len(segments) - 1)
    h = tt - starts[idx]
    x0, v0, a0, j0 = states[idx].T
    sn = snaps[idx]
    pos = x0 + v0 * h + a0 * h ** 2 / 2 + j0 * h ** 3 / 6 + sn * h ** 4 / 24
    vel = v0 + a0 * h + j0 * h ** 2 / 2 + sn * h ** 3 / 6
    acc = a0 + j0 * h + sn * h ** 2 / 2
    jerk = j0 + sn * h
    snap = sn.copy()
    before = tt < 0.0
    after = tt >= total
    for arr in (pos, vel, acc, jerk, snap):
        arr[before] = 0.0
    pos[after] = stroke
    for arr in (vel, acc, jerk, snap):
        arr[after] = 0.0
    if np.ndim(t) == 0:
        return tuple(float(arr[0]) for arr in (pos, vel, acc, jerk, snap))
    return pos, vel, acc, jerk, snap


def plan_fourth_order(params: ProfileParams) -> Profile:
    """Symmetric snap-bang scan over ``params.stroke`` sampled every ``dt``.

    Raises InfeasibleProfile when the stroke is too short to cruise at v_max.
    """
    t1, t2, t3, t4, t_acc = _phase_times(params)
    if not t4 > 0.0:
        raise InfeasibleProfile(
            f"stroke {params.stroke} m too short: reaching v_max={params.v_max} m/s "
            f"takes {params.v_max * t_acc:.6g} m")
    segments = _segment_list(params, t1, t2, t3, t4)
    duration = float(sum(d for d, _ in segments))
    n = int(np.ceil(duration / params.dt - 1e-9)) + 1
    t = np.arange(n) * params.dt
    r, v, a, j, s = _evaluate(segments, params.stroke, np.minimum(t, duration))
    # samples at/after the end hold the exact final state
    end = t >= duration
    r[end], v[end], a[end], j[end], s[end] = params.stroke, 0.0, 0.0, 0.0, 0.0
    return Profile(params, segments, t, r, v, a, j, s,
                   (float(t_acc), float(t_acc + t4)), (float(t1), float(t2), float(t3), float(t4)))


def profile_at(profile: Profile, t: float):
    """Linearly interpolated (r, v, a) at time ``t`` within the profile."""
    if not (0.0 <= t <= profile.t[-1]):
        raise ValueError(f"t={t} outside [0, {profile.t[-1]}]")
    return (float(np.interp(t, profile.t, profile.r)),
            float(np.interp(t, profile.t, profile.v)),
            float(np.interp(t, profile.t, profile.a)))


def phase_summary(profile: Profile) -> List[str]:
    t1, t2, t3, t4 = profile.phase_durations
    return [f"snap phase {t1:.6g} s", f"jerk plateau {t2:.6g} s",
            f"accel plateau {t3:.6g} s", f"cruise {t4:.6g} s"]
