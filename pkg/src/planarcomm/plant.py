"""Rigid-body mover, mismatch field and surrogate electromagnetic coupling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm

# Workspace used for randomized fields and grid experiments [m].
WORKSPACE = ((-0.1, 0.1), (-0.1, 0.1))


@dataclass(frozen=True)
class PlantParams:
    """Mover mass/damping/stiffness, gravity and coupling constants."""

    mass: float = 10.0
    damping: Sequence[float] = (0.0, 0.0, 0.0)
    stiffness: Sequence[float] = (0.0, 0.0, 0.0)
    gravity: float = 9.81
    coil_pitch: float = 0.04
    kappa: float = 1.0
    dt: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "damping", tuple(float(v) for v in _vec3(self.damping)))
        object.__setattr__(self, "stiffness", tuple(float(v) for v in _vec3(self.stiffness)))
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if not self.coil_pitch > 0:
            raise ValueError("coil_pitch must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.kappa >= 0:
            raise ValueError("kappa must be non-negative")

    @property
    def wavenumber(self) -> float:
        return 2.0 * np.pi / self.coil_pitch

    @property
    def eta_limit(self) -> float:
        """Largest admissible frame error, keeps the coupling monotone."""
        return self.coil_pitch / 4.0


def _vec3(v):
    arr = np.broadcast_to(np.asarray(v, dtype=float), (3,))
    return arr


@dataclass
class PlantState:
    q: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q = np.array(self.q, dtype=float).reshape(3)
        self.v = np.array(self.v, dtype=float).reshape(3)
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.v))):
            raise ValueError("plant state must be finite")


@dataclass(frozen=True)
class Harmonic:
    amplitude: tuple  # (x, y) [m]
    pitch: float  # [m]
    phase: tuple = (0.0, 0.0)  # (x, y) [rad]


@dataclass(frozen=True)
class Bump:
    center: tuple  # (x, y) [m]
    width: float  # sigma [m]
    height: tuple  # (x, y) [m]


@dataclass(frozen=True)
class MismatchField:
    """Spatial frame discrepancy: offset + per-axis harmonics + gaussian bumps.

    The constructor rejects fields whose worst-case magnitude reaches a
    quarter coil pitch. The bound used is the sum of all component
    magnitudes, which holds at every position, not only inside the workspace.
    """

    offset: tuple = (0.0, 0.0)
    harmonics: tuple = ()
    bumps: tuple = ()
    seed: Optional[int] = None
    coil_pitch: float = 0.04

    def __post_init__(self):
        object.__setattr__(self, "offset", _pair(self.offset))
        object.__setattr__(self, "harmonics", tuple(
            Harmonic(_pair(h.amplitude), float(h.pitch), _pair(h.phase)) for h in self.harmonics))
        object.__setattr__(self, "bumps", tuple(
            Bump(_pair(b.center), float(b.width), _pair(b.height)) for b in self.bumps))
        for h in self.harmonics:
            if not h.pitch > 0:
                raise ValueError("harmonic pitch must be positive")
        for b in self.bumps:
            if not b.width > 0:
                raise ValueError("bump width must be positive")
        bound = self.magnitude_bound()
        if not bound < self.coil_pitch / 4.0:
            raise ValueError(
                f"field magnitude bound {bound:.3g} m reaches coil_pitch/4 "
                f"({self.coil_pitch / 4.0:.3g} m)")

    def magnitude_bound(self) -> float:
        """Upper bound on max_q ||delta(q)||_inf."""
        total = np.abs(np.asarray(self.offset))
        for h in self.harmonics:
            total = total + np.abs(h.amplitude)
        for b in self.bumps:
            total = total + np.abs(b.height)
        return float(np.max(total))

    @classmethod
    def random(cls, seed: int, coil_pitch: float = 0.04, workspace=WORKSPACE,
               scale: float = 1.0) -> "MismatchField":
        """Draw a representative field: static misalignment, coil-pitch
        harmonics (fundamental and second) and a few smooth residual bumps.

        ``scale`` multiplies every amplitude.
        """
        rng = np.random.default_rng(seed)
        offset = rng.uniform(-1.0, 1.0, 2) * coil_pitch / 400.0
        harmonics = [
            Harmonic(tuple(rng.uniform(0.5, 1.0, 2) * coil_pitch / 2000.0 * rng.choice([-1, 1], 2)),
                     coil_pitch, tuple(rng.uniform(0, 2 * np.pi, 2))),
            Harmonic(tuple(rng.uniform(0.1, 0.3, 2) * coil_pitch / 2000.0),
                     coil_pitch / 2.0, tuple(rng.uniform(0, 2 * np.pi, 2))),
        ]
        bumps = []
        (x0, x1), (y0, y1) = workspace
        for _ in range(4):
            bumps.append(Bump(
                (float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1))),
                float(rng.uniform(0.02, 0.05)),
                tuple(rng.uniform(-1.0, 1.0, 2) * coil_pitch / 2000.0)))
        if scale != 1.0:
            offset = offset * scale
            harmonics = [Harmonic(tuple(np.asarray(h.amplitude) * scale), h.pitch, h.phase)
                         for h in harmonics]
            bumps = [Bump(b.center, b.width, tuple(np.asarray(b.height) * scale)) for b in bumps]
        return cls(tuple(offset), tuple(harmonics), tuple(bumps), seed=seed,
                   coil_pitch=coil_pitch)

    @classmethod
    def constant(cls, offset, coil_pitch: float = 0.04) -> "MismatchField":
        return cls(offset=tuple(offset), coil_pitch=coil_pitch)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "coil_pitch_m": self.coil_pitch,
            "offset_m": list(self.offset),
            "harmonics": [{"amplitude_m": list(h.amplitude), "pitch_m": h.pitch,
                           "phase_rad": list(h.phase)} for h in self.harmonics],
            "bumps": [{"center_m": list(b.center), "width_m": b.width,
                       "height_m": list(b.height)} for b in self.bumps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MismatchField":
        return cls(
            offset=tuple(d.get("offset_m", (0.0, 0.0))),
            harmonics=tuple(Harmonic(tuple(h["amplitude_m"]), h["pitch_m"],
                                     tuple(h.get("phase_rad", (0.0, 0.0))))
                            for h in d.get("harmonics", [])),
            bumps=tuple(Bump(tuple(b["center_m"]), b["width_m"], tuple(b["height_m"]))
                        for b in d.get("bumps", [])),
            seed=d.get("seed"),
            coil_pitch=d.get("coil_pitch_m", 0.04),
        )

    def kernel_arrays(self):
        """Component arrays in the layout the simulation kernel expects."""
        nh = len(self.harmonics)
        nb = len(self.bumps)
        h_amp = np.array([h.amplitude for h in self.harmonics], dtype=float).reshape(nh, 2)
        h_pitch = np.array([h.pitch for h in self.harmonics], dtype=float).reshape(nh)
        h_phase = np.array([h.phase for h in self.harmonics], dtype=float).reshape(nh, 2)
        b_c = np.array([b.center for b in self.bumps], dtype=float).reshape(nb, 2)
        b_sig = np.array([b.width for b in self.bumps], dtype=float).reshape(nb)
        b_h = np.array([b.height for b in self.bumps], dtype=float).reshape(nb, 2)
        return (np.array(self.offset, dtype=float), h_amp, h_pitch, h_phase, b_c, b_sig, b_h)


def _pair(v):
    arr = np.asarray(v, dtype=float).reshape(2)
    return (float(arr[0]), float(arr[1]))


def delta_field(fld: MismatchField, q) -> np.ndarray:
    """Evaluate the frame discrepancy at x/y position(s) ``q`` (..., 2)."""
    q = np.asarray(q, dtype=float)
    qxy = q[..., :2]
    out = np.broadcast_to(np.asarray(fld.offset), qxy.shape).copy()
    for h in fld.harmonics:
        out += np.asarray(h.amplitude) * np.sin(2.0 * np.pi * qxy / h.pitch + np.asarray(h.phase))
    for b in fld.bumps:
        r2 = np.sum((qxy - np.asarray(b.center)) ** 2, axis=-1)
        out += np.asarray(b.height) * np.exp(-r2 / (2.0 * b.width ** 2))[..., None]
    return out


def coupling_matrix(e, tau: float, kappa: float) -> np.ndarray:
    """3x3 wrench map for frame error ``e`` = delta - eta (x, y)."""
    k = 2.0 * np.pi / tau
    cx, sx = np.cos(k * e[0]), np.sin(k * e[0])
    cy, sy = np.cos(k * e[1]), np.sin(k * e[1])
    return np.array([
        [cx, 0.0, kappa * sx],
        [0.0, cy, kappa * sy],
        [-kappa * sx, -kappa * sy, cx * cy],
    ])


def apply_wrench(state: PlantState, f_ref, fld: MismatchField, eta,
                 params: PlantParams) -> np.ndarray:
    """Physical wrench produced when ``f_ref`` is commutated with correction ``eta``."""
    e = delta_field(fld, state.q[:2]) - np.asarray(eta, dtype=float)
    return coupling_matrix(e, params.coil_pitch, params.kappa) @ np.asarray(f_ref, dtype=float)


def zoh_matrices(params: PlantParams):
    """Exact zero-order-hold maps per axis: x+ = Ad x + Bd f, x = (q, v)."""
    dt, m = params.dt, params.mass
    ad = np.empty((3, 2, 2))
    bd = np.empty((3, 2))
    for a in range(3):
        d, ks = params.damping[a], params.stiffness[a]
        if d == 0.0 and ks == 0.0:
            ad[a] = [[1.0, dt], [0.0, 1.0]]
            bd[a] = [dt * dt / (2.0 * m), dt / m]
            continue
        aug = np.zeros((3, 3))
        aug[0, 1] = 1.0
        aug[1, 0] = -ks / m
        aug[1, 1] = -d / m
        aug[1, 2] = 1.0 / m
        phi = expm(aug * dt)
        ad[a] = phi[:2, :2]
        bd[a] = phi[:2, 2]
    return ad, bd


def step_dynamics(state: PlantState, f_m, params: PlantParams, zoh=None) -> PlantState:
    """Advance one sample under the piecewise-constant wrench ``f_m`` plus gravity."""
    ad, bd = zoh if zoh is not None else zoh_matrices(params)
    f = np.asarray(f_m, dtype=float).copy()
    f[2] -= params.mass * params.gravity
    q = np.empty(3)
    v = np.empty(3)
    for a in range(3):
        q[a] = ad[a, 0, 0] * state.q[a] + ad[a, 0, 1] * state.v[a] + bd[a, 0] * f[a]
        v[a] = ad[a, 1, 0] * state.q[a] + ad[a, 1, 1] * state.v[a] + bd[a, 1] * f[a]
    return PlantState(q, v)

