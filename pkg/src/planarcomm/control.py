"""Rigid-body position loop, rigid-body feedforward and commutation regulator."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .plant import PlantParams


def _per_axis(v, n):
    return np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()


@dataclass(frozen=True)
class PositionLoopParams:
    """Loop shape of the per-axis PID: crossover ``bandwidth_hz``, integrator
    corner at ``integrator_ratio * f``, lead from ``f / lead_ratio`` to
    ``f * lead_ratio``."""

    bandwidth_hz: object = 150.0
    integrator_ratio: float = 0.1
    lead_ratio: float = 3.0
    mass: float = 10.0
    dt: float = 1e-4

    def __post_init__(self):
        bw = _per_axis(self.bandwidth_hz, 3)
        if np.any(bw <= 0):
            raise ValueError("bandwidth_hz must be positive")
        if not self.lead_ratio > 1.0:
            raise ValueError("lead_ratio must exceed 1")
        if not self.integrator_ratio > 0:
            raise ValueError("integrator_ratio must be positive")

    @property
    def bandwidths(self) -> np.ndarray:
        return _per_axis(self.bandwidth_hz, 3)


def _double_integrator_zoh(z, mass, dt):
    return dt * dt * (z + 1.0) / (2.0 * mass * (z - 1.0) ** 2)


def _unit_gain_coefficients(f, integrator_ratio, lead_ratio, dt):
    wc = 2.0 * np.pi * f
    wz = wc / lead_ratio
    wp = wc * lead_ratio
    c = 2.0 / dt
    b0 = wp * (wz + c) / (wz * (wp + c))
    b1 = wp * (wz - c) / (wz * (wp + c))
    a1 = (wp - c) / (wp + c)
    ki_dt = wc * integrator_ratio * dt
    return b0, b1, a1, ki_dt


def controller_response(coef_row, z):
    """Discrete frequency response of one axis' controller at ``z``."""
    b0, b1, a1, ki_dt = coef_row
    integ = 1.0 + ki_dt / (z - 1.0)
    lead = (b0 + b1 / z) / (1.0 + a1 / z)
    return integ * lead


def design_position_controller(params: PositionLoopParams) -> np.ndarray:
    """Coefficient table (3, 4) = [b0, b1, a1, ki_dt] per axis.

    The proportional gain is folded into b0/b1 and chosen so that the
    discrete loop gain with the ZOH double integrator 1/(m s^2) is exactly
    one at the requested crossover.
    """
    coef = np.empty((3, 4))
    for a, f in enumerate(params.bandwidths):
        row = np.array(_unit_gain_coefficients(f, params.integrator_ratio,
                                               params.lead_ratio, params.dt))
        z = np.exp(1j * 2.0 * np.pi * f * params.dt)
        gain = abs(controller_response(row, z) * _double_integrator_zoh(z, params.mass, params.dt))
        row[:2] /= gain
        coef[a] = row
    return coef


class PositionController:
    """Per-axis discrete PID with tamed derivative.

    Forward-Euler integrator feeding a Tustin lead filter; state layout is
    shared with the simulation kernel: (3, 3) = [integrator, v_prev, y_prev].
    """

    def __init__(self, params: PositionLoopParams):
        self.params = params
        self.coef = design_position_controller(params)
        self.state = np.zeros((3, 3))

    def reset(self):
        self.state[:] = 0.0

    def step(self, e_pos) -> np.ndarray:
        e = np.asarray(e_pos, dtype=float)
        out = np.empty(3)
        for a in range(3):
            b0, b1, a1, ki_dt = self.coef[a]
            integ, v_prev, y_prev = self.state[a]
            v = e[a] + integ
            y = b0 * v + b1 * v_prev - a1 * y_prev
            self.state[a] = (integ + ki_dt * e[a], v, y)
            out[a] = y
        return out


def position_feedback(e_pos, controller: PositionController) -> np.ndarray:
    """One sample of rigid-body feedback: returns F_c [N]."""
    return controller.step(e_pos)


def rigid_body_feedforward(a_ref, mass: float, gravity: float = 9.81) -> np.ndarray:
    """Acceleration plus gravity compensation: m a_ref + (0, 0, m g)."""
    f = mass * np.asarray(a_ref, dtype=float)
    f = f + np.array([0.0, 0.0, mass * gravity])
    return f


def nominal_sensitivity(plant: PlantParams) -> float:
    """Static force per metre of frame error at hover: kappa k m g [N/m]."""
    return plant.kappa * plant.wavenumber * plant.mass * plant.gravity


@dataclass(frozen=True)
class CommutationLoopParams:
    """Integrating frame regulator. ``sensitivity`` of None means nominal."""

    bandwidth_hz: object = 1.5
    sensitivity: Optional[float] = None
    sign: tuple = (-1.0, -1.0)

    def __post_init__(self):
        if np.any(_per_axis(self.bandwidth_hz, 2) <= 0):
            raise ValueError("commutation bandwidth_hz must be positive")
        if self.sensitivity is not None and not self.sensitivity > 0:
            raise ValueError("sensitivity must be positive")
        s = tuple(float(v) for v in _per_axis(self.sign, 2))
        if any(v not in (-1.0, 1.0) for v in s):
            raise ValueError("sign entries must be +1 or -1")
        object.__setattr__(self, "sign", s)

    @property
    def bandwidths(self) -> np.ndarray:
        return _per_axis(self.bandwidth_hz, 2)

    def resolved_sensitivity(self, plant: PlantParams) -> float:
        return nominal_sensitivity(plant) if self.sensitivity is None else float(self.sensitivity)

    def step_gain(self, plant: PlantParams) -> np.ndarray:
        """Per-sample increment of eta per newton of feedback force."""
        s_eta = self.resolved_sensitivity(plant)
        return np.asarray(self.sign) * 2.0 * np.pi * self.bandwidths / s_eta * plant.dt


@dataclass
class CommutationState:
    eta: np.ndarray = field(default_factory=lambda: np.zeros(2))
    integrator: np.ndarray = field(default_factory=lambda: np.zeros(2))
    enabled: bool = True
    saturated: bool = False

    def __post_init__(self):
        self.eta = np.array(self.eta, dtype=float).reshape(2)
        self.integrator = np.array(self.integrator, dtype=float).reshape(2)


def commutation_regulator_step(f_c, cstate: CommutationState, params: CommutationLoopParams,
                               plant: PlantParams) -> CommutationState:
    """Integrate the x/y feedback force into the frame correction.

    Saturation at +-coil_pitch/4 freezes the accumulator on that axis
    (it may still move back toward zero).
    """
    if not cstate.enabled:
        return replace(cstate, eta=cstate.eta.copy(), integrator=cstate.integrator.copy())
    gain = params.step_gain(plant)
    limit = plant.eta_limit
    acc = cstate.integrator.copy()
    sat = False
    for j in range(2):
        cand = acc[j] + gain[j] * float(f_c[j])
        if abs(cand) > limit:
            sat = True
            if abs(cand) < abs(acc[j]):
                acc[j] = cand
        else:
            acc[j] = cand
    return CommutationState(eta=acc.copy(), integrator=acc, enabled=True, saturated=sat)


def total_frame_correction(cstate: CommutationState, eta_ff, limit: float):
    """Regulator output plus feedforward, clipped to +-limit.

    Returns ``(eta, saturated)``.
    """
    eta = cstate.eta + np.asarray(eta_ff, dtype=float)
    clipped = np.clip(eta, -limit, limit)
    return clipped, bool(np.any(clipped != eta))
