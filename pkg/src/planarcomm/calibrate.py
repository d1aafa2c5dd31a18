"""Static calibration of the commutation frame by finite-difference gradient descent.

The only observable is the steady-state feedback force at a set of hold
positions. The objective J(eta) = sum_i ||F_c(q_i, eta)||_2 is minimized
with one-sided difference gradients and a backtracking step size.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Protocol

import numpy as np

from .sim import NumericalDivergence, uniform_grid, write_table_csv

log = logging.getLogger(__name__)


class NoDescent(RuntimeError):
    """Step size collapsed without a single accepted step."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ForceProbe(Protocol):
    count: int

    def measure_many(self, requests) -> List[np.ndarray]: ...


@dataclass(frozen=True, eq=False)
class GdConfig:
    positions: np.ndarray  # (n_p, 2) [m]
    eta0: tuple = (0.0, 0.0)
    step0: Optional[float] = None  # [m/N]; None sizes the first step to max_first_step
    perturbation: tuple = (4e-8, 4e-8)  # xi_j [m]
    max_iter: int = 50
    step_tol: float = 4e-8  # [m]
    rel_stagnation: float = 1e-3
    objective_tol: float = 1e-6  # [N]
    beta: float = 0.5
    max_first_step: float = 2e-3  # [m]

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if pos.shape[0] < 1:
            raise ValueError("need at least one calibration position")
        object.__setattr__(self, "positions", pos)
        xi = tuple(float(v) for v in np.broadcast_to(self.perturbation, (2,)))
        if any(v == 0.0 or not np.isfinite(v) for v in xi):
            raise ValueError("perturbation magnitudes must be finite and nonzero")
        object.__setattr__(self, "perturbation", xi)
        object.__setattr__(self, "eta0", tuple(float(v) for v in self.eta0))
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.step0 is not None and not self.step0 > 0:
            raise ValueError("step0 must be positive")

    @classmethod
    def for_pitch(cls, coil_pitch: float, grid_n: int = 6, workspace=None, **kw) -> "GdConfig":
        """Defaults scaled to the coil pitch on an n x n grid."""
        grid = uniform_grid(grid_n) if workspace is None else uniform_grid(grid_n, workspace)
        kw.setdefault("perturbation", (coil_pitch * 1e-6,) * 2)
        kw.setdefault("step_tol", coil_pitch * 1e-6)
        kw.setdefault("max_first_step", coil_pitch / 20.0)
        return cls(grid, **kw)

    @property
    def n_p(self) -> int:
        return self.positions.shape[0]

    @property
    def measurements_per_iteration(self) -> int:
        return self.n_p * (len(self.perturbation) + 1)


@dataclass
class GdRecord:
    k: int
    eta: np.ndarray
    objective: float
    force_norms: np.ndarray
    step_size: float
    accepted: bool
    step_norm: float


@dataclass
class GdTrace:
    records: List[GdRecord] = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    measurements: int = 0

    def accepted(self) -> List[GdRecord]:
        return [r for r in self.records if r.accepted]

    @property
    def iterations(self) -> int:
        return max(0, len(self.records) - 1)

    def columns(self) -> List[str]:
        n = len(self.records[0].force_norms) if self.records else 0
        return (["k", "eta_x_m", "eta_y_m", "J_N", "lambda_m_per_N", "accepted", "step_m"]
                + [f"fnorm_{i}_N" for i in range(n)])

    def to_csv(self, path, header: Optional[dict] = None):
        rows = [[r.k, r.eta[0], r.eta[1], r.objective, r.step_size, int(r.accepted),
                 r.step_norm, *r.force_norms] for r in self.records]
        head = dict(header or {}, converged=self.converged, reason=self.reason,
                    measurements=self.measurements)
        write_table_csv(path, head, self.columns(), np.array(rows, dtype=float).reshape(
            len(rows), -1), int_cols={0, 5})


@dataclass
class GradientEstimate:
    base_norms: np.ndarray  # (n_p,)
    gradients: np.ndarray  # (n_p, n_eta)
    saturated: np.ndarray  # (n_p,) bool

    @property
    def objective(self) -> float:
        return float(np.sum(self.base_norms))

    @property
    def mean_gradient(self) -> np.ndarray:
        return self.gradients.mean(axis=0)


def _limit(probe) -> float:
    cfg = getattr(probe, "config", None)
    return cfg.plant.eta_limit if cfg is not None else np.inf


def objective(eta, config: GdConfig, probe: ForceProbe) -> float:
    """J = sum of steady-state force norms over the calibration positions."""
    eta = np.asarray(eta, dtype=float)
    forces = probe.measure_many([(q, eta) for q in config.positions])
    return float(sum(np.linalg.norm(f) for f in forces))


def estimate_gradient(eta, config: GdConfig, probe: ForceProbe) -> GradientEstimate:
    """One-sided differences of ||F_c|| per position: n_p * (n_eta + 1) measurements."""
    eta = np.asarray(eta, dtype=float)
    xi = np.asarray(config.perturbation)
    n_eta = xi.shape[0]
    shifts = [np.zeros(n_eta)] + [xi[j] * np.eye(n_eta)[j] for j in range(n_eta)]
    requests = [(q, eta + s) for q in config.positions for s in shifts]
    forces = probe.measure_many(requests)
    norms = np.array([np.linalg.norm(f) for f in forces]).reshape(config.n_p, n_eta + 1)
    grads = (norms[:, 1:] - norms[:, :1]) / xi
    lim = _limit(probe)
    sat_base = np.any(np.abs(eta) >= lim)
    sat_pert = np.any(np.abs(eta[None, :] + np.diag(xi)) >= lim)
    saturated = np.full(config.n_p, bool(sat_base and sat_pert))
    return GradientEstimate(norms[:, 0], grads, saturated)


def gd_calibrate(config: GdConfig, probe: ForceProbe):
    """Finite-difference gradient descent with backtracking.

    Every iteration evaluates base and perturbed forces at the trial point,
    so it costs exactly n_p * (n_eta + 1) measurements. A trial is accepted
    when J decreases; otherwise the step size shrinks by ``beta`` and the
    previous gradient is reused. Returns ``(eta_star, trace)``.
    """
    trace = GdTrace()
    count0 = probe.count
    eta = np.array(config.eta0, dtype=float)
    est = estimate_gradient(eta, config, probe)
    g = est.mean_gradient
    lam = config.step0
    if lam is None:
        gn = float(np.linalg.norm(g))
        lam = config.max_first_step / gn if gn > 0 else 1.0
    trace.records.append(GdRecord(0, eta.copy(), est.objective, est.base_norms.copy(),
                                  lam, True, 0.0))
    any_accepted = False

    def finish(ok, reason):
        trace.converged = ok
        trace.reason = reason
        trace.measurements = probe.count - count0
        log.info("calibration stopped after %d iterations: %s", trace.iterations, reason)
        return eta.copy(), trace

    if est.objective < config.objective_tol:
        return finish(True, "objective below tolerance")
    for k in range(1, config.max_iter + 1):
        step = -lam * g
        trial = eta + step
        step_norm = float(np.linalg.norm(step))
        try:
            t_est = estimate_gradient(trial, config, probe)
        except NumericalDivergence:
            # an unstable hold counts as a failed trial (the probe already
            # counted the batch)
            t_est = None
        accepted = t_est is not None and t_est.objective < est.objective
        trace.records.append(GdRecord(
            k, trial.copy(), t_est.objective if t_est is not None else np.inf,
            t_est.base_norms.copy() if t_est is not None else np.full(config.n_p, np.inf),
            lam, accepted, step_norm))
        if accepted:
            any_accepted = True
            stagnant = est.objective - t_est.objective <= config.rel_stagnation * est.objective
            eta, est, g = trial, t_est, t_est.mean_gradient
            if est.objective < config.objective_tol:
                return finish(True, "objective below tolerance")
            if step_norm < config.step_tol and stagnant:
                return finish(True, "step and objective change below tolerance")
        else:
            lam *= config.beta
            if lam * float(np.linalg.norm(g)) < config.step_tol:
                if not any_accepted:
                    trace.measurements = probe.count - count0
                    raise NoDescent("step size collapsed without any decrease of J", trace)
                return finish(True, "step size below tolerance")
    return finish(False, "iteration limit reached")
