"""Gaussian-process model of the frame discrepancy, used as eta feedforward.

Each output axis is an independent zero-mean GP with the product kernel

    k(w, w') = s1 * exp(-sum_v d_v^2 / l_v - sum_v 2 sin^2(pi d_v / p) / g_v)

where d = w - w', l_v are squared RBF length scales [m^2], g_v the
dimensionless periodic scales and p the spatial period (coil pitch).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from . import _accel

log = logging.getLogger(__name__)

MODEL_FORMAT = "planarcomm-gp"
MODEL_VERSION = 1
_LOG2PI = math.log(2.0 * math.pi)


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


class DegenerateTargets(ValueError):
    pass


@dataclass(frozen=True)
class KernelParams:
    signal_var: float
    rbf_x: float
    rbf_y: float
    per_x: float
    per_y: float
    noise_var: float
    period: float = 0.04

    def __post_init__(self):
        for name in ("signal_var", "rbf_x", "rbf_y", "per_x", "per_y", "noise_var", "period"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v}")

    _TUNED = ("signal_var", "rbf_x", "rbf_y", "per_x", "per_y", "noise_var")

    def log_vector(self) -> np.ndarray:
        return np.log([getattr(self, k) for k in self._TUNED])

    def with_log_vector(self, theta) -> "KernelParams":
        return replace(self, **{k: float(np.exp(t)) for k, t in zip(self._TUNED, theta)})


def default_kernel_params(y, period: float) -> KernelParams:
    """Data-scaled starting point for hyperparameter search."""
    y = np.asarray(y, dtype=float)
    s1 = float(np.mean(y ** 2)) or 1e-12
    return KernelParams(s1, 0.03 ** 2, 0.03 ** 2, 4.0, 4.0, 1e-4 * s1, period)


def kernel_matrix(a, b, p: KernelParams) -> np.ndarray:
    a = np.ascontiguousarray(np.atleast_2d(a), dtype=float)
    b = np.ascontiguousarray(np.atleast_2d(b), dtype=float)
    return _accel.gram(a, b, p.signal_var, 1.0 / p.rbf_x, 1.0 / p.rbf_y,
                       1.0 / p.per_x, 1.0 / p.per_y, p.period)


def kernel_eval(w, w2, p: KernelParams) -> float:
    return float(kernel_matrix(np.reshape(w, (1, 2)), np.reshape(w2, (1, 2)), p)[0, 0])


@dataclass
class GpModel:
    inputs: np.ndarray  # (N, 2) [m]
    targets: np.ndarray  # (N,) [m]
    params: KernelParams
    chol: np.ndarray  # lower factor of K + (noise + jitter) I
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.targets.shape[0]


def fit_axis(inputs, targets, params: KernelParams) -> GpModel:
    """Factorize K + noise I, escalating diagonal jitter up to 1e-8 * s1."""
    w = np.ascontiguousarray(inputs, dtype=float).reshape(-1, 2)
    y = np.asarray(targets, dtype=float).reshape(-1)
    if w.shape[0] != y.shape[0] or w.shape[0] < 1:
        raise ValueError("inputs and targets must be non-empty and aligned")
    k = kernel_matrix(w, w, params)
    n = y.shape[0]
    for jitter in (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8):
        try:
            chol = cholesky(k + (params.noise_var + jitter * params.signal_var) * np.eye(n),
                            lower=True, check_finite=False)
        except LinAlgError:
            continue
        alpha = cho_solve((chol, True), y, check_finite=False)
        return GpModel(w, y, params, chol, alpha, jitter * params.signal_var)
    raise NotPositiveDefinite("Gram matrix not positive definite after jitter escalation")


def gp_predict(model: GpModel, w_star):
    """Posterior mean and variance at query point(s) ``w_star`` (..., 2)."""
    q = np.atleast_2d(np.asarray(w_star, dtype=float))
    ks = kernel_matrix(model.inputs, q, model.params)
    mean = ks.T @ model.alpha
    v = solve_triangular(model.chol, ks, lower=True, check_finite=False)
    var = model.params.signal_var - np.sum(v * v, axis=0)
    if np.any(var < -1e-12 * model.params.signal_var):
        log.warning("negative predictive variance %.3g clamped", var.min())
    var = np.maximum(var, 0.0)
    if np.ndim(w_star) == 1:
        return float(mean[0]), float(var[0])
    return mean, var


def log_marginal_likelihood(model: GpModel) -> float:
    return float(-0.5 * model.targets @ model.alpha
                 - np.sum(np.log(np.diag(model.chol)))
                 - 0.5 * model.n * _LOG2PI)


@dataclass(frozen=True)
class TuneBudget:
    restarts: int = 3
    max_evals: int = 400
    subsample: Optional[int] = None
    seed: int = 0
    log_span: float = 10.0
    # correlation lengths may not shrink below this multiple of the median
    # nearest-neighbour spacing, otherwise the kernel can mimic white noise
    min_length_ratio: float = 2.0


def _neg_lml(theta, base, w, y):
    try:
        p = base.with_log_vector(theta)
        return -log_marginal_likelihood(fit_axis(w, y, p))
    except (NotPositiveDefinite, ValueError):
        return np.inf


def _length_floors(w, period, ratio) -> dict:
    """Lower bounds on the RBF and periodic scales (indices into log_vector)."""
    if ratio <= 0 or len(w) < 2:
        return {}
    d = np.sqrt(((w[:, None, :] - w[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    h = ratio * float(np.median(d.min(axis=1)))
    if not h > 0:
        return {}
    rbf = h * h
    per = 2.0 * math.sin(min(math.pi * h / period, math.pi / 2)) ** 2
    return {1: rbf, 2: rbf, 3: per, 4: per}


def tune_hyperparams(inputs, targets, initial: KernelParams,
                     budget: TuneBudget = TuneBudget()) -> KernelParams:
    """Multi-start Nelder-Mead on the log hyperparameters, maximizing LML.

    The first start is ``initial`` itself, the rest are log-uniform
    perturbations of it. Returns the best parameters seen, which never have
    a lower LML than ``initial`` on the data used for tuning.
    """
    if budget.restarts < 1:
        raise ValueError("budget needs at least one start")
    w = np.asarray(inputs, dtype=float).reshape(-1, 2)
    y = np.asarray(targets, dtype=float).reshape(-1)
    rng = np.random.default_rng(budget.seed)
    if budget.subsample is not None and budget.subsample < len(y):
        pick = np.sort(rng.choice(len(y), budget.subsample, replace=False))
        w, y = w[pick], y[pick]
    theta0 = initial.log_vector()
    bounds = [(t - budget.log_span, t + budget.log_span) for t in theta0]
    floors = _length_floors(w, initial.period, budget.min_length_ratio)
    for i, f in floors.items():
        lo = max(bounds[i][0], math.log(f))
        bounds[i] = (lo, max(bounds[i][1], lo + 1.0))
    theta0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])
    best_theta, best_val = theta0, _neg_lml(theta0, initial, w, y)
    for r in range(budget.restarts):
        start = theta0 if r == 0 else theta0 + rng.uniform(-2.0, 2.0, theta0.shape)
        start = np.clip(start, [b[0] for b in bounds], [b[1] for b in bounds])
        res = minimize(_neg_lml, start, args=(initial, w, y), method="Nelder-Mead",
                       bounds=bounds,
                       options={"maxfev": budget.max_evals, "xatol": 1e-4, "fatol": 1e-6})
        if res.fun < best_val:
            best_theta, best_val = res.x, float(res.fun)
    return initial.with_log_vector(best_theta)


def bfr(targets, predictions) -> float:
    """Best fit ratio [%]."""
    t = np.asarray(targets, dtype=float)
    p = np.asarray(predictions, dtype=float)
    if t.shape[0] < 2:
        raise ValueError("BFR needs at least two samples")
    den = np.linalg.norm(t - t.mean())
    if den == 0.0:
        raise DegenerateTargets("targets are constant")
    return 100.0 * max(1.0 - np.linalg.norm(t - p) / den, 0.0)


@dataclass
class GpFeedforward:
    """Diagonal feedforward: one GP per eta axis."""

    x: GpModel
    y: GpModel

    def predict(self, w):
        mx, vx = gp_predict(self.x, w)
        my, vy = gp_predict(self.y, w)
        return np.stack([mx, my], axis=-1), np.stack([vx, vy], axis=-1)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "inputs_m": self.x.inputs.tolist(),
            "axes": {
                name: {"params": asdict(m.params), "targets_m": m.targets.tolist()}
                for name, m in (("x", self.x), ("y", self.y))
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GpFeedforward":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError("not a planarcomm GP model file")
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported GP model version {d.get('version')}")
        w = np.asarray(d["inputs_m"], dtype=float)
        models = {name: fit_axis(w, ax["targets_m"], KernelParams(**ax["params"]))
                  for name, ax in d["axes"].items()}
        return cls(models["x"], models["y"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "GpFeedforward":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def gp_fit(inputs, targets_xy, params_xy: Sequence[KernelParams]) -> GpFeedforward:
    """Fit both axes on shared inputs; ``targets_xy`` is (N, 2)."""
    t = np.asarray(targets_xy, dtype=float).reshape(-1, 2)
    return GpFeedforward(fit_axis(inputs, t[:, 0], params_xy[0]),
                         fit_axis(inputs, t[:, 1], params_xy[1]))


def feedforward_eval(ff: GpFeedforward, r) -> np.ndarray:
    """eta_ff = posterior means at reference x/y position(s) ``r``."""
    r = np.asarray(r, dtype=float)
    pts = np.atleast_2d(r[..., :2])
    lo = np.min(ff.x.inputs, axis=0)
    hi = np.max(ff.x.inputs, axis=0)
    outside = np.any((pts < lo - 1e-9) | (pts > hi + 1e-9), axis=1)
    if np.any(outside):
        log.warning("%d feedforward queries outside the training hull; prior reverts to 0",
                    int(outside.sum()))
    mean, _ = ff.predict(pts)
    return mean[0] if r.ndim == 1 else mean
