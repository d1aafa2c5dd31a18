"""Closed-loop simulation engine and experiment protocols.

One sample of the loop: measure q, form the tracking error, rigid-body
feedback + feedforward, update eta (per mode), commutate through the
mismatched coupling and advance the mover by one ZOH step.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np

from . import _accel
from .control import (CommutationLoopParams, PositionLoopParams, design_position_controller)
from .gpff import GpFeedforward, feedforward_eval
from .plant import WORKSPACE, MismatchField, PlantParams, zoh_matrices
from .trajectory import ProfileParams, plan_fourth_order

MODES = ("baseline", "static-calibrated", "dynamic", "dynamic+ff")
DIVERGENCE_LIMIT = 1e-2


class NumericalDivergence(RuntimeError):
    """Tracking error left the valid regime; ``log`` holds the partial record."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


def default_workers() -> int:
    return max(1, int(os.environ.get("PLANARCOMM_WORKERS", "1")))


@dataclass(frozen=True)
class ScenarioConfig:
    mode: str = "baseline"
    plant: PlantParams = field(default_factory=PlantParams)
    mismatch: MismatchField = field(default_factory=lambda: MismatchField.random(7))
    position_loop: PositionLoopParams = field(default_factory=PositionLoopParams)
    commutation: CommutationLoopParams = field(default_factory=CommutationLoopParams)
    profile: ProfileParams = field(default_factory=ProfileParams)
    start: tuple = (0.0, -0.025)  # x/y where the scan begins [m]
    eta_init: tuple = (0.0, 0.0)
    seed: int = 0
    pre_roll: float = 4.0
    post_roll: float = 0.05
    noise_std: float = 0.0
    gp: Optional[GpFeedforward] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.pre_roll < 0 or self.post_roll < 0 or self.noise_std < 0:
            raise ValueError("pre_roll, post_roll and noise_std must be non-negative")
        # the loop runs at the plant rate
        pl = self.position_loop
        if pl.mass != self.plant.mass or pl.dt != self.plant.dt:
            object.__setattr__(self, "position_loop",
                               replace(pl, mass=self.plant.mass, dt=self.plant.dt))
        if self.profile.dt != self.plant.dt:
            object.__setattr__(self, "profile", replace(self.profile, dt=self.plant.dt))
        if self.mismatch.coil_pitch != self.plant.coil_pitch:
            raise ValueError("field and plant disagree on coil pitch")

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "plant": asdict(self.plant),
            "field": self.mismatch.to_dict(),
            "position_loop": asdict(self.position_loop),
            "commutation": asdict(self.commutation),
            "profile": asdict(self.profile),
            "start": list(self.start),
            "eta_init": list(self.eta_init),
            "seed": self.seed,
            "pre_roll": self.pre_roll,
            "post_roll": self.post_roll,
            "noise_std": self.noise_std,
            "gp": self.gp.fingerprint() if self.gp is not None else None,
        }
        return json.loads(json.dumps(d, default=_jsonable))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


LOG_COLUMNS = (
    ["t_s"]
    + [f"r_{a}_m" for a in "xyz"]
    + [f"q_{a}_m" for a in "xyz"]
    + [f"e_{a}_m" for a in "xyz"]
    + [f"fc_{a}_N" for a in "xyz"]
    + [f"ff_{a}_N" for a in "xyz"]
    + ["eta_fb_x_m", "eta_fb_y_m", "eta_ff_x_m", "eta_ff_y_m", "eta_x_m", "eta_y_m"]
    + [f"fm_{a}_N" for a in "xyz"]
    + ["saturation"]
)


@dataclass
class SimLog:
    t: np.ndarray
    r: np.ndarray
    q: np.ndarray
    e_pos: np.ndarray
    f_c: np.ndarray
    f_ff: np.ndarray
    eta_fb: np.ndarray
    eta_ff: np.ndarray
    eta: np.ndarray
    f_m: np.ndarray
    saturation: np.ndarray
    header: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return float(self.header.get("dt", self.t[1] - self.t[0]))

    @property
    def cruise(self):
        c = self.header.get("cruise")
        return tuple(c) if c is not None else None

    @property
    def mode(self) -> str:
        return self.header.get("mode", "")

    def __len__(self):
        return self.t.shape[0]

    def truncated(self, n: int) -> "SimLog":
        kw = {k: getattr(self, k)[:n] for k in
              ("t", "r", "q", "e_pos", "f_c", "f_ff", "eta_fb", "eta_ff", "eta", "f_m", "saturation")}
        return SimLog(header=dict(self.header, completed=False, samples=n), **kw)

    def table(self) -> np.ndarray:
        return np.column_stack([self.t, self.r, self.q, self.e_pos, self.f_c, self.f_ff,
                                self.eta_fb, self.eta_ff, self.eta, self.f_m,
                                self.saturation.astype(float)])

    def to_csv(self, path, manifest: Optional[dict] = None):
        head = dict(self.header)
        if manifest is not None:
            head["manifest"] = manifest
        write_table_csv(path, head, LOG_COLUMNS, self.table(), int_cols={len(LOG_COLUMNS) - 1})

    @classmethod
    def from_csv(cls, path) -> "SimLog":
        head, cols, data = read_table_csv(path)
        if cols != LOG_COLUMNS:
            raise ValueError(f"{path}: unexpected columns")
        c = np.cumsum([0, 1, 3, 3, 3, 3, 3, 2, 2, 2, 3, 1])
        parts = [data[:, c[i]:c[i + 1]] for i in range(len(c) - 1)]
        return cls(parts[0][:, 0], *parts[1:10], parts[10][:, 0].astype(np.int8), header=head)


def write_table_csv(path, header: dict, columns, data, int_cols=()):
    """CSV with a leading ``# {json}`` manifest line and a header row."""
    buf = io.StringIO()
    buf.write("# " + json.dumps(header, sort_keys=True, default=_jsonable) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in np.asarray(data):
        w.writerow([str(int(v)) if i in int_cols else repr(float(v)) for i, v in enumerate(row)])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_table_csv(path):
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError(f"{path}: missing '#' manifest line")
        header = json.loads(first[1:])
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: missing column header")
    cols = rows[0]
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    return header, cols, data.reshape(-1, len(cols))


# ---------------------------------------------------------------------------
# core loop

def _run(config: ScenarioConfig, ref, acc, eta_ff, x0, regulator: bool,
         eta_static, eta_fb0, t0: float = 0.0, header=None) -> SimLog:
    plant = config.plant
    n = ref.shape[0]
    ad, bd = zoh_matrices(plant)
    coef = design_position_controller(config.position_loop)
    cstate = np.zeros((3, 3))
    x = np.array(x0, dtype=float).reshape(3, 2).copy()
    fld = config.mismatch.kernel_arrays()
    clamp = plant.eta_limit
    eta_fb = np.clip(np.array(eta_fb0, dtype=float), -clamp, clamp)
    gain = config.commutation.step_gain(plant)
    if config.noise_std > 0:
        noise = np.random.default_rng(config.seed).normal(0.0, config.noise_std, (n, 3))
    else:
        noise = np.zeros((n, 3))
    out = {k: np.empty((n, w)) for k, w in
           (("q", 3), ("e", 3), ("fc", 3), ("ff", 3), ("fm", 3), ("eta_fb", 2), ("eta", 2))}
    sat = np.empty(n, dtype=np.int8)
    done = _accel.closed_loop(
        x, coef, cstate, ad, bd, plant.mass, plant.gravity, *fld,
        plant.coil_pitch, plant.kappa,
        bool(regulator), gain, eta_fb, np.asarray(eta_static, dtype=float), clamp,
        np.ascontiguousarray(ref), np.ascontiguousarray(acc), np.ascontiguousarray(eta_ff),
        noise, DIVERGENCE_LIMIT,
        out["q"], out["e"], out["fc"], out["ff"], out["fm"], out["eta_fb"], out["eta"], sat)
    hdr = {"dt": plant.dt, "config_hash": config.config_hash(), "mode": config.mode,
           "samples": int(n), "completed": True, "backend": _accel.backend()}
    hdr.update(header or {})
    simlog = SimLog(t0 + np.arange(n) * plant.dt, ref, out["q"], out["e"], out["fc"], out["ff"],
                    out["eta_fb"], eta_ff, out["eta"], out["fm"], sat, hdr)
    if done < n:
        part = simlog.truncated(done)
        raise NumericalDivergence(
            f"tracking error exceeded {DIVERGENCE_LIMIT} m at t={done * plant.dt:.4f} s", part)
    return simlog


def scenario_reference(config: ScenarioConfig):
    """Reference position/acceleration arrays and absolute cruise window."""
    plant = config.plant
    prof = plan_fourth_order(config.profile)
    dt = plant.dt
    n_pre = int(round(config.pre_roll / dt))
    n_post = int(round(config.post_roll / dt))
    n = n_pre + len(prof.t) + n_post
    ax = config.profile.axis_index
    ref = np.zeros((n, 3))
    acc = np.zeros((n, 3))
    ref[:, 0], ref[:, 1] = config.start
    ref[n_pre:n_pre + len(prof.t), ax] += prof.r
    ref[n_pre + len(prof.t):, ax] += prof.r[-1]
    # interval-mean acceleration: a force held over [t_k, t_k+1] then
    # reproduces the reference velocity exactly at every sample
    v_next = np.append(prof.v[1:], 0.0)
    acc[n_pre:n_pre + len(prof.t), ax] = (v_next - prof.v) / dt
    t_pre = n_pre * dt
    cruise = (t_pre + prof.cruise[0], t_pre + prof.cruise[1])
    return ref, acc, cruise


def run_scenario(config: ScenarioConfig) -> SimLog:
    """Run the scan experiment for ``config.mode``; raises NumericalDivergence."""
    ref, acc, cruise = scenario_reference(config)
    n = ref.shape[0]
    eta_ff = np.zeros((n, 2))
    if config.mode == "dynamic+ff":
        if config.gp is None:
            raise ValueError("mode dynamic+ff needs a fitted GP feedforward")
        uniq, inv = np.unique(ref[:, :2], axis=0, return_inverse=True)
        eta_ff = feedforward_eval(config.gp, uniq)[inv.reshape(-1)]
    eta_static = np.zeros(2)
    eta_fb0 = np.zeros(2)
    if config.mode == "static-calibrated":
        eta_static = np.asarray(config.eta_init, dtype=float)
    elif config.mode in ("dynamic", "dynamic+ff"):
        eta_fb0 = np.asarray(config.eta_init, dtype=float)
    x0 = np.zeros((3, 2))
    x0[:, 0] = ref[0]
    regulator = config.mode in ("dynamic", "dynamic+ff")
    return _run(config, ref, acc, eta_ff, x0, regulator, eta_static, eta_fb0,
                header={"cruise": list(cruise), "scan_axis": config.profile.axis})


def hold(config: ScenarioConfig, q_hold, duration: float, eta=(0.0, 0.0),
         regulator: bool = False) -> SimLog:
    """Set-point hold at x/y ``q_hold`` starting from rest.

    With ``regulator`` False the frame correction is the constant ``eta``;
    otherwise ``eta`` seeds the regulator.
    """
    n = int(round(duration / config.plant.dt))
    ref = np.zeros((n, 3))
    ref[:, 0], ref[:, 1] = q_hold[0], q_hold[1]
    x0 = np.zeros((3, 2))
    x0[:, 0] = ref[0]
    zeros2 = np.zeros(2)
    if regulator:
        return _run(config, ref, np.zeros((n, 3)), np.zeros((n, 2)), x0, True, zeros2, eta)
    return _run(config, ref, np.zeros((n, 3)), np.zeros((n, 2)), x0, False, eta, zeros2)


def settle_times(config: ScenarioConfig):
    """Default (T_settle, T_avg, T_hold) from the loop bandwidths."""
    f_pos = float(np.min(config.position_loop.bandwidths))
    f_bw = float(np.min(config.commutation.bandwidths))
    return 20.0 / f_pos, 10.0 / f_pos, 5.0 / f_bw


def measure_steady_state_force(config: ScenarioConfig, q_hold, eta,
                               t_settle: Optional[float] = None,
                               t_avg: Optional[float] = None) -> np.ndarray:
    """Average feedback force over [t_settle, t_settle + t_avg] of a fixed-eta hold."""
    d_settle, d_avg, _ = settle_times(config)
    t_settle = d_settle if t_settle is None else t_settle
    t_avg = d_avg if t_avg is None else t_avg
    f_pos = float(np.min(config.position_loop.bandwidths))
    if t_settle < 20.0 / f_pos - 1e-12 or t_avg < 10.0 / f_pos - 1e-12:
        raise ValueError("settle/average windows shorter than 20/f_pos and 10/f_pos")
    n_settle = int(round(t_settle / config.plant.dt))
    simlog = hold(config, q_hold, t_settle + t_avg, eta=eta, regulator=False)
    return simlog.f_c[n_settle:].mean(axis=0)


class SteadyStateProbe:
    """Steady-state force measurements on a fixed plant; counts every call."""

    def __init__(self, config: ScenarioConfig, t_settle=None, t_avg=None, workers=None):
        self.config = config
        self.t_settle = t_settle
        self.t_avg = t_avg
        self.workers = default_workers() if workers is None else workers
        self.count = 0

    def measure(self, q, eta) -> np.ndarray:
        self.count += 1
        return measure_steady_state_force(self.config, q, eta, self.t_settle, self.t_avg)

    def measure_many(self, requests) -> List[np.ndarray]:
        requests = list(requests)
        self.count += len(requests)
        fn = lambda qe: measure_steady_state_force(self.config, qe[0], qe[1],  # noqa: E731
                                                   self.t_settle, self.t_avg)
        if self.workers > 1 and len(requests) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                return list(pool.map(fn, requests))
        return [fn(r) for r in requests]


# ---------------------------------------------------------------------------
# eta grid collection

@dataclass
class EtaDataset:
    index: np.ndarray  # (N,) grid index
    positions: np.ndarray  # (N, 2) [m]
    eta: np.ndarray  # (N, 2) [m]
    skipped: list = field(default_factory=list)
    header: dict = field(default_factory=dict)

    COLUMNS = ["i", "x_m", "y_m", "eta_x_m", "eta_y_m"]

    def __len__(self):
        return int(self.index.shape[0])

    def subset(self, rows) -> "EtaDataset":
        rows = np.asarray(rows)
        return EtaDataset(self.index[rows], self.positions[rows], self.eta[rows],
                          list(self.skipped), dict(self.header))

    def to_csv(self, path, manifest: Optional[dict] = None):
        head = dict(self.header, skipped=[int(i) for i in self.skipped], rows=len(self))
        if manifest is not None:
            head["manifest"] = manifest
        data = np.column_stack([self.index, self.positions, self.eta])
        write_table_csv(path, head, self.COLUMNS, data, int_cols={0})

    @classmethod
    def from_csv(cls, path) -> "EtaDataset":
        head, cols, data = read_table_csv(path)
        if cols != cls.COLUMNS:
            raise ValueError(f"{path}: expected columns {cls.COLUMNS}, got {cols}")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"{path}: non-finite values")
        return cls(data[:, 0].astype(int), data[:, 1:3], data[:, 3:5],
                   list(head.get("skipped", [])), head)


def uniform_grid(n: int, workspace=WORKSPACE) -> np.ndarray:
    """n x n grid spanning the workspace, row-major in y then x."""
    (x0, x1), (y0, y1) = workspace
    xs = np.linspace(x0, x1, n)
    ys = np.linspace(y0, y1, n)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def random_points(n: int, seed: int, workspace=WORKSPACE, margin: float = 0.0) -> np.ndarray:
    (x0, x1), (y0, y1) = workspace
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(x0 + margin, x1 - margin, n),
                            rng.uniform(y0 + margin, y1 - margin, n)])


def settled_eta(config: ScenarioConfig, q_hold, t_hold: float) -> np.ndarray:
    """Regulator output averaged over the final 10% of a set-point hold."""
    simlog = hold(config, q_hold, t_hold, eta=config.eta_init, regulator=True)
    n = len(simlog)
    return simlog.eta_fb[n - max(1, n // 10):].mean(axis=0)


def collect_eta_grid(config: ScenarioConfig, grid, t_hold: Optional[float] = None,
                     workers: Optional[int] = None) -> EtaDataset:
    """Settled regulator output at every grid point (points run independently)."""
    grid = np.asarray(grid, dtype=float).reshape(-1, 2)
    _, _, d_hold = settle_times(config)
    t_hold = d_hold if t_hold is None else t_hold
    if t_hold < d_hold - 1e-12:
        raise ValueError(f"t_hold must be at least 5/f_bw = {d_hold:.3g} s")
    workers = default_workers() if workers is None else workers

    def one(q):
        try:
            return settled_eta(config, q, t_hold)
        except NumericalDivergence:
            return None

    if workers > 1 and len(grid) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, grid))
    else:
        results = [one(q) for q in grid]
    keep = [i for i, r in enumerate(results) if r is not None]
    skipped = [i for i, r in enumerate(results) if r is None]
    eta = np.array([results[i] for i in keep]).reshape(-1, 2)
    return EtaDataset(np.array(keep, dtype=int), grid[keep], eta, skipped,
                      {"config_hash": config.config_hash(), "t_hold": t_hold})
