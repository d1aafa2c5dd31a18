"""Moving-average (exposure) error metric and scenario comparison."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

EXPOSURE_TIME = 0.0144


class SeriesTooShort(ValueError):
    pass


@dataclass(frozen=True)
class MaConfig:
    window: float = EXPOSURE_TIME
    dt: float = 1e-4
    eval_window: Optional[tuple] = None  # (t1, t2) [s]

    def __post_init__(self):
        if not self.window > self.dt:
            raise ValueError("MA window must exceed the sample period")

    @property
    def n_taps(self) -> int:
        n = int(round(self.window / self.dt))
        return n if n % 2 == 1 else n + 1


def ma_filter(e, config: MaConfig) -> np.ndarray:
    """Centered moving average; output sample i is centered on input i + n//2."""
    e = np.asarray(e, dtype=float)
    n = config.n_taps
    if e.shape[0] < n:
        raise SeriesTooShort(f"series of {e.shape[0]} samples shorter than window of {n}")
    return np.convolve(e, np.full(n, 1.0 / n), mode="valid")


def ma_times(t, config: MaConfig) -> np.ndarray:
    """Center times matching :func:`ma_filter` output."""
    h = config.n_taps // 2
    t = np.asarray(t, dtype=float)
    return t[h:len(t) - h]


def peak_ma(t, e, config: MaConfig) -> float:
    """max |MA| over centers inside ``config.eval_window``."""
    ma = ma_filter(e, config)
    tc = ma_times(t, config)
    if config.eval_window is None:
        return float(np.max(np.abs(ma)))
    t1, t2 = config.eval_window
    sel = (tc >= t1 - 1e-12) & (tc <= t2 + 1e-12)
    if not np.any(sel):
        raise SeriesTooShort("no MA samples inside the evaluation window")
    return float(np.max(np.abs(ma[sel])))


def peak_ma_error(log, axis="y", config: Optional[MaConfig] = None) -> float:
    """Peak |MA| of a simulation log's tracking error during its cruise window."""
    ax = {"x": 0, "y": 1, "z": 2}.get(axis, axis)
    if config is None:
        config = MaConfig(dt=log.dt, eval_window=log.cruise)
    elif config.eval_window is None:
        config = MaConfig(config.window, config.dt, log.cruise)
    return peak_ma(log.t, log.e_pos[:, ax], config)


def summarize(mode: str, peak: float, rms_error: float,
              baseline_peak: Optional[float] = None) -> dict:
    out = {"mode": mode, "peak_ma_m": peak, "rms_error_m": rms_error}
    if baseline_peak is not None and baseline_peak > 0:
        out["reduction_vs_baseline_pct"] = 100.0 * (1.0 - peak / baseline_peak)
    return out


def rms_in_window(t, e, window: Sequence[float]) -> float:
    t = np.asarray(t)
    e = np.asarray(e)
    sel = (t >= window[0]) & (t <= window[1])
    return float(np.sqrt(np.mean(e[sel] ** 2))) if np.any(sel) else 0.0
