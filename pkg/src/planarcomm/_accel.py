"""Hot numeric kernels with an optional numba backend.

Set ``PLANARCOMM_DISABLE_NUMBA=1`` to force the pure-Python/numpy path.
Both variants stay importable (``*_py`` / ``*_nb``) so they can be compared
side by side, see ``benchmarks/bench_backends.py``.
"""

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_FLAG = os.environ.get("PLANARCOMM_DISABLE_NUMBA", "").strip().lower()
USE_NUMBA = numba is not None and _FLAG not in {"1", "true", "yes", "on"}

SAT_REGULATOR = 1
SAT_TOTAL = 2


def _jit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def _closed_loop(x, ctrl_coef, ctrl_state, ad, bd, mass, gravity,
                 off, h_amp, h_pitch, h_phase, b_c, b_sig, b_h,
                 tau, kappa,
                 reg_on, reg_gain, eta_fb, eta_static, clamp,
                 ref, acc, eta_ff, noise, div_limit,
                 out_q, out_e, out_fc, out_ff, out_fm,
                 out_eta_fb, out_eta, out_sat):
    # x: (3, 2) [position, velocity] per axis, updated in place.
    # ctrl_coef: (3, 4) [b0, b1, a1, ki_dt]; ctrl_state: (3, 3) [I, v_prev, y_prev].
    # eta_fb: (2,) regulator accumulator, updated in place.
    n = ref.shape[0]
    k_wave = 2.0 * math.pi / tau
    fc = np.zeros(3)
    fref = np.zeros(3)
    fm = np.zeros(3)
    eta = np.zeros(2)
    e = np.zeros(3)
    for k in range(n):
        sat = 0
        # rigid-body feedback on measured error
        for a in range(3):
            e[a] = ref[k, a] - (x[a, 0] + noise[k, a])
            v = e[a] + ctrl_state[a, 0]
            y = ctrl_coef[a, 0] * v + ctrl_coef[a, 1] * ctrl_state[a, 1] \
                - ctrl_coef[a, 2] * ctrl_state[a, 2]
            ctrl_state[a, 0] += ctrl_coef[a, 3] * e[a]
            ctrl_state[a, 1] = v
            ctrl_state[a, 2] = y
            fc[a] = y
        fz_ff = mass * (acc[k, 2] + gravity)
        fref[0] = fc[0] + mass * acc[k, 0]
        fref[1] = fc[1] + mass * acc[k, 1]
        fref[2] = fc[2] + fz_ff

        # commutation regulator, x/y only
        if reg_on:
            for j in range(2):
                cand = eta_fb[j] + reg_gain[j] * fc[j]
                if abs(cand) > clamp:
                    sat |= 1
                    if abs(cand) < abs(eta_fb[j]):
                        eta_fb[j] = cand
                else:
                    eta_fb[j] = cand
        for j in range(2):
            t = eta_static[j] + eta_fb[j] + eta_ff[k, j]
            if t > clamp:
                t = clamp
                sat |= 2
            elif t < -clamp:
                t = -clamp
                sat |= 2
            eta[j] = t

        # mismatch field at the true position
        qx = x[0, 0]
        qy = x[1, 0]
        dx = off[0]
        dy = off[1]
        for h in range(h_pitch.shape[0]):
            w = 2.0 * math.pi / h_pitch[h]
            dx += h_amp[h, 0] * math.sin(w * qx + h_phase[h, 0])
            dy += h_amp[h, 1] * math.sin(w * qy + h_phase[h, 1])
        for b in range(b_sig.shape[0]):
            rx = qx - b_c[b, 0]
            ry = qy - b_c[b, 1]
            g = math.exp(-(rx * rx + ry * ry) / (2.0 * b_sig[b] * b_sig[b]))
            dx += b_h[b, 0] * g
            dy += b_h[b, 1] * g

        # surrogate coupling C(delta - eta)
        cx = math.cos(k_wave * (dx - eta[0]))
        sx = math.sin(k_wave * (dx - eta[0]))
        cy = math.cos(k_wave * (dy - eta[1]))
        sy = math.sin(k_wave * (dy - eta[1]))
        fm[0] = cx * fref[0] + kappa * sx * fref[2]
        fm[1] = cy * fref[1] + kappa * sy * fref[2]
        fm[2] = -kappa * sx * fref[0] - kappa * sy * fref[1] + cx * cy * fref[2]

        for a in range(3):
            out_q[k, a] = x[a, 0]
            out_e[k, a] = e[a]
            out_fc[k, a] = fc[a]
            out_fm[k, a] = fm[a]
        out_ff[k, 0] = mass * acc[k, 0]
        out_ff[k, 1] = mass * acc[k, 1]
        out_ff[k, 2] = fz_ff
        out_eta_fb[k, 0] = eta_fb[0]
        out_eta_fb[k, 1] = eta_fb[1]
        out_eta[k, 0] = eta[0]
        out_eta[k, 1] = eta[1]
        out_sat[k] = sat

        # exact ZOH update, gravity on -z
        for a in range(3):
            f = fm[a]
            if a == 2:
                f -= mass * gravity
            p0 = x[a, 0]
            v0 = x[a, 1]
            x[a, 0] = ad[a, 0, 0] * p0 + ad[a, 0, 1] * v0 + bd[a, 0] * f
            x[a, 1] = ad[a, 1, 0] * p0 + ad[a, 1, 1] * v0 + bd[a, 1] * f

        if abs(e[0]) > div_limit or abs(e[1]) > div_limit or abs(e[2]) > div_limit:
            return k + 1
        if not (math.isfinite(x[0, 0]) and math.isfinite(x[1, 0]) and math.isfinite(x[2, 0])):
            return k + 1
    return n


def _gram_loops(a, b, signal_var, inv_lx, inv_ly, inv_px, inv_py, period):
    n = a.shape[0]
    m = b.shape[0]
    out = np.empty((n, m))
    w = math.pi / period
    for i in range(n):
        for j in range(m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            sx = math.sin(w * dx)
            sy = math.sin(w * dy)
            out[i, j] = signal_var * math.exp(
                -dx * dx * inv_lx - dy * dy * inv_ly
                - 2.0 * sx * sx * inv_px - 2.0 * sy * sy * inv_py)
    return out


def _gram_numpy(a, b, signal_var, inv_lx, inv_ly, inv_px, inv_py, period):
    d = a[:, None, :] - b[None, :, :]
    s = np.sin(np.pi * d / period)
    arg = (d[..., 0] ** 2 * inv_lx + d[..., 1] ** 2 * inv_ly
           + 2.0 * s[..., 0] ** 2 * inv_px + 2.0 * s[..., 1] ** 2 * inv_py)
    return signal_var * np.exp(-arg)


closed_loop_py = _closed_loop
closed_loop_nb = _jit(_closed_loop)
gram_py = _gram_numpy
gram_nb = _jit(_gram_loops)

closed_loop = closed_loop_nb if USE_NUMBA else closed_loop_py
gram = gram_nb if USE_NUMBA else gram_py


def backend():
    """Name of the active kernel backend."""
    return "numba" if USE_NUMBA else "python"
