"""Time the numba kernels against the pure-numpy/Python fallbacks.

    python benchmarks/bench_backends.py [--samples N] [--points N]

The closed-loop kernel is timed on a set-point hold, the Gram kernel on a
square training set. Outputs are checked for agreement before timing.
"""

import argparse
import time

import numpy as np

from planarcomm import _accel
from planarcomm.plant import MismatchField
from planarcomm.sim import ScenarioConfig, hold


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_closed_loop(samples, repeat):
    cfg = ScenarioConfig(mismatch=MismatchField.random(7))
    duration = samples * cfg.plant.dt
    out = {}
    logs = {}
    for name, fn in (("python", _accel.closed_loop_py), ("numba", _accel.closed_loop_nb)):
        _accel.closed_loop = fn
        run = lambda: hold(cfg, (0.02, -0.03), duration, regulator=True)  # noqa: E731
        logs[name] = run()  # also warms the JIT
        out[name] = _best(run, repeat)
    _accel.closed_loop = _accel.closed_loop_nb if _accel.USE_NUMBA else _accel.closed_loop_py
    diff = np.max(np.abs(logs["python"].q - logs["numba"].q))
    return out, diff


def bench_gram(points, repeat):
    rng = np.random.default_rng(0)
    w = rng.uniform(-0.1, 0.1, (points, 2))
    args = (2e-10, 1 / 0.03 ** 2, 1 / 0.05 ** 2, 1 / 3.0, 1 / 1.5, 0.04)
    ref = _accel.gram_py(w, w, *args)
    diff = np.max(np.abs(_accel.gram_nb(w, w, *args) - ref)) / np.max(ref)
    out = {"python": _best(lambda: _accel.gram_py(w, w, *args), repeat),
           "numba": _best(lambda: _accel.gram_nb(w, w, *args), repeat)}
    return out, diff


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=20000, help="closed-loop samples")
    ap.add_argument("--points", type=int, default=576, help="Gram matrix size")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    print(f"{'kernel':<20}{'python [s]':>12}{'numba [s]':>12}{'speedup':>10}{'max diff':>12}")
    for label, (t, d) in (
            (f"closed_loop {args.samples}", bench_closed_loop(args.samples, args.repeat)),
            (f"gram {args.points}", bench_gram(args.points, args.repeat))):
        print(f"{label:<20}{t['python']:>12.4f}{t['numba']:>12.4f}"
              f"{t['python'] / t['numba']:>9.1f}x{d:>12.1e}")


if __name__ == "__main__":
    main()
