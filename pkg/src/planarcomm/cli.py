"""Command-line front end: calibrate, collect, fit-gp, simulate, report.

Every command writes into its own output directory, manifest.json first.
Exit codes: 0 ok, 1 config/input error, 2 no descent, 3 BFR below floor,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .calibrate import NoDescent, gd_calibrate
from .config import ConfigError, RunConfig, load_config
from .gpff import (DegenerateTargets, GpFeedforward, NotPositiveDefinite, TuneBudget, bfr,
                   default_kernel_params, gp_fit, tune_hyperparams)
from .metrics import MaConfig, ma_filter, ma_times, peak_ma_error, rms_in_window, summarize
from .sim import (MODES, EtaDataset, NumericalDivergence, SimLog, SteadyStateProbe,
                  collect_eta_grid, default_workers, random_points, run_scenario,
                  uniform_grid, write_table_csv)

log = logging.getLogger("planarcomm")

EXIT_OK, EXIT_CONFIG, EXIT_NO_DESCENT, EXIT_BFR, EXIT_DIVERGED = 0, 1, 2, 3, 4


class InputError(Exception):
    """Unreadable or invalid input file (maps to exit code 1)."""


@dataclass
class RunManifest:
    command: str
    config_path: Optional[str]
    output_dir: str
    seed: Optional[int]
    tool_version: str = __version__
    input_hash: str = ""
    inputs: List[str] = field(default_factory=list)
    options: dict = field(default_factory=dict)

    @classmethod
    def create(cls, command, output_dir, inputs: Sequence[str], config_path=None,
               seed=None, options=None) -> "RunManifest":
        h = hashlib.sha256()
        for p in inputs:
            with open(p, "rb") as fh:
                h.update(hashlib.sha256(fh.read()).digest())
        return cls(command, config_path, output_dir, seed, __version__, h.hexdigest()[:16],
                   list(inputs), dict(options or {}))

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        _write_json(os.path.join(out_dir, "manifest.json"), self.to_dict())


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _workers(args) -> int:
    return args.workers if getattr(args, "workers", None) else default_workers()


# ---------------------------------------------------------------------------
# calibrate

def cmd_calibrate(args) -> int:
    rc = load_config(args.config)
    if args.dry_run:
        sys.stdout.write(rc.dump())
        return EXIT_OK
    man = RunManifest.create("calibrate", args.out, [args.config], args.config,
                             rc.scenario.seed)
    man.write(args.out)
    t_settle, t_avg = rc.calib_windows
    probe = SteadyStateProbe(rc.scenario, t_settle, t_avg, workers=_workers(args))
    gd = rc.calibration
    code = EXIT_OK
    try:
        eta, trace = gd_calibrate(gd, probe)
    except NoDescent as exc:
        log.error("%s", exc)
        eta, trace, code = np.asarray(gd.eta0, dtype=float), exc.trace, EXIT_NO_DESCENT
    trace.to_csv(os.path.join(args.out, "gd_trace.csv"), {"manifest": man.to_dict()})
    result = {"eta_star_m": [float(v) for v in eta], "converged": trace.converged,
              "reason": trace.reason or "no descent", "iterations": trace.iterations,
              "measurements": trace.measurements, "n_p": gd.n_p,
              "objective_N": trace.accepted()[-1].objective, "manifest": man.to_dict()}
    _write_json(os.path.join(args.out, "eta_star.json"), result)
    if code == EXIT_OK:
        cal = replace(rc, scenario=replace(rc.scenario, mode="static-calibrated",
                                           eta_init=tuple(float(v) for v in eta)))
        with open(os.path.join(args.out, "calibrated.yaml"), "w") as fh:
            fh.write(cal.dump())
    print(f"eta* = ({eta[0]:.6e}, {eta[1]:.6e}) m after {trace.iterations} iterations, "
          f"{trace.measurements} measurements ({trace.reason or 'no descent'})")
    return code


# ---------------------------------------------------------------------------
# collect

def cmd_collect(args) -> int:
    rc = load_config(args.config)
    if args.random is not None:
        grid = random_points(args.random, args.random_seed)
        grid_desc = {"random": args.random, "random_seed": args.random_seed}
    else:
        n = args.grid if args.grid is not None else rc.collect_grid_n
        grid = uniform_grid(n)
        grid_desc = {"grid_n": n}
    man = RunManifest.create("collect", args.out, [args.config], args.config,
                             rc.scenario.seed, grid_desc)
    man.write(args.out)
    ds = collect_eta_grid(rc.scenario, grid, rc.t_hold, workers=_workers(args))
    ds.header.update(coil_pitch_m=rc.scenario.plant.coil_pitch, grid=grid_desc)
    ds.to_csv(os.path.join(args.out, "eta_dataset.csv"), man.to_dict())
    print(f"collected {len(ds)} points ({len(ds.skipped)} skipped)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit-gp

def _load_dataset(path) -> EtaDataset:
    try:
        return EtaDataset.from_csv(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{path}: {exc}") from None


def bfr_table(train, valid) -> str:
    def cell(v):
        return "n/a" if v is None else f"{v:.2f}"
    lines = [f"{'':<12}{'Training data set':>20}{'Validation data set':>22}"]
    for j, ax in enumerate("xy"):
        lines.append(f"{'BFR ' + ax + ' [%]':<12}{cell(train[j]):>20}"
                     f"{cell(None if valid is None else valid[j]):>22}")
    return "\n".join(lines)


def _safe_bfr(t, p):
    try:
        return bfr(t, p)
    except DegenerateTargets:
        return 0.0


def cmd_fit_gp(args) -> int:
    inputs = [args.dataset] + ([args.validation] if args.validation else []) \
        + ([args.config] if args.config else [])
    rc: Optional[RunConfig] = load_config(args.config) if args.config else None
    ds = _load_dataset(args.dataset)
    if len(ds) < 10:
        raise InputError(f"{args.dataset}: need at least 10 rows, found {len(ds)}")
    split = args.split if args.split is not None else (
        1.0 if args.validation else (rc.gp_split if rc else 0.8))
    if not 0.0 < split <= 1.0:
        raise InputError("--split must lie in (0, 1]")
    floor = args.bfr_floor if args.bfr_floor is not None else (rc.bfr_floor if rc else 80.0)
    budget = rc.tune if rc else TuneBudget(restarts=2, max_evals=300, subsample=200)
    period = rc.scenario.plant.coil_pitch if rc else float(ds.header.get("coil_pitch_m", 0.04))
    man = RunManifest.create("fit-gp", args.out, inputs, args.config, budget.seed,
                             {"split": split, "bfr_floor_pct": floor})
    man.write(args.out)

    rng = np.random.default_rng(budget.seed)
    order = rng.permutation(len(ds))
    n_train = max(1, int(round(split * len(ds))))
    train = ds.subset(np.sort(order[:n_train]))
    valid = ds.subset(np.sort(order[n_train:])) if n_train < len(ds) else None
    if args.validation:
        valid = _load_dataset(args.validation)

    params = []
    for j in range(2):
        init = default_kernel_params(train.eta[:, j], period)
        params.append(tune_hyperparams(train.positions, train.eta[:, j], init, budget))
    try:
        model = gp_fit(train.positions, train.eta, params)
    except NotPositiveDefinite as exc:
        raise InputError(str(exc)) from None
    model.save(os.path.join(args.out, "gp_model.json"))
    pred, _ = model.predict(train.positions)
    bfr_train = [_safe_bfr(train.eta[:, j], pred[:, j]) for j in range(2)]
    bfr_valid = None
    if valid is not None and len(valid) >= 2:
        pv, _ = model.predict(valid.positions)
        bfr_valid = [_safe_bfr(valid.eta[:, j], pv[:, j]) for j in range(2)]
    report = {
        "n_train": len(train), "n_validation": 0 if valid is None else len(valid),
        "bfr_training_pct": {"x": bfr_train[0], "y": bfr_train[1]},
        "bfr_validation_pct": ("n/a" if bfr_valid is None
                               else {"x": bfr_valid[0], "y": bfr_valid[1]}),
        "bfr_floor_pct": floor,
        "kernel_params": {ax: asdict(p) for ax, p in zip("xy", params)},
        "model_fingerprint": model.fingerprint(),
        "manifest": man.to_dict(),
    }
    _write_json(os.path.join(args.out, "bfr_report.json"), report)
    print(bfr_table(bfr_train, bfr_valid))
    if bfr_valid is not None and min(bfr_valid) < floor:
        log.error("validation BFR %.2f%% below floor %.2f%%", min(bfr_valid), floor)
        return EXIT_BFR
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / report

def _log_name(mode: str) -> str:
    return "sim_" + mode.replace("+", "_") + ".csv"


def _mode_summary(simlog: SimLog, axis: str) -> dict:
    ax = {"x": 0, "y": 1}[axis]
    peak = peak_ma_error(simlog, axis)
    rms = rms_in_window(simlog.t, simlog.e_pos[:, ax], simlog.cruise)
    return {"mode": simlog.mode, "peak_ma_m": peak, "rms_error_m": rms}


def build_report(logs: Sequence[SimLog], names: Sequence[str]) -> dict:
    axis = logs[0].header.get("scan_axis", "y")
    rows = [dict(_mode_summary(lg, axis), log=name) for lg, name in zip(logs, names)]
    base = next((r for r in rows if r["mode"] == "baseline"), None)
    out = []
    for r in rows:
        ref = base["peak_ma_m"] if (base is not None and len(rows) > 1) else None
        s = summarize(r["mode"], r["peak_ma_m"], r["rms_error_m"], ref)
        s["log"] = r["log"]
        out.append(s)
    return {"scan_axis": axis, "exposure_time_s": MaConfig().window, "scenarios": out}


def write_ma_traces(path, logs: Sequence[SimLog], header: dict):
    axis = {"x": 0, "y": 1}[logs[0].header.get("scan_axis", "y")]
    cfg = MaConfig(dt=logs[0].dt)
    tc = ma_times(logs[0].t, cfg)
    cols, data = ["t_s"], [tc]
    for lg in logs:
        if len(lg) != len(logs[0]):
            raise InputError("logs in one report must share a time base")
        cols.append(f"ma_{lg.mode.replace('+', '_')}_m")
        data.append(ma_filter(lg.e_pos[:, axis], cfg))
    write_table_csv(path, header, cols, np.column_stack(data))


def cmd_simulate(args) -> int:
    rc = load_config(args.config)
    requested = args.mode or [rc.scenario.mode]
    modes = list(MODES) if "all" in requested else list(dict.fromkeys(requested))
    inputs = [args.config] + [p for p in (args.gp_model, args.eta_file) if p]
    gp = None
    if "dynamic+ff" in modes:
        if not args.gp_model:
            raise InputError("mode dynamic+ff needs --gp-model")
        try:
            gp = GpFeedforward.load(args.gp_model)
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"{args.gp_model}: {exc}") from None
    eta_static = rc.scenario.eta_init
    if args.eta_file:
        eta_static = tuple(float(v) for v in _read_json(args.eta_file)["eta_star_m"])
    man = RunManifest.create("simulate", args.out, inputs, args.config, rc.scenario.seed,
                             {"modes": modes})
    man.write(args.out)
    logs, names = [], []
    for mode in modes:
        sc = replace(rc.scenario, mode=mode, gp=gp if mode == "dynamic+ff" else None,
                     eta_init=eta_static if mode == "static-calibrated"
                     else rc.scenario.eta_init)
        path = os.path.join(args.out, _log_name(mode))
        try:
            simlog = run_scenario(sc)
        except NumericalDivergence as exc:
            if exc.log is not None:
                exc.log.to_csv(path, man.to_dict())
            log.error("%s diverged: %s (partial log kept in %s)", mode, exc, path)
            return EXIT_DIVERGED
        simlog.to_csv(path, man.to_dict())
        logs.append(simlog)
        names.append(os.path.basename(path))
    report = build_report(logs, names)
    report["manifest"] = man.to_dict()
    _write_json(os.path.join(args.out, "report.json"), report)
    write_ma_traces(os.path.join(args.out, "ma_trace.csv"), logs, {"manifest": man.to_dict()})
    _print_report(report)
    return EXIT_OK


def _print_report(report):
    for s in report["scenarios"]:
        red = s.get("reduction_vs_baseline_pct")
        tail = f"  reduction {red:6.2f} %" if red is not None else ""
        print(f"{s['mode']:<18} peak MA {s['peak_ma_m'] * 1e9:8.3f} nm{tail}")


def cmd_report(args) -> int:
    logs = []
    for p in args.logs:
        try:
            logs.append(SimLog.from_csv(p))
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"{p}: {exc}") from None
    for p, lg in zip(args.logs, logs):
        if lg.cruise is None or not lg.header.get("completed", True):
            raise InputError(f"{p}: not a completed scenario log")
    man = RunManifest.create("report", args.out, list(args.logs))
    man.write(args.out)
    report = build_report(logs, [os.path.basename(p) for p in args.logs])
    report["manifest"] = man.to_dict()
    _write_json(os.path.join(args.out, "report.json"), report)
    write_ma_traces(os.path.join(args.out, "ma_trace.csv"), logs, {"manifest": man.to_dict()})
    _print_report(report)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="planarcomm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="static gradient-descent frame calibration")
    c.add_argument("config")
    c.add_argument("--out", default="out/calibrate")
    c.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    c.add_argument("--workers", type=int, default=None)
    c.set_defaults(func=cmd_calibrate)

    c = sub.add_parser("collect", help="settled regulator output over a grid")
    c.add_argument("config")
    c.add_argument("--out", default="out/collect")
    g = c.add_mutually_exclusive_group()
    g.add_argument("--grid", type=int, default=None, help="n for an n x n grid")
    g.add_argument("--random", type=int, default=None, help="number of random points")
    c.add_argument("--random-seed", type=int, default=1)
    c.add_argument("--workers", type=int, default=None)
    c.set_defaults(func=cmd_collect)

    c = sub.add_parser("fit-gp", help="fit the feedforward GP and report BFR")
    c.add_argument("dataset")
    c.add_argument("--config", default=None)
    c.add_argument("--validation", default=None, help="separate validation dataset")
    c.add_argument("--split", type=float, default=None, help="training fraction")
    c.add_argument("--bfr-floor", type=float, default=None, help="[%%]")
    c.add_argument("--out", default="out/gp")
    c.set_defaults(func=cmd_fit_gp)

    c = sub.add_parser("simulate", help="run scan scenarios")
    c.add_argument("config")
    c.add_argument("--mode", action="append", choices=list(MODES) + ["all"], default=None)
    c.add_argument("--gp-model", default=None)
    c.add_argument("--eta-file", default=None, help="eta_star.json from calibrate")
    c.add_argument("--out", default="out/simulate")
    c.set_defaults(func=cmd_simulate)

    c = sub.add_parser("report", help="summarize scenario logs")
    c.add_argument("logs", nargs="+")
    c.add_argument("--out", default="out/report")
    c.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalDivergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
